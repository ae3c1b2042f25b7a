"""Desk-scale pre-norm decoder-only transformer.

Layers may be ragged after pruning: each layer carries its own head count
and MLP width, inferred from its weight shapes.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, SequenceLengthError, TokenIndexError


@dataclass
class ModelConfig:
    n_layers: int = 8
    n_heads: int = 8
    d_k: int = 8
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 503
    max_seq_len: int = 12
    rope_base: float = 10000.0
    tie_embeddings: bool = True
    mlp_bias: bool = True
    norm_eps: float = 1e-6
    # RMS normaliser divisor; stays at the pre-pruning width so that
    # deleting residual dimensions equals zeroing them.
    norm_width: Optional[int] = None

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_k", "d_model", "d_ff", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"model.{name} must be >= 1")
        if self.d_k % 2:
            raise ContractError("d_k must be even for rotary encoding")
        if self.norm_width is None:
            self.norm_width = self.d_model

    def check_unpruned(self) -> None:
        if self.d_model != self.n_heads * self.d_k:
            raise ContractError(
                f"d_model ({self.d_model}) must equal n_heads*d_k ({self.n_heads}*{self.d_k})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    attn_norm: Tensor
    mlp_norm: Tensor
    b_gate: Optional[Tensor] = None
    b_up: Optional[Tensor] = None
    b_down: Optional[Tensor] = None

    @property
    def d_ff(self) -> int:
        return self.w_up.shape[1]

    def n_heads(self, d_k: int) -> int:
        return self.wq.shape[1] // d_k

    def named(self) -> list[tuple[str, Tensor]]:
        out = []
        for name in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down",
                     "b_gate", "b_up", "b_down", "attn_norm", "mlp_norm"):
            t = getattr(self, name)
            if t is not None:
                out.append((name, t))
        return out


@dataclass
class TransformerModel:
    config: ModelConfig
    token_embedding: Tensor
    layers: list[LayerWeights]
    final_norm: Tensor
    untied_lm_head: Optional[Tensor] = None

    @property
    def lm_head(self) -> Tensor:
        """``d_model x V`` output projection; a view of the embedding when tied."""
        if self.config.tie_embeddings:
            return Tensor(self.token_embedding.data.T)
        return self.untied_lm_head

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_model(self) -> int:
        return self.token_embedding.shape[1]

    def heads(self, layer: int) -> int:
        return self.layers[layer].n_heads(self.config.d_k)

    def head_counts(self) -> list[int]:
        return [self.heads(l) for l in range(self.n_layers)]

    def mlp_widths(self) -> list[int]:
        return [layer.d_ff for layer in self.layers]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("token_embedding", self.token_embedding)]
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{n}", t) for n, t in layer.named())
        out.append(("final_norm", self.final_norm))
        if not self.config.tie_embeddings:
            out.append(("lm_head", self.untied_lm_head))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def copy(self) -> "TransformerModel":
        def clone(t: Optional[Tensor]):
            return None if t is None else Tensor(t.data.copy(), requires_grad=t.requires_grad)

        layers = [LayerWeights(**{f.name: clone(getattr(l, f.name)) for f in fields(LayerWeights)})
                  for l in self.layers]
        return TransformerModel(
            config=copy.deepcopy(self.config),
            token_embedding=clone(self.token_embedding),
            layers=layers,
            final_norm=clone(self.final_norm),
            untied_lm_head=clone(self.untied_lm_head),
        )

    def checksum(self) -> str:
        h = hashlib.sha256(repr(sorted(self.config.to_dict().items())).encode())
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SuppressionSpec:
    layer: int
    head: int
    epsilon: float = 0.0


@dataclass(frozen=True)
class LayerMask:
    skip: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "skip", frozenset(int(i) for i in self.skip))


@dataclass
class LayerCapture:
    attn_out: np.ndarray
    attn_ctx: np.ndarray
    attn_probs: np.ndarray
    mlp_up: np.ndarray


@lru_cache(maxsize=64)
def _rope_cached(seq_len: int, d_k: int, base: float):
    cos, sin = ad.rope_tables(seq_len, d_k, base)
    cos.flags.writeable = False
    sin.flags.writeable = False
    return cos, sin


@lru_cache(maxsize=64)
def _causal(seq_len: int) -> np.ndarray:
    m = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    m.flags.writeable = False
    return m


def _check_tokens(model: TransformerModel, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim not in (1, 2) or ids.shape[-1] == 0:
        raise ContractError("tokens must be a nonempty sequence (or batch of sequences)")
    cfg = model.config
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise TokenIndexError(f"token id outside [0, {cfg.vocab_size})")
    if ids.shape[-1] > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {ids.shape[-1]} > max_seq_len {cfg.max_seq_len}")
    return ids


def _attention(h: Tensor, layer: LayerWeights, d_k: int, cos, sin, causal,
               head_scale: Optional[np.ndarray], cap: Optional[dict]) -> Tensor:
    b, s, _ = h.shape
    nh = layer.n_heads(d_k)

    def split(w):
        return ad.transpose(ad.reshape(h @ w, (b, s, nh, d_k)), (0, 2, 1, 3))

    q = ad.rope(split(layer.wq), cos, sin)
    k = ad.rope(split(layer.wk), cos, sin)
    v = split(layer.wv)
    scores = (q @ ad.swap_last(k)) * (1.0 / math.sqrt(d_k))
    if head_scale is not None:
        scores = scores * head_scale[None, :, None, None]
    probs = ad.softmax_last_dim(scores, causal)
    ctx = ad.reshape(ad.transpose(probs @ v, (0, 2, 1, 3)), (b, s, nh * d_k))
    out = ctx @ layer.wo
    if cap is not None:
        cap["attn_probs"] = probs.data
        cap["attn_ctx"] = ctx.data
        cap["attn_out"] = out.data
    return out


def _mlp(h: Tensor, layer: LayerWeights, cap: Optional[dict]) -> Tensor:
    gate = h @ layer.w_gate
    up = h @ layer.w_up
    if layer.b_gate is not None:
        gate = gate + layer.b_gate
    if layer.b_up is not None:
        up = up + layer.b_up
    if cap is not None:
        cap["mlp_up"] = up.data
    y = (ad.silu(gate) * up) @ layer.w_down
    if layer.b_down is not None:
        y = y + layer.b_down
    return y


def forward(model: TransformerModel, tokens, suppress: Optional[SuppressionSpec] = None,
            mask: Optional[LayerMask] = None, captures: Optional[list] = None) -> Tensor:
    """Logits ``[S, V]`` for one sequence, or ``[B, S, V]`` for a batch.

    ``suppress`` multiplies one head's pre-softmax scores by its epsilon;
    layers in ``mask.skip`` are bypassed entirely.  When ``captures`` is a
    list it receives one dict per executed layer.
    """
    ids = _check_tokens(model, tokens)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    cfg = model.config
    skip = mask.skip if mask is not None else frozenset()
    if any(l < 0 or l >= model.n_layers for l in skip):
        raise ContractError(f"layer mask {sorted(skip)} outside [0, {model.n_layers})")
    if suppress is not None:
        if not 0 <= suppress.layer < model.n_layers:
            raise ContractError(f"suppressed layer {suppress.layer} out of range")
        if not 0 <= suppress.head < model.heads(suppress.layer):
            raise ContractError(f"suppressed head {suppress.head} out of range")
        if not 0.0 <= suppress.epsilon <= 1.0:
            raise ContractError("suppression epsilon must lie in [0, 1]")

    s = ids.shape[1]
    cos, sin = _rope_cached(s, cfg.d_k, float(cfg.rope_base))
    causal = _causal(s)
    eps, width = cfg.norm_eps, cfg.norm_width

    x = ad.embedding(model.token_embedding, ids)
    for l, layer in enumerate(model.layers):
        if l in skip:
            continue
        head_scale = None
        if suppress is not None and suppress.layer == l:
            head_scale = np.ones(layer.n_heads(cfg.d_k))
            head_scale[suppress.head] = suppress.epsilon
        cap = {} if captures is not None else None
        x = x + _attention(ad.rms_norm(x, layer.attn_norm, eps, width), layer, cfg.d_k,
                           cos, sin, causal, head_scale, cap)
        x = x + _mlp(ad.rms_norm(x, layer.mlp_norm, eps, width), layer, cap)
        if cap is not None:
            cap["layer"] = l
            captures.append(cap)
    x = ad.rms_norm(x, model.final_norm, eps, width)
    if cfg.tie_embeddings:
        logits = x @ ad.swap_last(model.token_embedding)
    else:
        logits = x @ model.untied_lm_head
    return logits[0] if single else logits


def capture_activations(model: TransformerModel, tokens) -> list[LayerCapture]:
    """Per-layer side-channel record of an unmodified forward pass."""
    caps: list = []
    forward(model, tokens, captures=caps)
    single = np.asarray(tokens).ndim == 1
    out = []
    for c in caps:
        vals = {k: c[k] for k in ("attn_out", "attn_ctx", "attn_probs", "mlp_up")}
        if single:
            vals = {k: v[0] for k, v in vals.items()}
        out.append(LayerCapture(**vals))
    return out


def pad_batch(seqs: Sequence[Sequence[int]], fill: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a rectangle; returns ``(ids, lengths)``."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    ids = np.full((len(seqs), int(lengths.max())), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def sequence_nll(model: TransformerModel, seqs: Sequence[Sequence[int]],
                 mask: Optional[LayerMask] = None, batch_size: int = 512) -> tuple[float, int]:
    """Summed next-token NLL and predicted-position count over ``seqs``."""
    total, count = 0.0, 0
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        ids, lengths = pad_batch(chunk)
        if ids.shape[1] < 2:
            continue
        logp = _log_softmax(forward(model, ids[:, :-1], mask=mask).data)
        picked = np.take_along_axis(logp, ids[:, 1:, None], axis=-1)[..., 0]
        valid = np.arange(ids.shape[1] - 1)[None, :] < (lengths[:, None] - 1)
        total += float(-(picked * valid).sum())
        count += int(valid.sum())
    return total, count


def perplexity(model: TransformerModel, seqs: Sequence[Sequence[int]],
               mask: Optional[LayerMask] = None) -> float:
    """exp(mean next-token NLL) over every predicted position of ``seqs``."""
    if len(seqs) == 0:
        raise ContractError("perplexity needs a nonempty slice")
    total, count = sequence_nll(model, list(seqs), mask=mask)
    if count == 0:
        raise ContractError("no predicted positions in slice")
    return math.exp(total / count)


def init_model(config: ModelConfig, seed: int) -> TransformerModel:
    """Seeded normal(0, 0.02) init; residual output projections shrink by
    1/sqrt(2L); norms start at 1 and biases at 0."""
    config = copy.deepcopy(config)
    config.check_unpruned()
    rng = np.random.default_rng(seed)
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    inner = config.n_heads * config.d_k
    std = 0.02
    resid = std / math.sqrt(2 * config.n_layers)

    def normal(shape, scale=std):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    def const(n, value):
        return Tensor(np.full(n, value, dtype=np.float64), requires_grad=True)

    emb = normal((v, d))
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            wq=normal((d, inner)), wk=normal((d, inner)), wv=normal((d, inner)),
            wo=normal((inner, d), resid),
            w_gate=normal((d, dff)), w_up=normal((d, dff)), w_down=normal((dff, d), resid),
            attn_norm=const(d, 1.0), mlp_norm=const(d, 1.0),
            b_gate=const(dff, 0.0) if config.mlp_bias else None,
            b_up=const(dff, 0.0) if config.mlp_bias else None,
            b_down=const(d, 0.0) if config.mlp_bias else None,
        ))
    head = None if config.tie_embeddings else normal((d, v))
    return TransformerModel(config=config, token_embedding=emb, layers=layers,
                            final_norm=const(d, 1.0), untied_lm_head=head)
