"""Importance scores for heads, hidden dims, MLP dims and whole layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .model import (LayerMask, SuppressionSpec, TransformerModel, capture_activations,
                    forward, pad_batch, perplexity)

# ε used when scoring heads; the limit ε -> 0 gives causal-uniform attention.
HEAD_EPSILON = 0.0


@dataclass
class HeadImportance:
    scores: list[np.ndarray]
    alpha: float
    b: int
    raw: Optional[list[np.ndarray]] = None


@dataclass
class DimImportance:
    scores: np.ndarray
    b: int
    lengths: list[int] = field(default_factory=list)


@dataclass
class MlpDimStats:
    counts: list[np.ndarray]
    tau: list[float]
    b: int


@dataclass
class LayerImportance:
    delta_ppl: np.ndarray
    baseline_ppl: float
    layers: list[int] = field(default_factory=list)


def _final_probs(model: TransformerModel, prompts: list[list[int]],
                 suppress: Optional[SuppressionSpec] = None) -> np.ndarray:
    ids, lengths = pad_batch(prompts)
    logits = forward(model, ids, suppress=suppress).data
    last = logits[np.arange(len(prompts)), lengths - 1]
    z = last - last.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def head_importance_raw(model: TransformerModel, calib: Sequence[Sequence[int]],
                        epsilon: float = HEAD_EPSILON) -> list[np.ndarray]:
    """Mean KL(intact || head-suppressed) of the final-position next-token
    distribution, per layer and head."""
    prompts = [list(p) for p in calib]
    if not prompts:
        raise ContractError("calibration set is empty")
    base = _final_probs(model, prompts)
    out = []
    for l in range(model.n_layers):
        row = np.empty(model.heads(l))
        for h in range(model.heads(l)):
            sup = _final_probs(model, prompts, SuppressionSpec(l, h, epsilon))
            row[h] = float(np.mean(ad.kl_rows(base, sup)))
        out.append(row)
    return out


def minmax_normalize_rows(raw: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Per-row min-max rescale to [0, 1]; constant rows become 0.5."""
    out = []
    for row in raw:
        row = np.asarray(row, dtype=np.float64)
        lo, hi = row.min(), row.max()
        if hi == lo:
            out.append(np.full_like(row, 0.5))
        else:
            out.append((row - lo) / (hi - lo))
    return out


def propagate_importance(normalized: Sequence[np.ndarray], alpha: float,
                         raw: Optional[Sequence[np.ndarray]] = None) -> HeadImportance:
    """Blend each layer with the already-propagated previous layer.

    By default the current layer enters through its normalized scores.
    Passing ``raw`` selects the variant where deeper layers mix in
    unnormalized scores instead.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha={alpha} outside [0, 1]")
    widths = {len(r) for r in normalized}
    if len(widths) > 1:
        raise ContractError("propagation needs the same head count in every layer")
    current = raw if raw is not None else normalized
    scores = [np.asarray(normalized[0], dtype=np.float64).copy()]
    for l in range(1, len(normalized)):
        scores.append(alpha * scores[l - 1] + (1.0 - alpha) * np.asarray(current[l], dtype=np.float64))
    return HeadImportance(scores=scores, alpha=alpha, b=0)


def head_importance(model: TransformerModel, calib, alpha: float, raw_recursion: bool = False) -> HeadImportance:
    raw = head_importance_raw(model, calib)
    imp = propagate_importance(minmax_normalize_rows(raw), alpha, raw=raw if raw_recursion else None)
    imp.b = len(calib)
    imp.raw = raw
    return imp


def select_heads(imp: Union[HeadImportance, Sequence[np.ndarray]], k_attn: int) -> dict[int, list[int]]:
    """The ``k_attn`` least important heads of each layer (lower index first on ties)."""
    scores = imp.scores if isinstance(imp, HeadImportance) else imp
    if k_attn < 0:
        raise ContractError("k_attn must be >= 0")
    out = {}
    for l, row in enumerate(scores):
        if k_attn >= len(row):
            raise ContractError(f"k_attn={k_attn} would remove every head of layer {l} ({len(row)})")
        order = np.argsort(np.asarray(row), kind="stable")
        out[l] = sorted(int(h) for h in order[:k_attn])
    return out


def global_head_scores(raw: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Layer-averaged raw scores, broadcast back to every layer."""
    avg = np.mean(np.stack([np.asarray(r) for r in raw]), axis=0)
    return [avg.copy() for _ in raw]


def embedding_dim_importance(model: TransformerModel, calib: Sequence[Sequence[int]]) -> DimImportance:
    """Mean over samples and positions of ``|E[token, d] * dL/dE[token, d]|``.

    Each sample is a full token sequence; the loss is next-token cross
    entropy over its positions, with gradients zeroed between samples.
    """
    if not model.token_embedding.requires_grad:
        raise ContractError("embedding importance needs a grad-enabled embedding")
    seqs = [list(s) for s in calib]
    if not seqs:
        raise ContractError("calibration set is empty")
    emb = model.token_embedding
    acc = np.zeros(model.d_model)
    lengths = []
    for seq in seqs:
        if len(seq) < 2:
            raise ContractError("each calibration sequence needs at least two tokens")
        inputs = np.asarray(seq[:-1])
        model.zero_grad()
        with ad.Tape() as tape:
            loss = ad.cross_entropy_logits(forward(model, inputs), np.asarray(seq[1:]))
        ad.backward(loss, tape)
        rows = inputs
        acc += np.abs(emb.data[rows] * emb.grad[rows]).sum(axis=0) / len(rows)
        lengths.append(len(rows))
    model.zero_grad()
    return DimImportance(scores=acc / len(seqs), b=len(seqs), lengths=lengths)


def select_hidden_dims(imp: DimImportance, n_keep: int) -> list[int]:
    """Indices of the ``n_keep`` highest-scoring dims, ascending (lower index wins ties)."""
    d = len(imp.scores)
    if not 1 <= n_keep <= d:
        raise ContractError(f"hidden keep count {n_keep} outside [1, {d}]")
    order = np.argsort(-imp.scores, kind="stable")
    return sorted(int(i) for i in order[:n_keep])


def last_token_up(model: TransformerModel, prompts: list[list[int]]) -> list[np.ndarray]:
    """Per layer, ``H_last`` rows ``[B, d_ff_l]`` of the up projection."""
    ids, lengths = pad_batch(prompts)
    caps = capture_activations(model, ids)
    rows = np.arange(len(prompts))
    return [c.mlp_up[rows, lengths - 1] for c in caps]


def mlp_dim_stats(model: TransformerModel, calib: Sequence[Sequence[int]],
                  tau: Union[float, str] = "auto") -> MlpDimStats:
    """Count, per layer and intermediate dim, how many samples have
    ``|H_last| > tau``.  ``tau="auto"`` uses the per-layer median of
    ``|H_last|`` pooled over dims and samples."""
    prompts = [list(p) for p in calib]
    if not prompts:
        raise ContractError("calibration set is empty")
    if tau != "auto" and float(tau) < 0:
        raise ContractError("tau must be >= 0")
    counts, taus = [], []
    for h in last_token_up(model, prompts):
        mag = np.abs(h)
        t = float(np.median(mag)) if tau == "auto" else float(tau)
        counts.append((mag > t).sum(axis=0).astype(np.int64))
        taus.append(t)
    return MlpDimStats(counts=counts, tau=taus, b=len(prompts))


def select_mlp_dims(stats: Union[MlpDimStats, Sequence[np.ndarray]], k_mlp: int) -> dict[int, list[int]]:
    """Per layer, the ``k_mlp`` most frequently active dims (lower index wins ties)."""
    counts = stats.counts if isinstance(stats, MlpDimStats) else stats
    out = {}
    for l, c in enumerate(counts):
        c = np.asarray(c)
        if not 1 <= k_mlp <= len(c):
            raise ContractError(f"k_mlp={k_mlp} outside [1, {len(c)}] for layer {l}")
        order = np.argsort(-c, kind="stable")
        out[l] = sorted(int(i) for i in order[:k_mlp])
    return out


def layer_delta_ppl(model: TransformerModel, calib: Sequence[Sequence[int]],
                    base_mask: frozenset = frozenset()) -> LayerImportance:
    """PPL increase from masking each layer not already in ``base_mask``."""
    seqs = [list(s) for s in calib]
    base = perplexity(model, seqs, mask=LayerMask(base_mask))
    present = [l for l in range(model.n_layers) if l not in base_mask]
    deltas = np.array([perplexity(model, seqs, mask=LayerMask(base_mask | {l})) - base
                       for l in present])
    return LayerImportance(delta_ppl=deltas, baseline_ppl=base, layers=present)


def select_layers(model: TransformerModel, calib, k_layer: int,
                  recompute: bool = True) -> tuple[list[int], list[LayerImportance]]:
    """Greedy removal order (original layer indices) down to ``k_layer`` layers.

    With ``recompute`` the scores are refreshed on the reduced model after
    every removal; otherwise one scoring pass ranks all layers.
    """
    n = model.n_layers
    if not 1 <= k_layer <= n:
        raise ContractError(f"k_layer={k_layer} outside [1, {n}]")
    removed: list[int] = []
    history: list[LayerImportance] = []
    if not recompute and k_layer < n:
        imp = layer_delta_ppl(model, calib)
        history.append(imp)
        order = np.argsort(imp.delta_ppl, kind="stable")[: n - k_layer]
        return [imp.layers[i] for i in order], history
    while n - len(removed) > k_layer:
        imp = layer_delta_ppl(model, calib, frozenset(removed))
        history.append(imp)
        removed.append(imp.layers[int(np.argmin(imp.delta_ppl))])
    return removed, history


# -- report serialization -------------------------------------------------


def report_rows(kind: str, per_layer: Sequence[np.ndarray]) -> list[tuple]:
    return [(kind, l, i, float(v)) for l, row in enumerate(per_layer) for i, v in enumerate(row)]


def write_report(path, rows: Sequence[tuple], meta: Optional[dict] = None) -> None:
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    lines.append("kind\tlayer\tindex\tscore")
    for kind, layer, index, score in rows:
        lines.append(f"{kind}\t{layer}\t{index}\t{score!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> list[tuple]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line.startswith("kind\t"):
            continue
        kind, layer, index, score = line.split("\t")
        rows.append((kind, layer if layer == "-" else int(layer), int(index), float(score)))
    return rows
