"""Structural surgery on :class:`TransformerModel`.

Every transform returns a fresh, strictly smaller model and leaves its
input untouched.  Deleted structures are removed outright (not zeroed),
so each result equals the original with the same structures masked.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, FormatError, PlanError
from .model import LayerWeights, TransformerModel


@dataclass
class PruningPlan:
    heads_to_prune: dict[int, list[int]] = field(default_factory=dict)
    hidden_dims_to_keep: Optional[list[int]] = None
    mlp_dims_to_keep: Optional[dict[int, list[int]]] = None
    layers_to_remove: Optional[list[int]] = None
    provenance: dict[str, str] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return (not any(self.heads_to_prune.values()) and self.hidden_dims_to_keep is None
                and self.mlp_dims_to_keep is None and not self.layers_to_remove)

    def validate(self, model: TransformerModel) -> None:
        for l, heads in self.heads_to_prune.items():
            if not 0 <= l < model.n_layers:
                raise PlanError(f"plan names layer {l}, model has {model.n_layers}")
            nh = model.heads(l)
            if len(set(heads)) != len(heads):
                raise PlanError(f"layer {l}: duplicate head indices")
            bad = [h for h in heads if not 0 <= h < nh]
            if bad:
                raise PlanError(f"layer {l}: head {bad[0]} out of range [0, {nh})")
            if len(heads) >= nh:
                raise PlanError(f"layer {l}: pruning {len(heads)} of {nh} heads leaves none")
        if self.hidden_dims_to_keep is not None:
            _check_keep(self.hidden_dims_to_keep, model.d_model, "hidden")
        if self.mlp_dims_to_keep is not None:
            for l, keep in self.mlp_dims_to_keep.items():
                if not 0 <= l < model.n_layers:
                    raise PlanError(f"plan names layer {l}, model has {model.n_layers}")
                _check_keep(keep, model.layers[l].d_ff, f"layer {l} mlp")
        if self.layers_to_remove:
            _check_removal(self.layers_to_remove, model.n_layers)

    def to_text(self) -> str:
        lines = ["# pruning plan v1", "kind\tlayer\tindices"]
        for k, v in sorted(self.provenance.items()):
            lines.insert(1, f"# provenance {k}={v}")
        for l in sorted(self.heads_to_prune):
            lines.append(f"heads\t{l}\t{_fmt(self.heads_to_prune[l])}")
        if self.hidden_dims_to_keep is not None:
            lines.append(f"hidden_keep\t-\t{_fmt(self.hidden_dims_to_keep)}")
        if self.mlp_dims_to_keep is not None:
            for l in sorted(self.mlp_dims_to_keep):
                lines.append(f"mlp_keep\t{l}\t{_fmt(self.mlp_dims_to_keep[l])}")
        if self.layers_to_remove is not None:
            lines.append(f"layers_remove\t-\t{_fmt(self.layers_to_remove)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PruningPlan":
        plan = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line or line.startswith("kind\t"):
                continue
            if line.startswith("#"):
                if line.startswith("# provenance ") and "=" in line:
                    k, v = line[len("# provenance "):].split("=", 1)
                    plan.provenance[k] = v
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"plan line {lineno}: expected kind, layer, indices")
            kind, layer, idx = parts
            try:
                values = [int(x) for x in idx.split(",")] if idx else []
                if kind == "heads":
                    plan.heads_to_prune[int(layer)] = values
                elif kind == "hidden_keep":
                    plan.hidden_dims_to_keep = values
                elif kind == "mlp_keep":
                    plan.mlp_dims_to_keep = plan.mlp_dims_to_keep or {}
                    plan.mlp_dims_to_keep[int(layer)] = values
                elif kind == "layers_remove":
                    plan.layers_to_remove = values
                else:
                    raise FormatError(f"plan line {lineno}: unknown kind {kind!r}")
            except ValueError:
                raise FormatError(f"plan line {lineno}: bad integer") from None
        return plan

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PruningPlan":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _fmt(values: Iterable[int]) -> str:
    return ",".join(str(int(v)) for v in values)


def _check_keep(keep: Sequence[int], width: int, what: str) -> None:
    if len(keep) == 0:
        raise ContractError(f"{what} keep set is empty")
    arr = np.asarray(keep)
    if arr.min() < 0 or arr.max() >= width:
        raise PlanError(f"{what} keep index out of range [0, {width})")
    if (np.diff(arr) <= 0).any():
        raise PlanError(f"{what} keep set must be strictly increasing")


def _check_removal(remove: Sequence[int], n_layers: int) -> None:
    uniq = set(int(r) for r in remove)
    if len(uniq) != len(remove):
        raise PlanError("duplicate layer in removal list")
    bad = [r for r in uniq if not 0 <= r < n_layers]
    if bad:
        raise PlanError(f"layer {bad[0]} out of range [0, {n_layers})")
    if len(uniq) >= n_layers:
        raise ContractError("removing every layer leaves an empty model")


def _t(arr: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.ascontiguousarray(arr), requires_grad=like.requires_grad)


def _rebuild(model: TransformerModel, **changes) -> TransformerModel:
    out = model.copy()
    for k, v in changes.items():
        setattr(out, k, v)
    return out


def prune_heads(model: TransformerModel, plan: PruningPlan) -> TransformerModel:
    """Delete the planned heads' Q/K/V column blocks and W_o row blocks."""
    only_heads = PruningPlan(heads_to_prune=plan.heads_to_prune)
    only_heads.validate(model)
    out = model.copy()
    d_k = model.config.d_k
    for l, heads in plan.heads_to_prune.items():
        if not heads:
            continue
        layer = out.layers[l]
        keep_heads = [h for h in range(layer.n_heads(d_k)) if h not in set(heads)]
        cols = np.concatenate([np.arange(h * d_k, (h + 1) * d_k) for h in keep_heads])
        out.layers[l] = replace(
            layer,
            wq=_t(layer.wq.data[:, cols], layer.wq),
            wk=_t(layer.wk.data[:, cols], layer.wk),
            wv=_t(layer.wv.data[:, cols], layer.wv),
            wo=_t(layer.wo.data[cols, :], layer.wo),
        )
    return out


def prune_hidden_dims(model: TransformerModel, keep: Sequence[int]) -> TransformerModel:
    """Restrict the residual stream to ``keep`` in every layer at once."""
    keep = [int(k) for k in keep]
    _check_keep(keep, model.d_model, "hidden")
    idx = np.asarray(keep)
    out = model.copy()
    out.token_embedding = _t(model.token_embedding.data[:, idx], model.token_embedding)
    out.final_norm = _t(model.final_norm.data[idx], model.final_norm)
    if not model.config.tie_embeddings:
        out.untied_lm_head = _t(model.untied_lm_head.data[idx, :], model.untied_lm_head)
    for l, layer in enumerate(out.layers):
        changes = {
            "wq": _t(layer.wq.data[idx, :], layer.wq),
            "wk": _t(layer.wk.data[idx, :], layer.wk),
            "wv": _t(layer.wv.data[idx, :], layer.wv),
            "w_gate": _t(layer.w_gate.data[idx, :], layer.w_gate),
            "w_up": _t(layer.w_up.data[idx, :], layer.w_up),
            "wo": _t(layer.wo.data[:, idx], layer.wo),
            "w_down": _t(layer.w_down.data[:, idx], layer.w_down),
            "attn_norm": _t(layer.attn_norm.data[idx], layer.attn_norm),
            "mlp_norm": _t(layer.mlp_norm.data[idx], layer.mlp_norm),
        }
        if layer.b_down is not None:
            changes["b_down"] = _t(layer.b_down.data[idx], layer.b_down)
        out.layers[l] = replace(layer, **changes)
    out.config = replace(out.config, d_model=len(keep))
    return out


def prune_mlp_dims(model: TransformerModel, keep_per_layer: dict[int, Sequence[int]]) -> TransformerModel:
    """Keep only the listed intermediate dimensions of each layer's MLP."""
    out = model.copy()
    for l, keep in keep_per_layer.items():
        if not 0 <= l < model.n_layers:
            raise PlanError(f"plan names layer {l}, model has {model.n_layers}")
        layer = out.layers[l]
        _check_keep(list(keep), layer.d_ff, f"layer {l} mlp")
        idx = np.asarray(keep, dtype=np.int64)
        changes = {
            "w_gate": _t(layer.w_gate.data[:, idx], layer.w_gate),
            "w_up": _t(layer.w_up.data[:, idx], layer.w_up),
            "w_down": _t(layer.w_down.data[idx, :], layer.w_down),
        }
        if layer.b_gate is not None:
            changes["b_gate"] = _t(layer.b_gate.data[idx], layer.b_gate)
        if layer.b_up is not None:
            changes["b_up"] = _t(layer.b_up.data[idx], layer.b_up)
        out.layers[l] = replace(layer, **changes)
    return out


def drop_layers(model: TransformerModel, remove: Sequence[int]) -> TransformerModel:
    """Physically delete layers; survivors keep their relative order."""
    remove = [int(r) for r in remove]
    if not remove:
        return model.copy()
    _check_removal(remove, model.n_layers)
    out = model.copy()
    gone = set(remove)
    out.layers = [layer for l, layer in enumerate(out.layers) if l not in gone]
    out.config = replace(out.config, n_layers=len(out.layers))
    return out


def apply_plan(model: TransformerModel, plan: PruningPlan) -> TransformerModel:
    """Heads, then hidden dims, then MLP dims, then layers."""
    plan.validate(model)
    out = prune_heads(model, plan) if any(plan.heads_to_prune.values()) else model.copy()
    if plan.hidden_dims_to_keep is not None:
        out = prune_hidden_dims(out, plan.hidden_dims_to_keep)
    if plan.mlp_dims_to_keep is not None:
        out = prune_mlp_dims(out, plan.mlp_dims_to_keep)
    if plan.layers_to_remove:
        out = drop_layers(out, plan.layers_to_remove)
    return out


def random_plan(model: TransformerModel, k_attn: int, seed: int) -> PruningPlan:
    rng = np.random.default_rng(seed)
    heads = {}
    for l in range(model.n_layers):
        nh = model.heads(l)
        if k_attn >= nh:
            raise ContractError(f"k_attn={k_attn} would remove every head of layer {l} ({nh})")
        heads[l] = sorted(int(h) for h in rng.choice(nh, size=k_attn, replace=False)) if k_attn else []
    return PruningPlan(heads_to_prune=heads, provenance={"heads": f"random(seed={seed})"})


def param_count(model: TransformerModel, include_embeddings: bool = True) -> int:
    """Scalar parameter count; a tied output head is never counted twice."""
    total = 0
    for name, t in model.named_parameters():
        if name == "token_embedding" and not include_embeddings:
            continue
        total += int(t.size)
    return total
