"""Activation-concentration probes and the WANDA-style weight score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .model import TransformerModel, capture_activations, pad_batch
from .recdata import RecDataset

DEFAULT_K_GRID = (1, 5, 10, 25, 50, 100)
SITES = ("attn_out", "mlp_up")


def concentration_ratio(values, k_percent: float) -> float:
    """Share of total |mass| held by the top ``ceil(d*k/100)`` entries."""
    v = np.abs(np.asarray(getattr(values, "data", values), dtype=np.float64)).ravel()
    if not 0 < k_percent <= 100:
        raise ContractError(f"k_percent={k_percent} outside (0, 100]")
    if v.size == 0:
        raise ContractError("empty vector")
    tot = v.sum()
    if tot == 0:
        raise ContractError("concentration ratio undefined for an all-zero vector")
    top = math.ceil(v.size * k_percent / 100.0 - 1e-9)
    return float(np.sort(v)[::-1][:top].sum() / tot)


def _ratios(rows: np.ndarray, k_grid) -> dict[float, float]:
    """Mean ratio over rows, skipping all-zero rows."""
    mags = np.abs(rows)
    keep = mags.sum(axis=1) > 0
    mags = mags[keep]
    if len(mags) == 0:
        return {k: float("nan") for k in k_grid}
    srt = -np.sort(-mags, axis=1)
    csum = np.cumsum(srt, axis=1)
    d = mags.shape[1]
    out = {}
    for k in k_grid:
        top = math.ceil(d * k / 100.0 - 1e-9)
        out[k] = float(np.mean(csum[:, top - 1] / csum[:, -1]))
    return out


@dataclass
class ConcentrationReport:
    ratios: dict[tuple[int, str], dict[float, float]]
    b: int
    position: str = "last"
    k_grid: tuple = DEFAULT_K_GRID

    def rows(self) -> list[tuple[int, str, float, float]]:
        return [(l, site, k, r) for (l, site), m in sorted(self.ratios.items())
                for k, r in sorted(m.items())]

    def to_tsv(self) -> str:
        lines = [f"# samples={self.b}", f"# position={self.position}", "layer\tsite\tk_percent\tratio"]
        for l, site, k, r in self.rows():
            lines.append(f"{l}\t{site}\t{k:g}\t{r:.10f}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    def mean_ratio(self, site: str, k: float) -> float:
        vals = [m[k] for (l, s), m in self.ratios.items() if s == site]
        return float(np.mean(vals))


def observe(model: TransformerModel, dataset: RecDataset, b: int = 100,
            k_grid: Sequence[float] = DEFAULT_K_GRID, seed: int = 0,
            position: str = "last", split: str = "train") -> ConcentrationReport:
    """Average concentration ratios of attention outputs and MLP
    up-projections over ``b`` seeded samples.

    ``position="last"`` probes the final prompt token; ``"all"`` averages
    over every position of every sample.
    """
    if b < 1:
        raise ContractError("observe needs at least one sample")
    idx = dataset.split_indices(split)
    if b > len(idx):
        raise ContractError(f"b={b} exceeds the {split} split ({len(idx)})")
    if position not in ("last", "all"):
        raise ContractError(f"unknown probe position {position!r}")
    chosen = np.sort(idx[np.random.default_rng(seed).choice(len(idx), size=b, replace=False)])
    prompts = dataset.prompts(split, chosen)
    ids, lengths = pad_batch(prompts)
    caps = capture_activations(model, ids)
    rows = np.arange(b)
    valid = np.arange(ids.shape[1])[None, :] < lengths[:, None]
    ratios = {}
    for l, cap in enumerate(caps):
        for site in SITES:
            act = getattr(cap, site)
            flat = act[rows, lengths - 1] if position == "last" else act[valid]
            ratios[(l, site)] = _ratios(flat, k_grid)
    return ConcentrationReport(ratios=ratios, b=b, position=position, k_grid=tuple(k_grid))


def wanda_score(w, x) -> np.ndarray:
    """``|W[i, j]| * ||X[:, i]||_2`` for ``W: [in, out]`` and ``X: [S, in]``."""
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if w.ndim != 2 or x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"wanda_score shape mismatch: W {w.shape}, X {x.shape}")
    return np.abs(w) * np.linalg.norm(x, axis=0)[:, None]


def wanda_head_scores(model: TransformerModel, prompts: list[list[int]]) -> list[np.ndarray]:
    """Per-head sums of the WANDA score over each head's W_o rows, using
    the attention context at every real position as the input activation."""
    ids, lengths = pad_batch(prompts)
    caps = capture_activations(model, ids)
    valid = np.arange(ids.shape[1])[None, :] < lengths[:, None]
    d_k = model.config.d_k
    out = []
    for l, cap in enumerate(caps):
        score = wanda_score(model.layers[l].wo.data, cap.attn_ctx[valid])
        nh = model.heads(l)
        out.append(score.reshape(nh, d_k, -1).sum(axis=(1, 2)))
    return out
