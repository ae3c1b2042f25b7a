"""Full-catalog ranking, HR@K and NDCG@K."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .model import TransformerModel, forward, pad_batch, perplexity
from .recdata import RecDataset


def ranks_from_logits(item_logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target among item logits (rows), descending;
    ties rank the lower token id first."""
    item_logits = np.atleast_2d(item_logits)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n = item_logits.shape[1]
    if targets.min() < 0 or targets.max() >= n:
        raise ContractError("target is not an item token")
    t = item_logits[np.arange(len(targets)), targets][:, None]
    higher = (item_logits > t).sum(axis=1)
    ids = np.arange(n)[None, :]
    tied_before = ((item_logits == t) & (ids < targets[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def rank_target(model: TransformerModel, tokens: Sequence[int], target: int, n_items: int) -> int:
    """Rank of ``target`` by the logit at the last prompt position."""
    if not 0 <= target < n_items:
        raise ContractError(f"target {target} is not an item token")
    logits = forward(model, list(tokens)).data[-1, :n_items]
    return int(ranks_from_logits(logits[None, :], np.array([target]))[0])


def _check_ranks(ranks, k) -> np.ndarray:
    r = np.asarray(ranks, dtype=np.int64)
    if r.size == 0:
        raise ContractError("ranks must be nonempty")
    if (r < 1).any():
        raise ContractError("ranks are 1-based")
    if k < 1:
        raise ContractError("k must be >= 1")
    return r


def hr_at_k(ranks, k: int) -> float:
    r = _check_ranks(ranks, k)
    return float((r <= k).mean())


def ndcg_at_k(ranks, k: int) -> float:
    r = _check_ranks(ranks, k)
    gains = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return float(gains.mean())


def item_logits_at(model: TransformerModel, prompts: list[list[int]], n_items: int,
                   batch_size: int = 512) -> np.ndarray:
    """Item logits at each prompt's final position, ``[N, n_items]``."""
    out = []
    for start in range(0, len(prompts), batch_size):
        ids, lengths = pad_batch(prompts[start : start + batch_size])
        logits = forward(model, ids).data
        out.append(logits[np.arange(len(lengths)), lengths - 1, :n_items])
    return np.concatenate(out, axis=0)


@dataclass
class EvalReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    ppl: float
    n_evaluated: int
    param_count_non_embedding: int
    split: str = "test"
    label: str = ""

    def to_text(self) -> str:
        lines = [f"split={self.split}"]
        if self.label:
            lines.insert(0, f"label={self.label}")
        for k in sorted(self.hr):
            lines.append(f"hr@{k}={self.hr[k]:.6f}")
            lines.append(f"ndcg@{k}={self.ndcg[k]:.6f}")
        lines += [f"ppl={self.ppl:.6f}", f"n_evaluated={self.n_evaluated}",
                  f"param_count_non_embedding={self.param_count_non_embedding}"]
        return "\n".join(lines) + "\n"

    def columns(self) -> list[str]:
        cols = ["label", "split"]
        for k in sorted(self.hr):
            cols += [f"hr@{k}", f"ndcg@{k}"]
        return cols + ["ppl", "n_evaluated", "param_count_non_embedding"]

    def row(self) -> list[str]:
        vals = [self.label or "-", self.split]
        for k in sorted(self.hr):
            vals += [f"{self.hr[k]:.6f}", f"{self.ndcg[k]:.6f}"]
        return vals + [f"{self.ppl:.6f}", str(self.n_evaluated), str(self.param_count_non_embedding)]

    def to_tsv(self, header: bool = True) -> str:
        rows = ([self.columns()] if header else []) + [self.row()]
        return "\n".join("\t".join(r) for r in rows) + "\n"


def evaluate(model: TransformerModel, dataset: RecDataset, split: str,
             k_list: Sequence[int] = (10, 20), perturb: float = 0.0, seed: int = 0,
             label: str = "", indices: Optional[np.ndarray] = None) -> EvalReport:
    """Rank every example of ``split`` over the full catalog.

    ``perturb > 0`` adds seeded uniform noise of that amplitude to the item
    logits before ranking, which breaks exact ties at random.
    """
    from .prune import param_count

    idx = dataset.split_indices(split) if indices is None else np.asarray(indices)
    if len(idx) == 0:
        raise ContractError(f"split {split!r} is empty")
    logits = item_logits_at(model, dataset.prompts(split, idx), dataset.n_items)
    if perturb > 0:
        logits = logits + np.random.default_rng(seed).uniform(-perturb, perturb, size=logits.shape)
    ranks = ranks_from_logits(logits, dataset.targets(split, idx))
    return EvalReport(
        hr={int(k): hr_at_k(ranks, k) for k in k_list},
        ndcg={int(k): ndcg_at_k(ranks, k) for k in k_list},
        ppl=perplexity(model, dataset.full_sequences(split, idx)),
        n_evaluated=int(len(idx)),
        param_count_non_embedding=param_count(model, include_embeddings=False),
        split=split,
        label=label,
    )


def hr_binomial_band(k: int, n_items: int, n: int, sigmas: float = 3.0) -> tuple[float, float]:
    p = k / n_items
    half = sigmas * math.sqrt(p * (1 - p) / n)
    return p - half, p + half
