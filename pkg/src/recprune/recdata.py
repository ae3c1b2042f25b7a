"""Synthetic next-item corpus: clustered Markov walks over a catalog.

Each user walks a Markov chain over items.  With probability
``within_cluster_prob`` the next item is drawn from the current item's
own successor distribution inside its cluster, otherwise uniformly from
the whole catalog.  Every step of every walk yields one
``(history, target)`` example whose history is the preceding
``h_max`` items at most.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ContractError, FormatError

SPLITS = ("train", "valid", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)


@dataclass
class GeneratorConfig:
    n_items: int = 500
    n_users: int = 300
    n_clusters: int = 20
    within_cluster_prob: float = 0.9
    h_max: int = 10
    steps_per_user: int = 50
    # Dirichlet concentration of each item's within-cluster successor
    # distribution; 0 means uniform within the cluster.
    successor_concentration: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_items", "n_users", "n_clusters", "h_max", "steps_per_user"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"data.{name} must be >= 1")
        if self.n_clusters > self.n_items:
            raise ContractError(
                f"n_clusters ({self.n_clusters}) exceeds n_items ({self.n_items})"
            )
        if not 0.0 < self.within_cluster_prob <= 1.0:
            raise ContractError("within_cluster_prob must lie in (0, 1]")
        if self.successor_concentration < 0:
            raise ContractError("successor_concentration must be >= 0")


@dataclass(frozen=True)
class Example:
    history: tuple[int, ...]
    target: int
    timestamp: int


@dataclass
class RecDataset:
    n_items: int
    examples: list[Example]
    splits: dict[str, np.ndarray]
    h_max: int
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    seed: Optional[int] = None
    generator: Optional[GeneratorConfig] = None

    # token layout: items occupy ids [0, n_items), then the specials
    @property
    def bos(self) -> int:
        return self.n_items

    @property
    def sep(self) -> int:
        return self.n_items + 1

    @property
    def pad(self) -> int:
        return self.n_items + 2

    @property
    def vocab_size(self) -> int:
        return self.n_items + 3

    @property
    def max_prompt_len(self) -> int:
        return self.h_max + 2

    def item_token(self, item: int) -> int:
        return int(item)

    def token_item(self, token: int) -> int:
        if not 0 <= token < self.n_items:
            raise ContractError(f"token {token} is not an item token")
        return int(token)

    def __len__(self) -> int:
        return len(self.examples)

    def split_indices(self, split: str) -> np.ndarray:
        if split not in self.splits:
            raise ContractError(f"unknown split {split!r}")
        return self.splits[split]

    def full_sequences(self, split: str, indices=None) -> list[list[int]]:
        idx = self.split_indices(split) if indices is None else indices
        return [full_sequence(self, int(i)) for i in idx]

    def prompts(self, split: str, indices=None) -> list[list[int]]:
        idx = self.split_indices(split) if indices is None else indices
        return [encode(self, int(i))[0] for i in idx]

    def targets(self, split: str, indices=None) -> np.ndarray:
        idx = self.split_indices(split) if indices is None else indices
        return np.array([self.examples[int(i)].target for i in idx], dtype=np.int64)


def _cluster_assignment(cfg: GeneratorConfig, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(cfg.n_items)
    return [np.sort(c) for c in np.array_split(perm, cfg.n_clusters)]


def generate(cfg: GeneratorConfig) -> RecDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    clusters = _cluster_assignment(cfg, rng)
    cluster_of = np.empty(cfg.n_items, dtype=np.int64)
    for c, members in enumerate(clusters):
        cluster_of[members] = c
    successors = []
    for item in range(cfg.n_items):
        members = clusters[cluster_of[item]]
        if cfg.successor_concentration > 0 and len(members) > 1:
            probs = rng.dirichlet(np.full(len(members), cfg.successor_concentration))
        else:
            probs = np.full(len(members), 1.0 / len(members))
        successors.append((members, probs))

    walks = np.empty((cfg.n_users, cfg.steps_per_user + 1), dtype=np.int64)
    for u in range(cfg.n_users):
        cur = int(rng.integers(cfg.n_items))
        walks[u, 0] = cur
        for t in range(1, cfg.steps_per_user + 1):
            if rng.random() < cfg.within_cluster_prob:
                members, probs = successors[cur]
                cur = int(members[rng.choice(len(members), p=probs)])
            else:
                cur = int(rng.integers(cfg.n_items))
            walks[u, t] = cur

    # interleave users so that a timestamp cut is a cut in walk time
    raw = []
    for t in range(1, cfg.steps_per_user + 1):
        for u in range(cfg.n_users):
            hist = tuple(int(i) for i in walks[u, max(0, t - cfg.h_max) : t])
            raw.append(Example(hist, int(walks[u, t]), t * cfg.n_users + u))

    seen: set = set()
    examples = []
    for ex in raw:
        key = (ex.history, ex.target)
        if key not in seen:
            seen.add(key)
            examples.append(ex)
    return RecDataset(
        n_items=cfg.n_items,
        examples=examples,
        splits=chronological_split(examples, DEFAULT_RATIOS),
        h_max=cfg.h_max,
        ratios=DEFAULT_RATIOS,
        seed=cfg.seed,
        generator=cfg,
    )


def chronological_split(examples: list[Example], ratios) -> dict[str, np.ndarray]:
    n = len(examples)
    order = np.array(sorted(range(n), key=lambda i: (examples[i].timestamp, i)), dtype=np.int64)
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    return {
        "train": order[:n_train],
        "valid": order[n_train : n_train + n_valid],
        "test": order[n_train + n_valid :],
    }


def encode(dataset: RecDataset, index: int) -> tuple[list[int], list[int]]:
    """Prompt tokens ``[BOS, items..., SEP]`` and the position whose next
    token is the target (the SEP position)."""
    if not 0 <= index < len(dataset.examples):
        raise IndexError(f"sequence index {index} out of range")
    ex = dataset.examples[index]
    tokens = [dataset.bos, *(dataset.item_token(i) for i in ex.history), dataset.sep]
    return tokens, [len(tokens) - 1]


def full_sequence(dataset: RecDataset, index: int) -> list[int]:
    tokens, _ = encode(dataset, index)
    return tokens + [dataset.item_token(dataset.examples[index].target)]


def decode(dataset: RecDataset, tokens) -> list[int]:
    """Item ids of a prompt, dropping special tokens."""
    return [dataset.token_item(t) for t in tokens if t < dataset.n_items]


@dataclass
class Batch:
    inputs: np.ndarray  # [B, S] prompt+history tokens, right padded
    labels: np.ndarray  # [B, S] next-token labels
    loss_mask: np.ndarray  # [B, S] 1.0 on real next-token positions
    target_pos: np.ndarray  # [B] index of SEP in ``inputs``
    targets: np.ndarray  # [B] target item token
    indices: np.ndarray  # [B] dataset example indices


def make_batch(dataset: RecDataset, indices) -> Batch:
    indices = np.asarray(indices, dtype=np.int64)
    seqs = [full_sequence(dataset, int(i)) for i in indices]
    width = max(len(s) for s in seqs) - 1
    inputs = np.full((len(seqs), width), dataset.pad, dtype=np.int64)
    labels = np.full((len(seqs), width), dataset.pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for r, s in enumerate(seqs):
        n = len(s) - 1
        inputs[r, :n] = s[:-1]
        labels[r, :n] = s[1:]
        mask[r, :n] = 1.0
    target_pos = np.array([len(s) - 2 for s in seqs], dtype=np.int64)
    targets = np.array([s[-1] for s in seqs], dtype=np.int64)
    return Batch(inputs, labels, mask, target_pos, targets, indices)


def batches(dataset: RecDataset, split: str, batch_size: int, seed: int = 0) -> Iterator[Batch]:
    """Shuffled (train) or in-order (valid/test) padded batches."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    idx = dataset.split_indices(split)
    if len(idx) == 0:
        raise ContractError(f"split {split!r} is empty")
    if split == "train":
        idx = idx[np.random.default_rng(seed).permutation(len(idx))]
    for start in range(0, len(idx), batch_size):
        yield make_batch(dataset, idx[start : start + batch_size])


def n_batches(dataset: RecDataset, split: str, batch_size: int) -> int:
    return math.ceil(len(dataset.split_indices(split)) / batch_size)


def calibration_indices(dataset: RecDataset, b: int, seed: int) -> np.ndarray:
    """``b`` distinct training examples drawn seeded-uniformly."""
    train = dataset.split_indices("train")
    if b < 1:
        raise ContractError("calibration size must be >= 1")
    if b > len(train):
        raise ContractError(f"calibration size {b} exceeds train split ({len(train)})")
    return np.sort(train[np.random.default_rng(seed).choice(len(train), size=b, replace=False)])


# -- persistence ----------------------------------------------------------


def save_dataset(dataset: RecDataset, path) -> None:
    lines = ["# recprune-dataset v1", f"# n_items={dataset.n_items}", f"# h_max={dataset.h_max}",
             "# ratios=" + ",".join(repr(float(r)) for r in dataset.ratios),
             f"# seed={dataset.seed}"]
    if dataset.generator is not None:
        for k, v in asdict(dataset.generator).items():
            lines.append(f"# generator.{k}={v}")
    for ex in dataset.examples:
        lines.append(f"{ex.timestamp}\t{','.join(str(i) for i in ex.history)}\t{ex.target}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> RecDataset:
    header: dict[str, str] = {}
    examples = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        if line.startswith("#"):
            if "=" in line:
                k, v = line[1:].strip().split("=", 1)
                header[k.strip()] = v.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            hist = tuple(int(x) for x in parts[1].split(",")) if parts[1] else ()
            examples.append(Example(hist, int(parts[2]), int(parts[0])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    try:
        n_items = int(header["n_items"])
        h_max = int(header["h_max"])
        ratios = tuple(float(r) for r in header["ratios"].split(","))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: missing or bad header field {exc}") from None
    seed = None if header.get("seed") in (None, "None") else int(header["seed"])
    gen = None
    gen_keys = {k.split(".", 1)[1]: v for k, v in header.items() if k.startswith("generator.")}
    if gen_keys:
        types = {f.name: f.type for f in fields(GeneratorConfig)}
        conv = {}
        for k, v in gen_keys.items():
            if k in types:
                conv[k] = float(v) if types[k] in ("float", float) else int(v)
        gen = GeneratorConfig(**conv)
    for ex in examples:
        if not 1 <= len(ex.history) <= h_max:
            raise FormatError(f"{path}: history length {len(ex.history)} outside [1, {h_max}]")
        if not all(0 <= i < n_items for i in (*ex.history, ex.target)):
            raise FormatError(f"{path}: item id outside [0, {n_items})")
    return RecDataset(n_items=n_items, examples=examples,
                      splits=chronological_split(examples, ratios), h_max=h_max,
                      ratios=ratios, seed=seed, generator=gen)
