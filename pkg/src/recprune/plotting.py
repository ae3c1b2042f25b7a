"""Figures rendered from a run directory's text artifacts.

Everything here reads the line-oriented files a run leaves behind, so a
report can be regenerated long after the models are gone.
"""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def _figure(width: float = 6.0, ncols: int = 1):
    fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, width * GOLDEN), squeeze=False)
    for ax in axes.ravel():
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return fig, axes.ravel()


def _save(fig, path) -> Path:
    fig.tight_layout()
    # fixed metadata keeps the output byte-stable across runs
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_ledger(rows, path) -> Path:
    """Parameter count and valid HR@20/NDCG@20 across stages."""
    stages = [r["stage"] for r in rows]
    x = range(len(rows))
    fig, (ax,) = _figure()
    ax.plot(x, [r["valid_hr@20"] for r in rows], "o-", label="HR@20")
    ax.plot(x, [r["valid_ndcg@20"] for r in rows], "s-", label="NDCG@20")
    ax.plot(x, [r["pre_restore_hr@20"] for r in rows], "o:", color="0.5", label="HR@20 before restore")
    ax.set_xticks(list(x))
    ax.set_xticklabels(stages)
    ax.set_ylabel("validation metric")
    ax.set_ylim(0, 1)
    twin = ax.twinx()
    twin.bar(list(x), [r["param_count_non_embedding"] for r in rows], alpha=0.15, color="k")
    twin.set_ylabel("non-embedding parameters")
    ax.set_zorder(twin.get_zorder() + 1)
    ax.patch.set_visible(False)
    ax.legend(frameon=False, loc="lower left")
    return _save(fig, path)


def read_concentration(path) -> dict:
    out: dict = defaultdict(lambda: defaultdict(dict))
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line.startswith("layer\t"):
            continue
        layer, site, k, ratio = line.split("\t")
        out[site][int(layer)][float(k)] = float(ratio)
    return out


def plot_concentration(path_in, path) -> Path:
    """Top-k% mass share per layer for each probed site."""
    data = read_concentration(path_in)
    fig, axes = _figure(width=4.5, ncols=max(len(data), 1))
    for ax, (site, layers) in zip(axes, sorted(data.items())):
        for layer, curve in sorted(layers.items()):
            ks = sorted(curve)
            ax.plot(ks, [curve[k] for k in ks], marker=".", label=f"layer {layer}")
        ax.plot([0, 100], [0, 1], "k--", lw=0.8, label="uniform")
        ax.set_title(site)
        ax.set_xlabel("top k% of dimensions")
        ax.set_ylabel("share of |activation| mass")
    axes[0].legend(frameon=False, fontsize=7)
    return _save(fig, path)


def plot_comparison(rows, path) -> Path:
    """Per-strategy HR@20: seed scatter plus the median bar."""
    med = {r["strategy"]: r["hr@20"] for r in rows if r["seed"] == "median"}
    names = list(med)
    fig, (ax,) = _figure()
    ax.bar(range(len(names)), [med[n] for n in names], color="0.8")
    for i, n in enumerate(names):
        vals = [r["hr@20"] for r in rows if r["strategy"] == n and r["seed"] != "median"]
        ax.plot([i] * len(vals), vals, "k.", alpha=0.7)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20)
    ax.set_ylabel("HR@20 after restoration")
    return _save(fig, path)


def read_train_log(path) -> dict[str, list[tuple[int, float, float, float]]]:
    runs: dict = defaultdict(list)
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        label, step, loss, kl, ce = line.split("\t")
        runs[label].append((int(step), float(loss), float(kl), float(ce)))
    return runs


def plot_losses(path_in, path, smooth: int = 20) -> Path:
    runs = read_train_log(path_in)
    fig, (ax,) = _figure()
    for label, steps in runs.items():
        losses = [s[1] for s in steps]
        w = max(1, min(smooth, len(losses)))
        avg = [sum(losses[max(0, i - w + 1): i + 1]) / len(losses[max(0, i - w + 1): i + 1])
               for i in range(len(losses))]
        ax.plot([s[0] for s in steps], avg, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(f"training loss ({smooth}-step mean)")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, path)


def render_run(out_dir) -> list[Path]:
    """Render every figure whose source file exists in ``out_dir``."""
    from .pipeline import read_comparison, read_ledger

    out = Path(out_dir)
    made = []
    if (out / "ledger.tsv").exists():
        made.append(plot_ledger(read_ledger(out / "ledger.tsv"), out / "ledger.png"))
    if (out / "concentration.tsv").exists():
        made.append(plot_concentration(out / "concentration.tsv", out / "concentration.png"))
    if (out / "compare.tsv").exists():
        made.append(plot_comparison(read_comparison(out / "compare.tsv"), out / "compare.png"))
    if (out / "train_log.tsv").exists():
        made.append(plot_losses(out / "train_log.tsv", out / "losses.png"))
    return made
