"""Three-stage prune-and-restore orchestration.

base training -> stage 1 (heads + hidden dims) -> stage 2 (MLP dims)
-> stage 3 (layers) -> test evaluation, with a checkpoint, plan, importance
reports and a ledger row after every step.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import importance as imp
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig, derive_seed
from .diagnostics import observe, wanda_head_scores
from .distill import DistillConfig, TrainReport, restore, train_base
from .errors import ContractError
from .metrics import EvalReport, evaluate
from .model import ModelConfig, TransformerModel, init_model
from .prune import (PruningPlan, drop_layers, param_count, prune_heads, prune_hidden_dims,
                    prune_mlp_dims, random_plan)
from .recdata import (RecDataset, calibration_indices, generate, load_dataset, save_dataset)

log = logging.getLogger(__name__)

STAGES = ("stage1", "stage2", "stage3")
LEDGER_HEADER = ("stage", "param_count_non_embedding", "valid_hr@20", "valid_ndcg@20",
                 "pre_restore_hr@20", "pre_restore_ndcg@20", "n_layers", "d_model", "heads", "d_ff")
STRATEGIES = ("propagated_kl", "random", "wanda", "no_alpha", "global_importance")


@dataclass
class StageResult:
    name: str
    model: TransformerModel
    pruned: TransformerModel
    plan: PruningPlan
    pre_eval: Optional[EvalReport] = None
    post_eval: Optional[EvalReport] = None
    train: Optional[TrainReport] = None
    reports: dict = field(default_factory=dict)
    restored: bool = True


@dataclass
class PipelineResult:
    base: TransformerModel
    final: TransformerModel
    stages: list[StageResult]
    ledger: list[dict]
    base_valid: EvalReport
    base_test: EvalReport
    final_test: EvalReport
    wall_time: float = 0.0


# -- helpers --------------------------------------------------------------


def model_config_for(cfg: PipelineConfig, dataset: RecDataset) -> ModelConfig:
    """The configured geometry with vocab and context fitted to the data."""
    d = cfg.model.to_dict()
    d["vocab_size"] = dataset.vocab_size
    d["max_seq_len"] = max(cfg.model.max_seq_len, dataset.h_max + 2)
    return ModelConfig.from_dict(d)


def resolve_dataset(cfg: PipelineConfig) -> RecDataset:
    if cfg.run.data_path:
        return load_dataset(cfg.run.data_path)
    gen = replace(cfg.data, seed=derive_seed(cfg.run.seed, f"data:{cfg.data.seed}"))
    return generate(gen)


def _train_cfg(cfg: PipelineConfig, name: str) -> DistillConfig:
    dc: DistillConfig = getattr(cfg, name)
    return replace(dc, seed=derive_seed(cfg.run.seed, f"{name}:{dc.seed}"))


def _calibration(cfg: PipelineConfig, dataset: RecDataset, name: str):
    idx = calibration_indices(dataset, cfg.prune.calib_b, derive_seed(cfg.run.seed, f"calib:{name}"))
    return idx, dataset.prompts("train", idx), dataset.full_sequences("train", idx)


def _shape_summary(model: TransformerModel) -> dict:
    return {"n_layers": model.n_layers, "d_model": model.d_model,
            "heads": ",".join(str(h) for h in model.head_counts()),
            "d_ff": ",".join(str(w) for w in model.mlp_widths())}


def _finish_stage(name: str, student: TransformerModel, teacher: TransformerModel,
                  dataset: RecDataset, cfg: PipelineConfig, plan: PruningPlan,
                  reports: dict, out_dir, noop: bool) -> tuple[TransformerModel, StageResult]:
    """Evaluate, restore against the teacher, evaluate again, persist."""
    pruned = student.copy()
    k = cfg.k_list
    pre = evaluate(student, dataset, "valid", k, label=f"{name}-pre")
    train = None
    if noop:
        log.info("%s: nothing pruned, restoration skipped", name)
        post = replace(pre, label=name)
    else:
        train = restore(student, teacher, dataset, _train_cfg(cfg, name))
        post = evaluate(student, dataset, "valid", k, label=name)
    res = StageResult(name, student, pruned, plan, pre, post, train, reports, restored=not noop)
    if out_dir is not None:
        _persist_stage(res, cfg, out_dir)
    return student, res


def _persist_stage(res: StageResult, cfg: PipelineConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.plan.save(out / f"{res.name}.plan.tsv")
    for kind, (rows, meta) in res.reports.items():
        imp.write_report(out / f"{res.name}.{kind}.tsv", rows, meta)
    if res.train is not None:
        res.train.write_log(out / "train_log.tsv", label=res.name)
    lineage = {"seed": cfg.run.seed, "stage": res.name}
    save_checkpoint(res.model, out / f"{res.name}.ckpt", cfg.run.precision, res.name, lineage)
    (out / f"{res.name}.eval.txt").write_text(res.pre_eval.to_text() + "\n" + res.post_eval.to_text(),
                                              encoding="utf-8")


# -- stages ---------------------------------------------------------------


def run_stage1(model: TransformerModel, dataset: RecDataset, cfg: PipelineConfig,
               teacher: Optional[TransformerModel] = None, out_dir=None):
    """Head pruning by propagated KL importance, then hidden-dim pruning by
    embedding saliency, then restoration."""
    p = cfg.prune
    c = model.config
    heads = model.head_counts()
    if any(h != c.n_heads for h in heads) or model.d_model != c.n_heads * c.d_k:
        raise ContractError("stage 1 expects a model unpruned at head level")
    if not 0 <= p.k_attn < c.n_heads:
        raise ContractError(f"k_attn={p.k_attn} must lie in [0, {c.n_heads})")
    hidden_keep = p.hidden_keep if p.hidden_keep is not None else c.d_k * (c.n_heads - p.k_attn)
    if not 1 <= hidden_keep <= model.d_model:
        raise ContractError(f"hidden_keep={hidden_keep} outside [1, {model.d_model}]")
    teacher = teacher if teacher is not None else model

    idx, prompts, seqs = _calibration(cfg, dataset, "stage1")
    meta = {"stage": "stage1", "calib_b": len(idx), "calib_seed": derive_seed(cfg.run.seed, "calib:stage1"),
            "alpha": p.alpha, "k_attn": p.k_attn, "hidden_keep": hidden_keep}
    reports = {}
    out = model.copy()
    head_plan: dict[int, list[int]] = {l: [] for l in range(model.n_layers)}
    if p.k_attn > 0:
        hi = imp.head_importance(out, prompts, p.alpha, raw_recursion=p.raw_recursion)
        head_plan = imp.select_heads(hi, p.k_attn)
        rows = imp.report_rows("head_raw", hi.raw) + imp.report_rows("head_score", hi.scores)
        reports["heads"] = (rows, meta)
        out = prune_heads(out, PruningPlan(heads_to_prune=head_plan))
    keep = None
    if hidden_keep < model.d_model:
        out.set_requires_grad(True)
        di = imp.embedding_dim_importance(out, seqs)
        keep = imp.select_hidden_dims(di, hidden_keep)
        reports["hidden"] = (imp.report_rows("hidden", [di.scores]), meta)
        out = prune_hidden_dims(out, keep)
    plan = PruningPlan(heads_to_prune=head_plan, hidden_dims_to_keep=keep,
                       provenance={k: str(v) for k, v in meta.items()})
    return _finish_stage("stage1", out, teacher, dataset, cfg, plan, reports, out_dir,
                         noop=p.k_attn == 0 and keep is None)


def run_stage2(model: TransformerModel, dataset: RecDataset, cfg: PipelineConfig,
               teacher: Optional[TransformerModel] = None, out_dir=None):
    """MLP intermediate-dim pruning by activation frequency, then restoration."""
    p = cfg.prune
    k_mlp = p.k_mlp if p.k_mlp is not None else 2 * model.d_model
    widths = model.mlp_widths()
    if not 1 <= k_mlp <= min(widths):
        raise ContractError(f"k_mlp={k_mlp} outside [1, {min(widths)}] (current d_ff)")
    teacher = teacher if teacher is not None else model
    idx, prompts, _ = _calibration(cfg, dataset, "stage2")
    tau = p.tau if p.tau == "auto" else float(p.tau)
    stats = imp.mlp_dim_stats(model, prompts, tau)
    keep = imp.select_mlp_dims(stats, k_mlp)
    meta = {"stage": "stage2", "calib_b": len(idx), "calib_seed": derive_seed(cfg.run.seed, "calib:stage2"),
            "k_mlp": k_mlp, "tau": ",".join(f"{t:.10g}" for t in stats.tau)}
    reports = {"mlp": (imp.report_rows("mlp_count", stats.counts), meta)}
    noop = all(k_mlp == w for w in widths)
    out = model.copy() if noop else prune_mlp_dims(model, keep)
    plan = PruningPlan(mlp_dims_to_keep=keep, provenance={k: str(v) for k, v in meta.items()})
    return _finish_stage("stage2", out, teacher, dataset, cfg, plan, reports, out_dir, noop=noop)


def run_stage3(model: TransformerModel, dataset: RecDataset, cfg: PipelineConfig,
               teacher: Optional[TransformerModel] = None, out_dir=None):
    """Greedy layer removal by perplexity increase, then restoration."""
    p = cfg.prune
    if not 1 <= p.k_layer <= model.n_layers:
        raise ContractError(f"k_layer={p.k_layer} outside [1, {model.n_layers}] (current layers)")
    teacher = teacher if teacher is not None else model
    idx, _, seqs = _calibration(cfg, dataset, "stage3")
    order, history = imp.select_layers(model, seqs, p.k_layer, recompute=p.layer_recompute)
    meta = {"stage": "stage3", "calib_b": len(idx), "calib_seed": derive_seed(cfg.run.seed, "calib:stage3"),
            "k_layer": p.k_layer, "recompute": p.layer_recompute,
            "removal_order": ",".join(str(l) for l in order)}
    rows = []
    for step, h in enumerate(history):
        rows += [(f"delta_ppl_step{step}", l, l, float(d)) for l, d in zip(h.layers, h.delta_ppl)]
    reports = {"layers": (rows, meta)}
    out = drop_layers(model, order)
    plan = PruningPlan(layers_to_remove=list(order), provenance={k: str(v) for k, v in meta.items()})
    return _finish_stage("stage3", out, teacher, dataset, cfg, plan, reports, out_dir, noop=not order)


STAGE_FUNCS = {"stage1": run_stage1, "stage2": run_stage2, "stage3": run_stage3}


# -- full run -------------------------------------------------------------


def ledger_row(stage: str, model: TransformerModel, post: EvalReport,
               pre: Optional[EvalReport] = None) -> dict:
    row = {"stage": stage, "param_count_non_embedding": param_count(model, include_embeddings=False),
           "valid_hr@20": post.hr[20], "valid_ndcg@20": post.ndcg[20],
           "pre_restore_hr@20": (pre or post).hr[20], "pre_restore_ndcg@20": (pre or post).ndcg[20]}
    row.update(_shape_summary(model))
    return row


def write_ledger(path, rows: Sequence[dict]) -> None:
    lines = ["\t".join(LEDGER_HEADER)]
    for r in rows:
        vals = []
        for k in LEDGER_HEADER:
            v = r[k]
            vals.append(f"{v:.6f}" if isinstance(v, float) else str(v))
        lines.append("\t".join(vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_ledger(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        row = dict(zip(head, line.split("\t")))
        for k in ("param_count_non_embedding", "n_layers", "d_model"):
            row[k] = int(row[k])
        for k in ("valid_hr@20", "valid_ndcg@20", "pre_restore_hr@20", "pre_restore_ndcg@20"):
            row[k] = float(row[k])
        out.append(row)
    return out


def prepare_base(cfg: PipelineConfig, dataset: RecDataset, out_dir=None,
                 base: Optional[TransformerModel] = None) -> TransformerModel:
    """Initialize and fine-tune the base model (unless one is supplied)."""
    if base is not None:
        return base
    model = init_model(model_config_for(cfg, dataset), derive_seed(cfg.run.seed, "init"))
    report = train_base(model, dataset, _train_cfg(cfg, "base"))
    if out_dir is not None:
        report.write_log(Path(out_dir) / "train_log.tsv", label="base")
    return model


def _truncate_log(path: Path, keep: set) -> None:
    """Drop training-log rows of stages that are about to be re-run."""
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = [l for l in lines[1:] if l.split("\t", 1)[0] in keep]
    if kept:
        path.write_text(lines[0] + "".join(kept), encoding="utf-8")
    else:
        path.unlink()


def run_pipeline(cfg: PipelineConfig, out_dir=None, dataset: Optional[RecDataset] = None,
                 base: Optional[TransformerModel] = None, start_stage: str = "stage1") -> PipelineResult:
    """Run the stages from ``start_stage`` on; ``base`` is the model entering
    that stage (trained from scratch when omitted and starting at stage 1)."""
    cfg.validate()
    t0 = time.perf_counter()
    out = Path(out_dir if out_dir is not None else cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # paths inside a run are relative to the run directory
    replace(cfg, run=replace(cfg.run, out_dir=".")).save(out / "config.txt")
    if dataset is None:
        dataset = resolve_dataset(cfg)
    save_dataset(dataset, out / "data.tsv")
    k = cfg.k_list
    if start_stage not in STAGES:
        raise ContractError(f"unknown stage {start_stage!r}")
    if start_stage != "stage1" and base is None:
        raise ContractError("resuming after stage 1 needs the entering model")

    done = STAGES[: STAGES.index(start_stage)]
    _truncate_log(out / "train_log.tsv", set() if base is None else {"base", *done})
    model = prepare_base(cfg, dataset, out, base)
    original = model
    if start_stage == "stage1":
        save_checkpoint(model, out / "base.ckpt", cfg.run.precision, "base", {"seed": cfg.run.seed})
        obs = observe(model, dataset, min(cfg.run.observe_b, len(dataset.split_indices("train"))),
                      seed=derive_seed(cfg.run.seed, "observe"), position=cfg.run.observe_position)
        obs.save(out / "concentration.tsv")
    elif (out / "base.ckpt").exists():
        original = load_checkpoint(out / "base.ckpt")
    base_valid = evaluate(original, dataset, "valid", k, label="base")
    base_test = evaluate(original, dataset, "test", k, label="base")
    ledger = [ledger_row("base", original, base_valid)]
    if start_stage != "stage1":
        prior = read_ledger(out / "ledger.tsv") if (out / "ledger.tsv").exists() else []
        ledger = [r for r in prior if r["stage"] == "base" or r["stage"] in done]
        if [r["stage"] for r in ledger] != ["base", *done]:
            raise ContractError(f"cannot resume at {start_stage}: ledger lacks earlier rows")
    results = []
    for name in STAGES[STAGES.index(start_stage):]:
        teacher = original if cfg.run.teacher == "original" else model
        log.info("running %s", name)
        model, res = STAGE_FUNCS[name](model, dataset, cfg, teacher=teacher, out_dir=out)
        results.append(res)
        ledger.append(ledger_row(name, model, res.post_eval, res.pre_eval))
        write_ledger(out / "ledger.tsv", ledger)
    final_test = evaluate(model, dataset, "test", k, label="final")
    (out / "final_eval.txt").write_text(final_test.to_text(), encoding="utf-8")
    (out / "final_eval.tsv").write_text(base_test.to_tsv() + final_test.to_tsv(header=False),
                                        encoding="utf-8")
    result = PipelineResult(original, model, results, ledger, base_valid, base_test, final_test,
                            time.perf_counter() - t0)
    if cfg.run.figures:
        from .plotting import render_run
        render_run(out)
    return result


def resume_pipeline(cfg: PipelineConfig, out_dir, start_stage: str) -> PipelineResult:
    """Re-run from the checkpoint written just before ``start_stage``."""
    out = Path(out_dir)
    prev = "base" if start_stage == "stage1" else STAGES[STAGES.index(start_stage) - 1]
    dataset = load_dataset(out / "data.tsv")
    model = load_checkpoint(out / f"{prev}.ckpt")
    return run_pipeline(cfg, out, dataset=dataset, base=model, start_stage=start_stage)


# -- strategy comparison --------------------------------------------------


def strategy_head_plan(strategy: str, model: TransformerModel, prompts, k_attn: int, alpha: float,
                       seed: int, raw: Optional[list[np.ndarray]] = None) -> dict[int, list[int]]:
    """Heads to prune per layer under a named selection strategy."""
    if strategy == "random":
        return random_plan(model, k_attn, seed).heads_to_prune
    if strategy == "wanda":
        return imp.select_heads(wanda_head_scores(model, prompts), k_attn)
    if raw is None:
        raw = imp.head_importance_raw(model, prompts)
    if strategy == "propagated_kl":
        return imp.select_heads(imp.propagate_importance(imp.minmax_normalize_rows(raw), alpha), k_attn)
    if strategy == "no_alpha":
        return imp.select_heads(imp.propagate_importance(imp.minmax_normalize_rows(raw), 0.0), k_attn)
    if strategy == "global_importance":
        return imp.select_heads(imp.global_head_scores(raw), k_attn)
    raise ContractError(f"unknown strategy {strategy!r}")


COMPARE_HEADER = ("strategy", "seed", "hr@20", "ndcg@20", "pre_restore_hr@20", "heads_pruned")


def compare_baselines(cfg: PipelineConfig, strategies: Sequence[str] = STRATEGIES,
                      seeds: Sequence[int] = (0, 1, 2, 3, 4), out_dir=None,
                      bases: Optional[dict] = None, split: str = "test") -> list[dict]:
    """Stage-1 head pruning under each strategy at equal ``k_attn``, restored
    identically and scored on ``split``.  Returns per-seed rows followed by
    one median row per strategy."""
    if len(seeds) < 3:
        raise ContractError("compare_baselines needs at least 3 seeds")
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad:
        raise ContractError(f"unknown strategy {bad[0]!r}")
    rows = []
    for seed in seeds:
        scfg = replace(cfg, run=replace(cfg.run, seed=seed))
        dataset, base = (bases or {}).get(seed, (None, None))
        dataset = dataset or resolve_dataset(scfg)
        base = prepare_base(scfg, dataset, base=base)
        _, prompts, _ = _calibration(scfg, dataset, "stage1")
        raw = imp.head_importance_raw(base, prompts)
        k_attn = scfg.prune.k_attn
        for strat in strategies:
            plan = strategy_head_plan(strat, base, prompts, k_attn, scfg.prune.alpha,
                                      derive_seed(seed, "random-heads"), raw)
            if any(len(h) != k_attn for h in plan.values()):
                raise ContractError(f"{strat} did not prune exactly {k_attn} heads per layer")
            student = prune_heads(base, PruningPlan(heads_to_prune=plan))
            pre = evaluate(student, dataset, split, (20,))
            restore(student, base, dataset, _train_cfg(scfg, "stage1"))
            post = evaluate(student, dataset, split, (20,))
            rows.append({"strategy": strat, "seed": str(seed), "hr@20": post.hr[20],
                         "ndcg@20": post.ndcg[20], "pre_restore_hr@20": pre.hr[20],
                         "heads_pruned": ";".join(f"{l}:{','.join(map(str, h))}"
                                                  for l, h in sorted(plan.items()))})
            log.info("compare seed=%s %s hr@20=%.4f", seed, strat, post.hr[20])
    for strat in strategies:
        mine = [r for r in rows if r["strategy"] == strat]
        rows.append({"strategy": strat, "seed": "median",
                     "hr@20": float(np.median([r["hr@20"] for r in mine])),
                     "ndcg@20": float(np.median([r["ndcg@20"] for r in mine])),
                     "pre_restore_hr@20": float(np.median([r["pre_restore_hr@20"] for r in mine])),
                     "heads_pruned": "-"})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_comparison(Path(out_dir) / "compare.tsv", rows)
    return rows


def write_comparison(path, rows: Sequence[dict]) -> None:
    lines = ["\t".join(COMPARE_HEADER)]
    for r in rows:
        lines.append("\t".join(f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k])
                               for k in COMPARE_HEADER))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_comparison(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        r = dict(zip(head, line.split("\t")))
        for k in ("hr@20", "ndcg@20", "pre_restore_hr@20"):
            r[k] = float(r[k])
        out.append(r)
    return out


def medians(rows: Sequence[dict]) -> dict[str, float]:
    return {r["strategy"]: r["hr@20"] for r in rows if r["seed"] == "median"}
