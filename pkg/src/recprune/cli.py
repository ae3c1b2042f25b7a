"""Command-line entry point: ``recprune <subcommand> [options]``.

Exit codes: 0 success, 1 contract or plan violation, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ContractError, FormatError, TokenIndexError

log = logging.getLogger("recprune")


def _load_cfg(args):
    from .config import PipelineConfig, apply_overrides, load_config

    config = getattr(args, "config", None)
    cfg = load_config(config) if config else PipelineConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise FormatError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = apply_overrides(cfg, overrides)
    if getattr(args, "seed", None) is not None:
        cfg.run = replace(cfg.run, seed=args.seed)
    if getattr(args, "out_dir", None) is not None:
        cfg.run = replace(cfg.run, out_dir=args.out_dir)
    cfg.validate()
    return cfg


def _out_dir(cfg) -> Path:
    p = Path(cfg.run.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dataset(cfg, out: Path):
    from .pipeline import resolve_dataset
    from .recdata import load_dataset, save_dataset

    if cfg.run.data_path:
        return load_dataset(cfg.run.data_path)
    if (out / "data.tsv").exists():
        return load_dataset(out / "data.tsv")
    ds = resolve_dataset(cfg)
    save_dataset(ds, out / "data.tsv")
    return ds


def _checkpoint_in(args, out: Path, default: str) -> Path:
    return Path(args.checkpoint) if args.checkpoint else out / default


# -- subcommands ----------------------------------------------------------


def cmd_gen_data(args, cfg) -> int:
    from .pipeline import resolve_dataset
    from .recdata import save_dataset

    out = _out_dir(cfg)
    ds = resolve_dataset(cfg)
    save_dataset(ds, out / "data.tsv")
    print("split\tn")
    for s in ("train", "valid", "test"):
        print(f"{s}\t{len(ds.split_indices(s))}")
    return 0


def cmd_train_base(args, cfg) -> int:
    from .checkpoint import save_checkpoint
    from .metrics import evaluate
    from .pipeline import prepare_base

    out = _out_dir(cfg)
    ds = _dataset(cfg, out)
    model = prepare_base(cfg, ds, out)
    save_checkpoint(model, out / "base.ckpt", cfg.run.precision, "base", {"seed": cfg.run.seed})
    print(evaluate(model, ds, "valid", cfg.k_list, label="base").to_tsv(), end="")
    return 0


def cmd_observe(args, cfg) -> int:
    from .checkpoint import load_checkpoint
    from .config import derive_seed
    from .diagnostics import observe

    out = _out_dir(cfg)
    ds = _dataset(cfg, out)
    model = load_checkpoint(_checkpoint_in(args, out, "base.ckpt"))
    rep = observe(model, ds, cfg.run.observe_b, seed=derive_seed(cfg.run.seed, "observe"),
                  position=cfg.run.observe_position)
    rep.save(out / "concentration.tsv")
    print(rep.to_tsv(), end="")
    return 0


def cmd_stage(args, cfg) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .distill import restore
    from .metrics import evaluate
    from .pipeline import STAGE_FUNCS, STAGES, _train_cfg
    from .prune import PruningPlan, apply_plan

    name = args.command
    out = _out_dir(cfg)
    ds = _dataset(cfg, out)
    prev = "base" if name == "stage1" else STAGES[STAGES.index(name) - 1]
    model = load_checkpoint(_checkpoint_in(args, out, f"{prev}.ckpt"))
    teacher = load_checkpoint(args.teacher) if args.teacher else model
    if args.plan:
        # replay recorded surgery instead of re-scoring
        plan = PruningPlan.load(args.plan)
        student = apply_plan(model, plan)
        pre = evaluate(student, ds, "valid", cfg.k_list, label=f"{name}-pre")
        if not args.no_restore:
            restore(student, teacher, ds, _train_cfg(cfg, name))
        post = evaluate(student, ds, "valid", cfg.k_list, label=name)
        save_checkpoint(student, out / f"{name}.ckpt", cfg.run.precision, name,
                        {"seed": cfg.run.seed, "plan": str(args.plan)})
        print(pre.to_tsv() + post.to_tsv(header=False), end="")
        return 0
    _, res = STAGE_FUNCS[name](model, ds, cfg, teacher=teacher, out_dir=out)
    print(res.pre_eval.to_tsv() + res.post_eval.to_tsv(header=False), end="")
    return 0


def cmd_eval(args, cfg) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import evaluate

    out = _out_dir(cfg)
    ds = _dataset(cfg, out)
    model = load_checkpoint(_checkpoint_in(args, out, "stage3.ckpt"))
    rep = evaluate(model, ds, args.split, cfg.k_list, label=Path(_checkpoint_in(args, out, "stage3.ckpt")).stem)
    print(rep.to_text() if args.format == "text" else rep.to_tsv(), end="")
    return 0


def cmd_pipeline(args, cfg) -> int:
    from .pipeline import resume_pipeline, run_pipeline

    out = _out_dir(cfg)
    if args.from_stage and args.from_stage != "stage1":
        res = resume_pipeline(cfg, out, args.from_stage)
    else:
        ds = _dataset(cfg, out) if cfg.run.data_path or (out / "data.tsv").exists() else None
        res = run_pipeline(cfg, out, dataset=ds)
    print((out / "ledger.tsv").read_text(encoding="utf-8"), end="")
    print(res.final_test.to_tsv(), end="")
    log.info("pipeline finished in %.1f s", res.wall_time)
    return 0


def cmd_compare(args, cfg) -> int:
    from .pipeline import compare_baselines

    out = _out_dir(cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    strategies = args.strategies.split(",")
    compare_baselines(cfg, strategies, seeds, out_dir=out)
    print((out / "compare.tsv").read_text(encoding="utf-8"), end="")
    if cfg.run.figures:
        from .plotting import plot_comparison
        from .pipeline import read_comparison
        plot_comparison(read_comparison(out / "compare.tsv"), out / "compare.png")
    return 0


def cmd_inspect(args, cfg) -> int:
    from .checkpoint import inspect_checkpoint

    header = inspect_checkpoint(args.path)
    if args.format == "json":
        print(json.dumps(header, indent=1, sort_keys=True))
        return 0
    print("name\tdtype\tshape\toffset\tnbytes")
    for e in header["tensors"]:
        print(f"{e['name']}\t{e['dtype']}\t{'x'.join(map(str, e['shape']))}\t{e['offset']}\t{e['nbytes']}")
    print(f"# stage={header.get('stage')} lineage={json.dumps(header.get('lineage'), sort_keys=True)}")
    return 0


def cmd_report(args, cfg) -> int:
    from .plotting import render_run

    out = Path(cfg.run.out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"no run directory at {out}")
    for name in ("ledger.tsv", "final_eval.tsv", "compare.tsv"):
        p = out / name
        if p.exists():
            print(f"# {name}")
            print(p.read_text(encoding="utf-8"), end="")
    for fig in render_run(out):
        print(f"# figure\t{fig}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "observe": cmd_observe,
    "stage1": cmd_stage,
    "stage2": cmd_stage,
    "stage3": cmd_stage,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "compare-baselines": cmd_compare,
    "inspect-checkpoint": cmd_inspect,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset
    # by the subparser's own default
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    common.add_argument("--out-dir", help="run directory (overrides run.out_dir)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key, e.g. --set prune.k_attn=2")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="recprune", parents=[common],
                                description="Structured prune-and-restore for a next-item transformer.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("train-base", parents=[common], help="fine-tune the base model")
    s = sub.add_parser("observe", parents=[common], help="activation-concentration snapshot")
    s.add_argument("--checkpoint")
    for name, what in (("stage1", "heads + hidden dims"), ("stage2", "MLP dims"), ("stage3", "layers")):
        s = sub.add_parser(name, parents=[common], help=f"prune {what} and restore")
        s.add_argument("--checkpoint", help="model entering the stage")
        s.add_argument("--teacher", help="teacher checkpoint (default: the entering model)")
        s.add_argument("--plan", help="replay this plan file instead of scoring")
        s.add_argument("--no-restore", action="store_true", help="with --plan: surgery only")
    s = sub.add_parser("eval", parents=[common], help="HR/NDCG/PPL of a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--split", default="test", choices=("train", "valid", "test"))
    s.add_argument("--format", default="tsv", choices=("tsv", "text"))
    s = sub.add_parser("pipeline", parents=[common], help="base -> stage1..3 -> test eval")
    s.add_argument("--from-stage", choices=("stage1", "stage2", "stage3"),
                   help="resume from the checkpoint preceding this stage")
    s = sub.add_parser("compare-baselines", parents=[common], help="head-selection strategy table")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--strategies", default="propagated_kl,random,wanda,no_alpha,global_importance")
    s = sub.add_parser("inspect-checkpoint", parents=[common], help="print a checkpoint header")
    s.add_argument("path")
    s.add_argument("--format", default="tsv", choices=("tsv", "json"))
    sub.add_parser("report", parents=[common], help="print run tables and render figures")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_cfg(args)
        return COMMANDS[args.command](args, cfg)
    except (ContractError, TokenIndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
