"""Command line entry point: ``fedroute <command> --config PATH --seed S --out DIR``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import List, Optional

from . import classic_baseline, experiment
from .gradcheck import check_gradient
from .parallel import derive_rng
from .policy_net import ArchConfig
from .serialization import export_text, load_checkpoint, read_dataset, write_dataset
from .vrp_core import ALL_VARIANTS, FINETUNE_VARIANTS, PRETRAIN_VARIANTS, evaluate, variant_from_name

log = logging.getLogger("fedroute")

VARIANT_SETS = {"all": ALL_VARIANTS, "pretrain": PRETRAIN_VARIANTS, "finetune": FINETUNE_VARIANTS}


def parse_variants(text: str):
    if text in VARIANT_SETS:
        return list(VARIANT_SETS[text])
    return [variant_from_name(v.strip()) for v in text.split(",") if v.strip()]


def _load_cfg(args, **overrides) -> experiment.ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = experiment.parse_config_text(fh.read())
    if overrides.get("mode") == "fl" and not any(k.startswith("federation") for k in raw):
        raw["federation"] = "default"
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    overrides["output_dir"] = args.out
    return experiment.config_from_dict(raw, **overrides)


def _report(results) -> None:
    for seed, arts in results.items():
        for key in ("metrics", "rollup", "train_log"):
            if key in arts:
                print(f"seed {seed} {key}: {arts[key]}")
        for path in arts.get("checkpoints", []):
            print(f"seed {seed} checkpoint: {path}")


def cmd_pretrain(args) -> int:
    _report(experiment.run(_load_cfg(args, mode="pretrain")))
    return 0


def cmd_finetune(args) -> int:
    extra = {"mode": args.mode}
    if args.checkpoint:
        extra["pretrain_checkpoint"] = args.checkpoint
    _report(experiment.run(_load_cfg(args, **extra)))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(cfg.output_dir, exist_ok=True)
    variants = parse_variants(args.variants)
    models = {}
    for path in args.checkpoint:
        params, meta = load_checkpoint(path, expect_arch=cfg.arch)
        name = os.path.splitext(os.path.basename(path))[0]
        models[name] = (params, meta.get("variant") if meta.get("variant") != "MIX" else None)
    data, refs = experiment.prepare_eval(cfg, variants)
    metrics = experiment.evaluate_matrix(models, variants, data, refs, cfg.augment)
    seed = cfg.seeds[0]
    detail, rollup = experiment.export_metrics(
        metrics, os.path.join(cfg.output_dir, f"metrics_eval_seed{seed}.csv"))
    print(f"metrics: {detail}\nrollup: {rollup}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(cfg.output_dir, exist_ok=True)
    insts = read_dataset(args.data)
    budget = args.budget if args.budget is not None else cfg.baseline_budget
    sols = [classic_baseline.solve(inst, budget) for inst in insts]
    path = os.path.join(cfg.output_dir, "baseline_costs.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("index", "variant", "n", "cost", "routes"))
        for i, (inst, sol) in enumerate(zip(insts, sols)):
            routes = "|".join(" ".join(map(str, r)) for r in sol.routes)
            w.writerow((i, inst.spec.name, inst.n, repr(evaluate(inst, sol)), routes))
    print(f"costs: {path}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(cfg.output_dir, exist_ok=True)
    arch = ArchConfig(args.embed_dim, cfg.arch.num_heads, cfg.arch.num_layers, cfg.arch.clip)
    seed = cfg.seeds[0]
    path = os.path.join(cfg.output_dir, "gradcheck.csv")
    worst = 0.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "checked", "max_rel_err", "max_abs_err", "worst_tensor", "pass"))
        for k, spec in enumerate(parse_variants(args.variants)):
            r = check_gradient(spec, derive_rng(seed, k), arch, n=args.n, eps=args.eps,
                               per_tensor=args.per_tensor or None)
            ok = r.max_rel_err <= args.tol
            worst = max(worst, r.max_rel_err)
            w.writerow((r.variant, r.checked, repr(r.max_rel_err), repr(r.max_abs_err),
                        r.worst_tensor, int(ok)))
            print(f"{r.variant:10s} max_rel_err={r.max_rel_err:.3e} {'ok' if ok else 'FAIL'}")
    print(f"report: {path}")
    return 0 if worst <= args.tol else 1


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(cfg.output_dir, exist_ok=True)
    size = args.size or cfg.eval_set_size
    seed = cfg.seeds[0]
    for spec in parse_variants(args.variants):
        insts = experiment.eval_dataset(spec, cfg.n, size, seed, cfg.linehaul_first)
        stem = os.path.join(cfg.output_dir, f"{spec.name}_n{cfg.n}_m{size}_s{seed}")
        write_dataset(insts, stem + ".bin")
        export_text(insts, stem + ".txt")
        print(f"wrote {stem}.bin")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, metavar="S", help="run this seed only")
    common.add_argument("--out", metavar="DIR", default="runs", help="output directory")

    parser = argparse.ArgumentParser(prog="fedroute", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="multi-variant pre-training")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="CPL, MTF or federated fine-tuning")
    p.add_argument("--mode", choices=("cpl", "mtf", "fl"), required=True)
    p.add_argument("--checkpoint", help="pre-trained checkpoint ({seed} is substituted)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common], help="score checkpoints on the eval sets")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--variants", default="finetune", help="all, pretrain, finetune or a comma list")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("baseline", parents=[common], help="classic heuristic on a dataset file")
    p.add_argument("--data", required=True, help="binary instance dataset")
    p.add_argument("--budget", type=int)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--variants", default="all")
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--per-tensor", type=int, default=12, help="sampled entries per tensor, 0 = all")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("gen-data", parents=[common], help="write instance datasets")
    p.add_argument("--variants", default="all")
    p.add_argument("--size", type=int)
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except experiment.ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
