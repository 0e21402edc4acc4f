"""Experiment orchestration: configs, the pretrain/CPL/MTF/FL regimes, evaluation, metrics.

Config files are flat ``key = value`` text with dotted sections::

    mode = fl
    n = 10
    seeds = 0, 1, 2
    pretrain_checkpoint = runs/pretrain_seed{seed}.ckpt
    train.instances_per_epoch = 512
    federation.rounds = 20
    federation.aggregation = ties

``#`` starts a comment. ``federation = default`` requests a federation section
with every field at its default.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import typing
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import classic_baseline
from .fed_proto import Client, FederationConfig, federate
from .parallel import derive_rng, pmap
from .policy_net import ArchConfig, ParamVector, init_params, rollout_batch
from .rl_train import GeneratorSource, MixedSource, PoolSource, TrainConfig, pretrain
from .serialization import load_checkpoint, read_dataset, save_checkpoint, write_dataset
from .vrp_core import (ALL_VARIANTS, FINETUNE_VARIANTS, PRETRAIN_VARIANTS, Instance, Solution,
                       VariantSpec, augment8, evaluate, generate_dataset)

log = logging.getLogger(__name__)

MODES = ("pretrain", "cpl", "mtf", "fl")
SECTIONS = {"arch": ArchConfig, "train": TrainConfig, "federation": FederationConfig}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds one ``field: message`` string per problem."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class ExperimentConfig:
    mode: str = "pretrain"
    n: int = 10
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    federation: Optional[FederationConfig] = None
    pretrain_checkpoint: Optional[str] = None
    eval_set_size: int = 256
    eval_seed: int = 2024
    seeds: Tuple[int, ...] = (0,)
    output_dir: str = "runs"
    baseline_budget: int = classic_baseline.DEFAULT_BUDGET
    augment: bool = True
    save_round_checkpoints: bool = False
    linehaul_first: bool = False

    def errors(self) -> List[str]:
        errs = []
        if self.mode not in MODES:
            errs.append(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.n < 1:
            errs.append("n: must be >= 1")
        if self.eval_set_size < 1:
            errs.append("eval_set_size: must be >= 1")
        if not self.seeds:
            errs.append("seeds: at least one seed is required")
        if self.baseline_budget < 0:
            errs.append("baseline_budget: must be >= 0")
        if self.mode == "fl" and self.federation is None:
            errs.append("federation: required for mode=fl (use 'federation = default')")
        if self.mode in ("cpl", "mtf", "fl") and not self.pretrain_checkpoint:
            errs.append(f"pretrain_checkpoint: required for mode={self.mode}")
        if self.train.problem_size != self.n:
            errs.append(f"train.problem_size: must equal n ({self.n})")
        return errs

    def validate(self) -> "ExperimentConfig":
        errs = self.errors()
        if errs:
            raise ConfigError(errs)
        return self

    @property
    def fed(self) -> FederationConfig:
        return self.federation or FederationConfig()

    def checkpoint_path(self, seed: int) -> str:
        return str(self.pretrain_checkpoint).format(seed=seed)


# config parsing ---------------------------------------------------------------

_TRUE, _FALSE = {"1", "true", "yes", "on"}, {"0", "false", "no", "off"}


def _convert(raw: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if raw.lower() in ("none", "null", ""):
            return None
        return _convert(raw, next(a for a in args if a is not type(None)))
    if origin in (tuple, list) or hint in (tuple, list):
        inner = args[0] if args else int
        return tuple(_convert(p.strip(), inner) for p in raw.split(",") if p.strip())
    if hint is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def parse_config_text(text: str) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected 'key = value'"])
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError([f"{key}: given more than once (line {lineno})"])
        out[key] = value
    return out


def config_from_dict(raw: Mapping[str, str], **overrides) -> ExperimentConfig:
    """Build and validate a config from string key/values; collects every field error."""
    errs: List[str] = []
    top_hints = typing.get_type_hints(ExperimentConfig)
    top: Dict[str, object] = {}
    sections: Dict[str, Dict[str, object]] = {}
    fed_requested = False
    for key, value in raw.items():
        if "." in key:
            sec, name = key.split(".", 1)
            cls = SECTIONS.get(sec)
            if cls is None:
                errs.append(f"{key}: unknown section {sec!r}")
                continue
            hints = typing.get_type_hints(cls)
            if name not in hints:
                errs.append(f"{key}: unknown field")
                continue
            try:
                sections.setdefault(sec, {})[name] = _convert(value, hints[name])
            except ValueError as exc:
                errs.append(f"{key}: {exc}")
        elif key == "federation":
            if value.lower() != "default":
                errs.append("federation: only 'default' is accepted as a bare value")
            fed_requested = True
        elif key in SECTIONS or key not in top_hints:
            errs.append(f"{key}: unknown field")
        else:
            try:
                top[key] = _convert(value, top_hints[key])
            except ValueError as exc:
                errs.append(f"{key}: {exc}")
    top.update(overrides)
    n = top.get("n", ExperimentConfig.n)
    sections.setdefault("train", {}).setdefault("problem_size", n)
    for sec, cls in SECTIONS.items():
        if sec not in sections and not (sec == "federation" and fed_requested):
            continue
        try:
            top[sec] = cls(**sections.get(sec, {}))
        except (ValueError, TypeError) as exc:
            errs.append(f"{sec}: {exc}")
    if errs:
        raise ConfigError(errs)
    try:
        cfg = ExperimentConfig(**top)
    except (ValueError, TypeError) as exc:
        raise ConfigError([str(exc)]) from None
    return cfg.validate()


def load_config(path, **overrides) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(parse_config_text(fh.read()), **overrides)


# evaluation data --------------------------------------------------------------

def _variant_key(spec: VariantSpec) -> int:
    return ALL_VARIANTS.index(spec)


def eval_dataset(spec: VariantSpec, n: int, size: int, eval_seed: int,
                 linehaul_first: bool = False) -> List[Instance]:
    """The frozen evaluation set for (variant, n, eval seed); identical across regimes."""
    return generate_dataset(spec, n, size, derive_rng(eval_seed, n, _variant_key(spec)),
                            linehaul_first)


def reference_costs(instances: Sequence[Instance], budget: int = classic_baseline.DEFAULT_BUDGET) -> np.ndarray:
    return classic_baseline.solve_costs(instances, budget)


def _write_costs(costs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("index", "cost"))
        for i, c in enumerate(costs):
            w.writerow((i, repr(float(c))))


def _read_costs(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["cost"]) for r in rows])


def prepare_eval(cfg: ExperimentConfig, variants: Sequence[VariantSpec], data_dir: Optional[str] = None):
    """Eval datasets and baseline reference costs, cached on disk under ``data_dir``."""
    data_dir = data_dir or os.path.join(cfg.output_dir, "data")
    os.makedirs(data_dir, exist_ok=True)
    datasets, refs = {}, {}
    for spec in variants:
        stem = os.path.join(data_dir, f"{spec.name}_n{cfg.n}_m{cfg.eval_set_size}_s{cfg.eval_seed}"
                                      + ("_lhf" if cfg.linehaul_first else ""))
        data_path, ref_path = stem + ".bin", f"{stem}_ref{cfg.baseline_budget}.csv"
        if os.path.exists(data_path):
            insts = read_dataset(data_path)
        else:
            insts = eval_dataset(spec, cfg.n, cfg.eval_set_size, cfg.eval_seed, cfg.linehaul_first)
            write_dataset(insts, data_path)
        if os.path.exists(ref_path):
            ref = _read_costs(ref_path)
        else:
            ref = reference_costs(insts, cfg.baseline_budget)
            _write_costs(ref, ref_path)
        if len(ref) != len(insts):
            raise ValueError(f"{ref_path}: reference count does not match the dataset")
        datasets[spec.name], refs[spec.name] = insts, ref
    return datasets, refs


def greedy_costs(params: ParamVector, instances: Sequence[Instance], augment: bool = True,
                 chunk: int = 128, num_starts: int = 8) -> np.ndarray:
    """Best greedy multi-start cost per instance, over the 8 square symmetries if ``augment``.

    The winning tour of each transformed copy is re-scored on the original instance.
    """
    ks = range(8) if augment else range(1)
    jobs = [(i, k) for i in range(len(instances)) for k in ks]
    batches = [jobs[a:a + chunk] for a in range(0, len(jobs), chunk)]

    def work(batch):
        insts = [instances[i] if k == 0 else augment8(instances[i], k) for i, k in batch]
        starts = min(num_starts, insts[0].n)
        res = rollout_batch(params, insts, starts, "greedy")
        best = res.cost.argmin(1)
        out = []
        for b, (i, _) in enumerate(batch):
            acts = res.actions[b, best[b]]
            out.append(evaluate(instances[i], Solution.from_actions(acts[acts >= 0])))
        return out

    flat = np.array([c for part in pmap(work, batches) for c in part])
    return flat.reshape(len(instances), len(ks)).min(1)


# metrics ----------------------------------------------------------------------

@dataclass
class DetailRow:
    model: str
    finetune_variant: str
    eval_variant: str
    n: int
    obj: float
    gap_pct: float
    is_trained: bool
    ref_obj: float
    mean_instance_gap_pct: float


@dataclass
class RollupRow:
    model: str
    row_variant: str
    trained_obj: float
    trained_gap: float
    unseen_obj: float
    unseen_gap: float


@dataclass
class Metrics:
    rows: List[DetailRow] = field(default_factory=list)
    instance_costs: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict)

    def lookup(self, model: str, variant: str) -> DetailRow:
        for r in self.rows:
            if r.model == model and r.eval_variant == variant:
                return r
        raise KeyError((model, variant))

    def models(self) -> List[str]:
        return list(dict.fromkeys(r.model for r in self.rows))

    def rollup(self) -> List[RollupRow]:
        """Trained value on the row variant, unweighted mean over every other eval variant.

        Models without a single fine-tuning variant (pretrain, MTF, FL global)
        get one row per eval variant so their rows line up with per-variant models.
        """
        out = []
        for model in self.models():
            mine = [r for r in self.rows if r.model == model]
            ft = mine[0].finetune_variant
            row_variants = [ft] if ft in {r.eval_variant for r in mine} else [r.eval_variant for r in mine]
            for rv in row_variants:
                t = next(r for r in mine if r.eval_variant == rv)
                others = [r for r in mine if r.eval_variant != rv]
                uo = float(np.mean([r.obj for r in others])) if others else float("nan")
                ug = float(np.mean([r.gap_pct for r in others])) if others else float("nan")
                out.append(RollupRow(model, rv, t.obj, t.gap_pct, uo, ug))
        return out


def evaluate_matrix(models: Mapping[str, Tuple[ParamVector, Optional[str]]],
                    variants: Sequence[VariantSpec], eval_data: Mapping[str, Sequence[Instance]],
                    ref_costs: Mapping[str, np.ndarray], augment: bool = True) -> Metrics:
    """Score every model on every variant's frozen eval set against the reference costs.

    ``models`` maps a name to (params, fine-tuning variant name or None).
    """
    for spec in variants:
        if spec.name not in eval_data:
            raise ValueError(f"no evaluation data for {spec.name}")
        ref = ref_costs.get(spec.name)
        if ref is None or len(ref) != len(eval_data[spec.name]):
            raise ValueError(f"missing reference costs for {spec.name}")
    metrics = Metrics()
    for name, (params, ft) in models.items():
        for spec in variants:
            insts, ref = eval_data[spec.name], np.asarray(ref_costs[spec.name], dtype=np.float64)
            costs = greedy_costs(params, insts, augment)
            obj, ref_obj = float(costs.mean()), float(ref.mean())
            per_gap = float(np.mean([classic_baseline.gap(c, r) for c, r in zip(costs, ref)]))
            metrics.rows.append(DetailRow(name, ft or "", spec.name, insts[0].n, obj,
                                          classic_baseline.gap(obj, ref_obj), ft == spec.name,
                                          ref_obj, per_gap))
            metrics.instance_costs[(name, spec.name)] = costs
    return metrics


DETAIL_COLUMNS = ("model", "finetune_variant", "eval_variant", "n", "obj", "gap_pct", "is_trained",
                  "ref_obj", "mean_instance_gap_pct")
ROLLUP_COLUMNS = ("model", "row_variant", "trained_obj", "trained_gap", "unseen_obj", "unseen_gap")


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def export_metrics(metrics: Metrics, path, rollup_path=None) -> Tuple[str, str]:
    """Detail CSV at ``path``; rollup CSV next to it (``*_rollup.csv``) unless given."""
    if rollup_path is None:
        root, ext = os.path.splitext(str(path))
        rollup_path = f"{root}_rollup{ext or '.csv'}"
    for target, cols, rows in ((path, DETAIL_COLUMNS, metrics.rows),
                               (rollup_path, ROLLUP_COLUMNS, metrics.rollup())):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(getattr(r, c)) for c in cols])
        with open(target, "w", newline="") as fh:
            fh.write(buf.getvalue())
    return str(path), str(rollup_path)


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# regimes ----------------------------------------------------------------------

def _sub_seed(seed: int, key: int) -> int:
    return int(np.random.SeedSequence([seed, key]).generate_state(1)[0])


def _client_source(cfg: ExperimentConfig, spec: VariantSpec, seed: int, client_id: int):
    cap = cfg.fed.data_cap
    if cap is None:
        return GeneratorSource(spec, cfg.n, cfg.linehaul_first)
    data = generate_dataset(spec, cfg.n, cap, derive_rng(seed, 7, client_id), cfg.linehaul_first)
    return PoolSource(data)


def _checkpointer(cfg: ExperimentConfig, tag: str, rounds: int, seed: int, written: List[str]):
    def save(t, client):
        if cfg.save_round_checkpoints or t == rounds - 1:
            path = os.path.join(cfg.output_dir, f"{tag}_round{t}_client{client.id}.ckpt")
            save_checkpoint(client.params, {"mode": cfg.mode, "seed": seed, "round": t,
                                            "client": client.id, "variant": client.variant}, path)
            written.append(path)
    return save


def run_pretrain(cfg: ExperimentConfig, seed: int) -> Dict[str, object]:
    out = cfg.output_dir
    theta_init = init_params(cfg.arch, derive_rng(seed, 1))
    train_cfg = replace(cfg.train, seed=seed)
    log_path = os.path.join(out, f"pretrain_seed{seed}_train.csv")
    if os.path.exists(log_path):
        os.remove(log_path)
    theta, _ = pretrain(PRETRAIN_VARIANTS, train_cfg, np.random.default_rng(seed), cfg.arch,
                        params=theta_init, log_path=log_path)
    ckpt = os.path.join(out, f"pretrain_seed{seed}.ckpt")
    save_checkpoint(theta, {"mode": "pretrain", "seed": seed, "n": cfg.n,
                            "epochs": train_cfg.epochs}, ckpt)
    data, refs = prepare_eval(cfg, PRETRAIN_VARIANTS)
    metrics = evaluate_matrix({"init": (theta_init, None), "pretrain": (theta, None)},
                              PRETRAIN_VARIANTS, data, refs, cfg.augment)
    detail, rollup = export_metrics(metrics, os.path.join(out, f"metrics_pretrain_seed{seed}.csv"))
    return {"checkpoints": [ckpt], "train_log": log_path, "metrics": detail, "rollup": rollup,
            "metrics_obj": metrics}


def run_finetune(cfg: ExperimentConfig, seed: int) -> Dict[str, object]:
    out = cfg.output_dir
    theta0, _ = load_checkpoint(cfg.checkpoint_path(seed), expect_arch=cfg.arch)
    fed = cfg.fed
    tcfg = replace(cfg.train, seed=seed, lr=fed.local_lr)
    variants = FINETUNE_VARIANTS
    models: Dict[str, Tuple[ParamVector, Optional[str]]] = {"pretrain": (theta0, None)}
    written: List[str] = []
    round_logs: List[str] = []

    def fresh_log(name):
        path = os.path.join(out, name)
        if os.path.exists(path):
            os.remove(path)
        round_logs.append(path)
        return path

    single = replace(fed, aggregation="fedavg", selection_ratio=1.0)
    if cfg.mode == "cpl":
        for k, spec in enumerate(variants, 1):
            tag = f"cpl_{spec.name}_seed{seed}"
            clients = [Client(1, _client_source(cfg, spec, seed, k))]
            res = federate(theta0, clients, single, tcfg, _sub_seed(seed, k),
                           round_log=fresh_log(f"{tag}_rounds.csv"),
                           checkpoint=_checkpointer(cfg, tag, fed.rounds, seed, written))
            models[f"cpl_{spec.name}"] = (res.client_params[1], spec.name)
    elif cfg.mode == "mtf":
        tag = f"mtf_seed{seed}"
        sources = [_client_source(cfg, spec, seed, k) for k, spec in enumerate(variants, 1)]
        mixed = MixedSource(sources, derive_rng(seed, 9))
        # same total budget as N clients each running T*E epochs
        mtf_cfg = replace(single, local_epochs=fed.local_epochs * len(variants))
        res = federate(theta0, [Client(1, mixed)], mtf_cfg, tcfg, _sub_seed(seed, 0),
                       round_log=fresh_log(f"{tag}_rounds.csv"),
                       checkpoint=_checkpointer(cfg, tag, fed.rounds, seed, written))
        models["mtf"] = (res.client_params[1], None)
    else:
        tag = f"fl_seed{seed}"
        clients = [Client(k, _client_source(cfg, spec, seed, k)) for k, spec in enumerate(variants, 1)]
        res = federate(theta0, clients, fed, tcfg, seed, round_log=fresh_log(f"{tag}_rounds.csv"),
                       checkpoint=_checkpointer(cfg, tag, fed.rounds, seed, written))
        for k, spec in enumerate(variants, 1):
            models[f"fl_{spec.name}"] = (res.client_params[k], spec.name)
        models["fl_global"] = (res.global_params, None)
        gpath = os.path.join(out, f"{tag}_global.ckpt")
        save_checkpoint(res.global_params, {"mode": "fl", "seed": seed, "rounds": fed.rounds}, gpath)
        written.append(gpath)
    data, refs = prepare_eval(cfg, variants)
    metrics = evaluate_matrix(models, variants, data, refs, cfg.augment)
    detail, rollup = export_metrics(metrics, os.path.join(out, f"metrics_{cfg.mode}_seed{seed}.csv"))
    return {"checkpoints": written, "round_logs": round_logs, "metrics": detail, "rollup": rollup,
            "metrics_obj": metrics}


def run(cfg: ExperimentConfig) -> Dict[int, Dict[str, object]]:
    """Run the configured regime for every seed; returns artifact paths per seed."""
    cfg.validate()
    os.makedirs(cfg.output_dir, exist_ok=True)
    results = {}
    for seed in cfg.seeds:
        log.info("mode=%s seed=%d", cfg.mode, seed)
        fn = run_pretrain if cfg.mode == "pretrain" else run_finetune
        results[seed] = fn(cfg, seed)
    return results
