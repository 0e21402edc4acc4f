"""The desk-scale experiment used by the directional and training-sanity acceptance checks."""

import os
import time

import numpy as np

from fedroute import experiment
from fedroute.vrp_core import FINETUNE_VARIANTS, PRETRAIN_VARIANTS

SEEDS = (0, 1, 2)
FORGETTING_VARIANT = "OVRPB"

PRETRAIN_CFG = """
mode = pretrain
n = 10
seeds = 0, 1, 2
eval_set_size = 128
train.batch_size = 64
train.instances_per_epoch = 2048
train.epochs = 50
train.track_greedy = false
"""

FINETUNE_CFG = """
n = 10
seeds = 0, 1, 2
eval_set_size = 128
pretrain_checkpoint = {out}/pretrain_seed{{seed}}.ckpt
train.batch_size = 64
train.instances_per_epoch = 256
train.track_greedy = false
federation.rounds = 20
federation.local_epochs = 5
federation.local_lr = 0.001
federation.keep_percent = 20
federation.scale = 1.0
federation.selection_ratio = 1.0
federation.aggregation = ties
"""


def run_all(out, log=print):
    timings = {}
    t = time.time()
    cfg = experiment.config_from_dict(experiment.parse_config_text(PRETRAIN_CFG), output_dir=out)
    pre = experiment.run(cfg)
    timings["pretrain"] = time.time() - t
    fin = {}
    for mode in ("cpl", "fl"):
        t = time.time()
        raw = experiment.parse_config_text(FINETUNE_CFG.format(out=out))
        cfg = experiment.config_from_dict(raw, mode=mode, output_dir=out)
        fin[mode] = experiment.run(cfg)
        timings[mode] = time.time() - t
        log(f"{mode} done in {timings[mode]:.0f}s")
    return pre, fin, timings


def sanity_table(pre):
    """(seed, variant, init greedy cost, pretrained greedy cost)."""
    rows = []
    for seed, arts in pre.items():
        m = arts["metrics_obj"]
        for spec in PRETRAIN_VARIANTS:
            rows.append((seed, spec.name, m.lookup("init", spec.name).obj,
                         m.lookup("pretrain", spec.name).obj))
    return rows


def unseen_gaps(metrics, prefix):
    """Mean unseen gap over the ten clients of one regime."""
    vals = [r.unseen_gap for r in metrics.rollup() if r.model.startswith(prefix)
            and r.model != "fl_global" and r.row_variant == r.model[len(prefix):]]
    assert len(vals) == len(FINETUNE_VARIANTS)
    return float(np.mean(vals))


def forgetting(metrics, model, variant=FORGETTING_VARIANT):
    """Mean greedy cost over the other nine variants, minus the same for theta^0."""
    others = [s.name for s in FINETUNE_VARIANTS if s.name != variant]
    mean = lambda name: float(np.mean([metrics.lookup(name, v).obj for v in others]))
    return mean(model) - mean("pretrain")


def directional(fin):
    """Per seed: (cpl unseen gap, fl unseen gap, cpl forgetting, fl forgetting)."""
    out = {}
    for seed in fin["cpl"]:
        mc, mf = fin["cpl"][seed]["metrics_obj"], fin["fl"][seed]["metrics_obj"]
        out[seed] = (unseen_gaps(mc, "cpl_"), unseen_gaps(mf, "fl_"),
                     forgetting(mc, f"cpl_{FORGETTING_VARIANT}"),
                     forgetting(mf, f"fl_{FORGETTING_VARIANT}"))
    return out


if __name__ == "__main__":
    import sys
    out = sys.argv[1] if len(sys.argv) > 1 else "/tmp/accept_run"
    os.makedirs(out, exist_ok=True)
    pre, fin, timings = run_all(out)
    for r in sanity_table(pre):
        print("sanity", *r, r[3] < r[2])
    for seed, v in directional(fin).items():
        print("directional", seed, *v)
    print("timings", timings)
