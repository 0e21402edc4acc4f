"""Federation degeneracy and schedule-independence checks, shared with the acceptance suite."""

import os
import subprocess
import sys

import numpy as np

from fedroute.fed_proto import Client, FederationConfig, federate
from fedroute.parallel import derive_rng
from fedroute.policy_net import ArchConfig, init_params
from fedroute.rl_train import GeneratorSource, TrainConfig, init_opt_state, train_epoch
from fedroute.vrp_core import FINETUNE_VARIANTS, variant_from_name

SMALL_ARCH = ArchConfig(16, 4, 2, 10.0)
SMALL_TRAIN = TrainConfig(batch_size=8, instances_per_epoch=16, num_starts=4, lr=1e-3,
                          problem_size=6, track_greedy=False)


def centralized_vs_federated(rounds=3, epochs=2, seed=5, variant="OVRPB"):
    """Max |difference| between a one-client fedavg federation and a plain T*E-epoch loop.

    The plain loop is written against train_epoch directly with the same
    per-round generator the federation hands its client.
    """
    spec = variant_from_name(variant)
    theta0 = init_params(SMALL_ARCH, np.random.default_rng(seed))
    cfg = FederationConfig(local_epochs=epochs, local_lr=1e-3, rounds=rounds, aggregation="fedavg")
    res = federate(theta0, [Client(1, GeneratorSource(spec, 6))], cfg, SMALL_TRAIN, seed)

    params, opt = theta0.copy(), init_opt_state(theta0, 1e-3, SMALL_TRAIN.weight_decay)
    source = GeneratorSource(spec, 6)
    for t in range(rounds):
        rng = derive_rng(seed, t, 1)
        for _ in range(epochs):
            params, opt, _ = train_epoch(params, opt, source, SMALL_TRAIN, rng)
    moved = float(np.abs(params.data - theta0.data).max())
    return (float(np.abs(res.global_params.data - params.data).max()),
            float(np.abs(res.client_params[1].data - params.data).max()), moved)


def zero_lr_drift(aggregation, rounds=2, seed=3, num_clients=3):
    """Largest parameter change when every client trains with lr = 0."""
    theta0 = init_params(SMALL_ARCH, np.random.default_rng(seed))
    clients = [Client(k, GeneratorSource(FINETUNE_VARIANTS[k - 1], 6))
               for k in range(1, num_clients + 1)]
    cfg = FederationConfig(local_epochs=1, local_lr=0.0, rounds=rounds, aggregation=aggregation)
    res = federate(theta0, clients, cfg, SMALL_TRAIN, seed)
    drift = [np.abs(res.global_params.data - theta0.data).max()]
    drift += [np.abs(p.data - theta0.data).max() for p in res.client_params.values()]
    return float(max(drift))


SCHEDULE_CFG = """
n = 6
seeds = 3
eval_set_size = 6
baseline_budget = 300
arch.embed_dim = 16
train.instances_per_epoch = 16
train.batch_size = 8
train.num_starts = 4
train.epochs = 1
train.track_greedy = false
federation.rounds = 2
federation.local_epochs = 1
"""


def _cli(args, threads, cwd):
    env = dict(os.environ, FEDROUTE_THREADS=str(threads))
    src = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src")
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    out = subprocess.run([sys.executable, "-m", "fedroute.cli", *args], env=env, cwd=cwd,
                         capture_output=True, text=True)
    if out.returncode != 0:
        raise RuntimeError(out.stderr)


def schedule_run(workdir, threads):
    """pretrain then federated fine-tuning through the CLI; returns the metrics file bytes."""
    os.makedirs(workdir, exist_ok=True)
    cfg = os.path.join(workdir, "run.cfg")
    with open(cfg, "w") as fh:
        fh.write(SCHEDULE_CFG)
    out = os.path.join(workdir, "out")
    _cli(["pretrain", "--config", cfg, "--out", out], threads, workdir)
    _cli(["finetune", "--mode", "fl", "--config", cfg, "--out", out,
          "--checkpoint", os.path.join(out, "pretrain_seed{seed}.ckpt")], threads, workdir)
    blobs = {}
    for name in sorted(os.listdir(out)):
        if name.startswith("metrics_") and name.endswith(".csv"):
            with open(os.path.join(out, name), "rb") as fh:
                blobs[name] = fh.read()
    return blobs
