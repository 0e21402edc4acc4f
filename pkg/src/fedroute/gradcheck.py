"""Central finite-difference check of the hand-written policy gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy_net import (ArchConfig, ParamVector, grad_weighted_logprob, init_params, rollout,
                         total_log_prob)
from .vrp_core import VariantSpec, generate_instance


@dataclass
class GradCheckResult:
    variant: str
    checked: int
    max_rel_err: float
    max_abs_err: float
    worst_tensor: str


def relative_error(analytic, numeric, floor: float) -> np.ndarray:
    """|a - f| / max(|a|, |f|, floor).

    ``floor`` keeps components whose true gradient is ~0 from turning pure
    finite-difference roundoff into a huge relative error.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradient(spec: VariantSpec, rng: np.random.Generator, arch: ArchConfig = ArchConfig(16, 4, 2, 10.0),
                   n: int = 6, num_starts: int = 3, eps: float = 1e-5, per_tensor: int = 12,
                   params: ParamVector = None, floor_ratio: float = 1e-3) -> GradCheckResult:
    """Compare the analytic gradient of sum_j w_j log p(traj_j) with central differences.

    ``per_tensor`` coordinates are sampled from every named tensor (all of them
    when the tensor is smaller); pass ``per_tensor=None`` to check every entry.
    """
    if params is None:
        params = init_params(arch, rng)
    inst = generate_instance(spec, n, rng)
    trajs = rollout(params, inst, min(num_starts, n), "sample", rng)
    w = rng.standard_normal(len(trajs))
    g = grad_weighted_logprob(params, trajs, w)

    idx, owner = [], []
    for name, (a, b, _) in params.layout.offsets().items():
        size = b - a
        if per_tensor is None or size <= per_tensor:
            pick = np.arange(a, b)
        else:
            pick = a + rng.choice(size, per_tensor, replace=False)
        idx.extend(pick.tolist())
        owner.extend([name] * len(pick))

    base = params.data
    fd = np.empty(len(idx))
    for k, i in enumerate(idx):
        x = base.copy()
        x[i] += eps
        fp = total_log_prob(params.with_data(x), trajs, w)
        x[i] = base[i] - eps
        fm = total_log_prob(params.with_data(x), trajs, w)
        fd[k] = (fp - fm) / (2 * eps)
    a = g[idx]
    rel = relative_error(a, fd, floor_ratio * float(np.abs(g).max()))
    worst = int(np.argmax(rel))
    return GradCheckResult(spec.name, len(idx), float(rel.max()), float(np.abs(a - fd).max()),
                           owner[worst])
