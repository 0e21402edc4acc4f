"""Compact attention encoder-decoder policy with hand-written backprop.

All parameters live in one flat float64 vector (:class:`ParamVector`) whose
:class:`Layout` names every tensor. Federation and merging operate on the flat
vector; the network reads reshaped views of it.

Rollouts are vectorised over a (batch, starts) grid. Each rollout can keep a
:class:`Tape` of the decoding steps, and :func:`backward` replays the tape in
reverse to obtain the exact gradient of a weighted sum of trajectory
log-probabilities.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .routing_env import NUM_DYNAMIC, NUM_STATIC, BatchEnv, static_features_batch
from .vrp_core import Instance, Solution

MASK_SENTINEL = -1e30
NORM_EPS = 1e-6


@dataclass(frozen=True)
class ArchConfig:
    embed_dim: int = 32
    num_heads: int = 4
    num_layers: int = 2
    clip: float = 10.0

    def __post_init__(self):
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.num_layers < 0:
            raise ValueError("embed_dim and num_heads must be positive, num_layers >= 0")
        if self.embed_dim % self.num_heads:
            raise ValueError("num_heads must divide embed_dim")
        if self.clip <= 0:
            raise ValueError("clip must be positive")


@dataclass(frozen=True)
class Layout:
    entries: Tuple[Tuple[str, Tuple[int, ...]], ...]

    def __post_init__(self):
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("tensor names must be unique")

    @property
    def total_len(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.entries)

    def offsets(self) -> Dict[str, Tuple[int, int, Tuple[int, ...]]]:
        out, pos = OrderedDict(), 0
        for name, shape in self.entries:
            size = int(np.prod(shape))
            out[name] = (pos, pos + size, shape)
            pos += size
        return out

    def views(self, data: np.ndarray) -> Dict[str, np.ndarray]:
        return {name: data[a:b].reshape(shape) for name, (a, b, shape) in self.offsets().items()}


def build_layout(arch: ArchConfig) -> Layout:
    d, F = arch.embed_dim, NUM_STATIC
    entries = [
        ("enc.depot_w", (F, d)), ("enc.depot_b", (d,)),
        ("enc.node_w", (F, d)), ("enc.node_b", (d,)),
    ]
    for i in range(arch.num_layers):
        p = f"enc.layer{i}."
        entries += [
            (p + "wq", (d, d)), (p + "wk", (d, d)), (p + "wv", (d, d)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "norm1_g", (d,)), (p + "norm1_b", (d,)),
            (p + "ff_w1", (d, 2 * d)), (p + "ff_b1", (2 * d,)),
            (p + "ff_w2", (2 * d, d)), (p + "ff_b2", (d,)),
            (p + "norm2_g", (d,)), (p + "norm2_b", (d,)),
        ]
    entries += [
        ("dec.ctx_w", (2 * d + NUM_DYNAMIC, d)), ("dec.ctx_b", (d,)),
        ("dec.key_w", (d, d)),
    ]
    return Layout(tuple(entries))


class ParamVector:
    """Flat parameter vector plus the layout that names its pieces."""

    def __init__(self, data: np.ndarray, layout: Layout, arch: Optional[ArchConfig] = None):
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (layout.total_len,):
            raise ValueError(f"expected {layout.total_len} parameters, got {data.shape}")
        self.data = data
        self.layout = layout
        self.arch = arch

    def views(self) -> Dict[str, np.ndarray]:
        return self.layout.views(self.data)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout, self.arch)

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(data, self.layout, self.arch)

    def check_compatible(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise ValueError("parameter layouts differ")

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"ParamVector(len={len(self.data)}, tensors={len(self.layout.entries)})"


def init_params(arch: ArchConfig, rng: np.random.Generator) -> ParamVector:
    layout = build_layout(arch)
    bound = 1.0 / math.sqrt(arch.embed_dim)
    data = rng.uniform(-bound, bound, size=layout.total_len)
    return ParamVector(data, layout, arch)


def param_count(arch: ArchConfig) -> int:
    d, F, D = arch.embed_dim, NUM_STATIC, NUM_DYNAMIC
    per_layer = 4 * d * d + d + 2 * d + (2 * d * d + 2 * d) + (2 * d * d + d) + 2 * d
    return 2 * (F * d + d) + arch.num_layers * per_layer + (2 * d + D) * d + d + d * d


def _arch_of(params: ParamVector) -> ArchConfig:
    if params.arch is None:
        raise ValueError("parameter vector carries no architecture config")
    return params.arch


# ---------------------------------------------------------------------------
# encoder

def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _split_heads(x, h):
    B, N, d = x.shape
    return x.reshape(B, N, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, N, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, h * dk)


def _matmul_w_grad(x, dy):
    """Sum over leading axes of x^T dy, for y = x @ W."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _encode(P, arch: ArchConfig, X: np.ndarray, keep: bool):
    caches = []
    H = X @ P["enc.node_w"] + P["enc.node_b"]
    H[:, 0] = X[:, 0] @ P["enc.depot_w"] + P["enc.depot_b"]
    h = arch.num_heads
    scale = 1.0 / math.sqrt(arch.embed_dim // h)
    for i in range(arch.num_layers):
        p = f"enc.layer{i}."
        Qh = _split_heads(H @ P[p + "wq"], h)
        Kh = _split_heads(H @ P[p + "wk"], h)
        Vh = _split_heads(H @ P[p + "wv"], h)
        S = (Qh @ Kh.transpose(0, 1, 3, 2)) * scale
        S -= S.max(-1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(-1, keepdims=True)
        O = _merge_heads(A @ Vh)
        M = O @ P[p + "wo"] + P[p + "bo"]
        H1, n1 = _layer_norm(H + M, P[p + "norm1_g"], P[p + "norm1_b"])
        Z = H1 @ P[p + "ff_w1"] + P[p + "ff_b1"]
        R = np.maximum(Z, 0.0)
        F2 = R @ P[p + "ff_w2"] + P[p + "ff_b2"]
        H2, n2 = _layer_norm(H1 + F2, P[p + "norm2_g"], P[p + "norm2_b"])
        if keep:
            caches.append((H, Qh, Kh, Vh, A, O, H1, n1, Z, R, n2))
        H = H2
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("non-finite encoder output")
    return H, caches


def _encode_back(P, arch, X, caches, dH, G):
    h = arch.num_heads
    scale = 1.0 / math.sqrt(arch.embed_dim // h)
    for i in reversed(range(arch.num_layers)):
        p = f"enc.layer{i}."
        H, Qh, Kh, Vh, A, O, H1, n1, Z, R, n2 = caches[i]
        dR2, dg, db = _layer_norm_back(dH, P[p + "norm2_g"], n2)
        G[p + "norm2_g"] += dg
        G[p + "norm2_b"] += db
        dH1 = dR2.copy()
        G[p + "ff_w2"] += _matmul_w_grad(R, dR2)
        G[p + "ff_b2"] += dR2.reshape(-1, dR2.shape[-1]).sum(0)
        dZ = (dR2 @ P[p + "ff_w2"].T) * (Z > 0)
        G[p + "ff_w1"] += _matmul_w_grad(H1, dZ)
        G[p + "ff_b1"] += dZ.reshape(-1, dZ.shape[-1]).sum(0)
        dH1 += dZ @ P[p + "ff_w1"].T
        dR1, dg, db = _layer_norm_back(dH1, P[p + "norm1_g"], n1)
        G[p + "norm1_g"] += dg
        G[p + "norm1_b"] += db
        dHin = dR1.copy()
        G[p + "wo"] += _matmul_w_grad(O, dR1)
        G[p + "bo"] += dR1.reshape(-1, dR1.shape[-1]).sum(0)
        dOh = _split_heads(dR1 @ P[p + "wo"].T, h)
        dA = dOh @ Vh.transpose(0, 1, 3, 2)
        dVh = A.transpose(0, 1, 3, 2) @ dOh
        dS = A * (dA - (dA * A).sum(-1, keepdims=True)) * scale
        dQh = dS @ Kh
        dKh = dS.transpose(0, 1, 3, 2) @ Qh
        for name, dh in (("wq", dQh), ("wk", dKh), ("wv", dVh)):
            dproj = _merge_heads(dh)
            G[p + name] += _matmul_w_grad(H, dproj)
            dHin += dproj @ P[p + name].T
        dH = dHin
    Xd, Xn = X[:, :1], X[:, 1:]
    G["enc.depot_w"] += _matmul_w_grad(Xd, dH[:, :1])
    G["enc.depot_b"] += dH[:, 0].sum(0)
    G["enc.node_w"] += _matmul_w_grad(Xn, dH[:, 1:])
    G["enc.node_b"] += dH[:, 1:].reshape(-1, dH.shape[-1]).sum(0)


def encode(params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Node embeddings for one (n+1, F) feature matrix or a (B, n+1, F) stack."""
    arch = _arch_of(params)
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    H, _ = _encode(params.views(), arch, X, keep=False)
    return H[0] if single else H


# ---------------------------------------------------------------------------
# decoder

def _masked_log_softmax(u, mask):
    z = np.where(mask, u, MASK_SENTINEL)
    z = z - z.max(-1, keepdims=True)
    ez = np.exp(z)
    tot = ez.sum(-1, keepdims=True)
    return z - np.log(tot), ez / tot


def decode_logits(params: ParamVector, embeddings: np.ndarray, dyn_features: np.ndarray,
                  current_node: int, mask: np.ndarray) -> np.ndarray:
    """Clipped compatibility logits for one decoding step of one instance.

    Masked entries carry the large negative sentinel, so their probability
    after a softmax is exactly zero.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("all actions are masked")
    arch = _arch_of(params)
    P = params.views()
    H = np.asarray(embeddings)
    ctx = np.concatenate([H.mean(0), H[current_node], np.asarray(dyn_features)])
    q = ctx @ P["dec.ctx_w"] + P["dec.ctx_b"]
    K = H @ P["dec.key_w"]
    u = arch.clip * np.tanh(K @ q / math.sqrt(arch.embed_dim))
    return np.where(mask, u, MASK_SENTINEL)


@dataclass
class Tape:
    """Everything needed to differentiate a finished rollout."""

    X: np.ndarray
    H: np.ndarray
    Hbar: np.ndarray
    Kd: np.ndarray
    enc_caches: list
    ctx: List[np.ndarray] = field(default_factory=list)
    q: List[np.ndarray] = field(default_factory=list)
    th: List[np.ndarray] = field(default_factory=list)
    prob: List[np.ndarray] = field(default_factory=list)
    action: List[np.ndarray] = field(default_factory=list)
    cur: List[np.ndarray] = field(default_factory=list)


@dataclass
class BatchRollout:
    instances: List[Instance]
    actions: np.ndarray      # (B, P, T) padded with -1
    log_prob: np.ndarray     # (B, P)
    cost: np.ndarray         # (B, P)
    tape: Optional[Tape] = None

    def trajectories(self) -> List[List["Trajectory"]]:
        out = []
        for b, inst in enumerate(self.instances):
            row = []
            for p in range(self.actions.shape[1]):
                acts = self.actions[b, p]
                row.append(Trajectory(inst, p, tuple(int(a) for a in acts[acts >= 0]),
                                      float(self.log_prob[b, p]), float(self.cost[b, p])))
            out.append(row)
        return out


@dataclass
class Trajectory:
    instance: Instance
    start: int
    actions: Tuple[int, ...]
    sum_log_prob: float
    cost: float

    @property
    def solution(self) -> Solution:
        return Solution.from_actions(self.actions)


def rollout_batch(params: ParamVector, instances: Sequence[Instance], num_starts: int,
                  mode: str = "sample", rng: Optional[np.random.Generator] = None,
                  forced: Optional[np.ndarray] = None, keep_tape: bool = False) -> BatchRollout:
    """Decode every instance from ``num_starts`` distinct first customers.

    Start p always visits customer p+1 first; that forced move is not part of
    the log-probability. With ``forced`` (B, P, T) the given actions are
    replayed instead of sampled, which is how gradients of stored
    trajectories are recomputed.
    """
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    if mode == "sample" and forced is None and rng is None:
        raise ValueError("sampling needs an rng")
    arch = _arch_of(params)
    n = instances[0].n
    if not 1 <= num_starts <= n:
        raise ValueError(f"num_starts must be in 1..{n}")
    P = params.views()
    env = BatchEnv(instances, num_starts)
    B, S = env.B, env.P
    X = static_features_batch(instances)
    H, caches = _encode(P, arch, X, keep=keep_tape)
    Hbar = H.mean(1)
    Kd = H @ P["dec.key_w"]
    KdT = Kd.transpose(0, 2, 1)
    inv_sqrt_d = 1.0 / math.sqrt(arch.embed_dim)
    tape = Tape(X, H, Hbar, Kd, caches) if keep_tape else None
    bidx = np.arange(B)[:, None]
    hbar_rep = np.broadcast_to(Hbar[:, None, :], (B, S, arch.embed_dim))

    acts = [np.broadcast_to(np.arange(1, S + 1), (B, S)).copy()]
    if forced is not None:
        forced = np.asarray(forced)
        if forced.shape[:2] != (B, S):
            raise ValueError("forced actions must be shaped (B, P, T)")
        acts[0] = forced[:, :, 0].copy()
    env.step(acts[0])
    log_prob = np.zeros((B, S))
    t = 1
    while not env.done.all():
        mask = env.mask()
        ctx = np.concatenate([hbar_rep, H[bidx, env.cur], env.dynamic_features()], axis=-1)
        q = ctx @ P["dec.ctx_w"] + P["dec.ctx_b"]
        th = np.tanh((q @ KdT) * inv_sqrt_d)
        logp, prob = _masked_log_softmax(arch.clip * th, mask)
        if forced is not None:
            a = forced[:, :, t] if t < forced.shape[2] else np.zeros((B, S), dtype=np.int64)
            a = np.where(env.done | (a < 0), 0, a)
        elif mode == "greedy":
            a = np.argmax(np.where(mask, prob, -1.0), axis=-1)
        else:
            a = _sample(prob, mask, rng)
        a = np.where(env.done, 0, a)
        active = ~env.done
        log_prob += np.where(active, np.take_along_axis(logp, a[..., None], -1)[..., 0], 0.0)
        if keep_tape:
            tape.ctx.append(ctx)
            tape.q.append(q)
            tape.th.append(th)
            tape.prob.append(prob)
            tape.action.append(a)
            tape.cur.append(env.cur.copy())
        env.step(a, mask)
        acts.append(np.where(active, a, -1))
        t += 1
        if t > 2 * n + 2:
            raise RuntimeError("rollout exceeded the 2n+2 step bound")
    actions = np.stack(acts, axis=-1)
    return BatchRollout(list(instances), actions, log_prob, env.cost.copy(), tape)


def _sample(prob, mask, rng):
    cum = np.cumsum(prob, -1)
    u = rng.random(prob.shape[:-1])
    idx = (cum <= u[..., None]).sum(-1)
    N1 = prob.shape[-1]
    # guard against u landing past a cumsum that rounds below 1
    last_valid = N1 - 1 - np.argmax(mask[..., ::-1], axis=-1)
    idx = np.minimum(idx, last_valid)
    bad = ~np.take_along_axis(mask, idx[..., None], -1)[..., 0]
    if bad.any():
        idx = np.where(bad, last_valid, idx)
    return idx


def backward(params: ParamVector, tape: Tape, weights: np.ndarray) -> np.ndarray:
    """Gradient of sum_{b,p} weights[b,p] * log_prob[b,p] w.r.t. the flat params."""
    arch = _arch_of(params)
    P = params.views()
    grad = np.zeros(params.layout.total_len)
    G = params.layout.views(grad)
    w = np.asarray(weights, dtype=np.float64)
    H, Kd = tape.H, tape.Kd
    B, N1, d = H.shape
    dH = np.zeros_like(H)
    if tape.prob:
        prob = np.stack(tape.prob)           # (T, B, S, N1)
        th = np.stack(tape.th)
        q = np.stack(tape.q)                 # (T, B, S, d)
        ctx = np.stack(tape.ctx)             # (T, B, S, 2d+4)
        act = np.stack(tape.action)          # (T, B, S)
        cur = np.stack(tape.cur)
        T, _, S, _ = prob.shape
        gu = -prob
        np.put_along_axis(gu, act[..., None], np.take_along_axis(gu, act[..., None], -1) + 1.0, -1)
        gu *= w[None, :, :, None]
        inv_sqrt_d = 1.0 / math.sqrt(d)
        ds = gu * arch.clip * (1.0 - th * th) * inv_sqrt_d
        dq = ds @ Kd[None]                                   # (T,B,S,d)
        dKd = np.einsum("tbsn,tbsd->bnd", ds, q)
        G["dec.ctx_w"] += _matmul_w_grad(ctx, dq)
        G["dec.ctx_b"] += dq.reshape(-1, d).sum(0)
        dctx = dq @ P["dec.ctx_w"].T
        dH += dctx[..., :d].sum((0, 2))[:, None, :] / N1
        onehot = np.zeros((T, B, S, N1))
        np.put_along_axis(onehot, cur[..., None], 1.0, -1)
        dH += np.einsum("tbsn,tbsd->bnd", onehot, dctx[..., d:2 * d])
        G["dec.key_w"] += _matmul_w_grad(H, dKd)
        dH += dKd @ P["dec.key_w"].T
    _encode_back(P, arch, tape.X, tape.enc_caches, dH, G)
    return grad


def rollout(params: ParamVector, instance: Instance, num_starts: int, mode: str = "sample",
            rng: Optional[np.random.Generator] = None) -> List[Trajectory]:
    return rollout_batch(params, [instance], num_starts, mode, rng).trajectories()[0]


def _pad_actions(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), 1, T), -1, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, 0, :len(s)] = s
    return out


def replay_log_prob(params: ParamVector, trajectories: Sequence[Trajectory],
                    keep_tape: bool = False) -> List[BatchRollout]:
    """Re-run stored trajectories under ``params``, one batch per variant/size group."""
    groups: Dict[tuple, List[int]] = OrderedDict()
    for i, tr in enumerate(trajectories):
        key = (tr.instance.spec, tr.instance.n, tr.instance.linehaul_first)
        groups.setdefault(key, []).append(i)
    out = []
    for idx in groups.values():
        trs = [trajectories[i] for i in idx]
        res = rollout_batch(params, [tr.instance for tr in trs], 1, forced=_pad_actions(
            [tr.actions for tr in trs]), keep_tape=keep_tape)
        res.index = idx
        out.append(res)
    return out


def grad_weighted_logprob(params: ParamVector, trajectories: Sequence[Trajectory],
                          weights: Sequence[float]) -> np.ndarray:
    """Exact gradient of sum_j weights[j] * log p(trajectory_j) by reverse-mode replay."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(trajectories):
        raise ValueError("need one weight per trajectory")
    grad = np.zeros(params.layout.total_len)
    for res in replay_log_prob(params, trajectories, keep_tape=True):
        grad += backward(params, res.tape, weights[res.index][:, None])
    return grad


def total_log_prob(params: ParamVector, trajectories: Sequence[Trajectory],
                   weights: Sequence[float]) -> float:
    """sum_j weights[j] * log p(trajectory_j); the scalar whose gradient is checked."""
    weights = np.asarray(weights, dtype=np.float64)
    total = 0.0
    for res in replay_log_prob(params, trajectories):
        total += float(weights[res.index] @ res.log_prob[:, 0])
    return total
