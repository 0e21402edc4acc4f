"""Constructive decoding MDP shared by training, inference and the heuristic.

The real work happens in :class:`BatchEnv`, which steps a (batch, starts) grid
of partial solutions at once. The single-instance functions ``reset``,
``feasible_mask`` and ``step`` wrap it with B = P = 1 so there is exactly one
implementation of the masking rules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .vrp_core import FEAS_TOL, Instance

NUM_STATIC = 8
NUM_DYNAMIC = 4


class MaskViolation(ValueError):
    """An action was taken that the feasibility mask does not allow."""


class DeadEnd(RuntimeError):
    """No feasible action while customers remain (generator guarantee broken)."""


@dataclass
class DecodeState:
    current_node: int
    visited: np.ndarray
    load_out: float = 0.0
    load_in: float = 0.0
    route_len: float = 0.0
    clock: float = 0.0
    step: int = 0
    done: bool = False
    cost: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, DecodeState):
            return NotImplemented
        return (
            self.current_node == other.current_node
            and np.array_equal(self.visited, other.visited)
            and (self.load_out, self.load_in, self.route_len, self.clock,
                 self.step, self.done, self.cost)
            == (other.load_out, other.load_in, other.route_len, other.clock,
                other.step, other.done, other.cost)
        )


class BatchEnv:
    """Vectorised environment for instances that share a variant and size."""

    def __init__(self, instances: Sequence[Instance], num_starts: int = 1):
        if not instances:
            raise ValueError("empty instance batch")
        spec, n = instances[0].spec, instances[0].n
        lf = instances[0].linehaul_first
        for inst in instances:
            if inst.spec != spec or inst.n != n or inst.linehaul_first != lf:
                raise ValueError("a batch must share variant, size and precedence rule")
        self.instances = list(instances)
        self.spec = spec
        self.n = n
        self.B = len(instances)
        self.P = int(num_starts)
        self.open = spec.open
        self.linehaul_first = lf
        B = self.B
        self.dist = np.stack([inst.dist for inst in instances])
        dem = np.stack([inst.node_demands() for inst in instances])
        self.dout = np.maximum(dem, 0.0)
        self.din = np.maximum(-dem, 0.0)
        self.is_linehaul = dem > 0
        self.cap = np.array([inst.capacity for inst in instances])
        self.limit = None
        if spec.duration_limit:
            self.limit = np.array([inst.duration_limit for inst in instances])
        if spec.time_windows:
            self.e = np.stack([inst.tw_start for inst in instances])
            self.l = np.stack([inst.tw_end for inst in instances])
            self.s = np.stack([inst.node_service() for inst in instances])
        self.to_depot = self.dist[:, :, 0]
        self._bidx = np.arange(B)[:, None]
        self.reset()

    # state -----------------------------------------------------------------
    def reset(self):
        B, P, N1 = self.B, self.P, self.n + 1
        self.cur = np.zeros((B, P), dtype=np.int64)
        self.visited = np.zeros((B, P, N1), dtype=bool)
        self.load_out = np.zeros((B, P))
        self.load_in = np.zeros((B, P))
        self.route_len = np.zeros((B, P))
        self.clock = np.zeros((B, P))
        self.cost = np.zeros((B, P))
        self.steps = np.zeros((B, P), dtype=np.int64)
        self.done = np.zeros((B, P), dtype=bool)
        return self

    def all_visited(self) -> np.ndarray:
        return self.visited[..., 1:].all(-1)

    def mask(self) -> np.ndarray:
        """(B, P, n+1) boolean mask of allowed next nodes."""
        cap = self.cap[:, None, None] + FEAS_TOL
        d = self.dist[self._bidx, self.cur]
        ok = ~self.visited
        ok &= self.load_out[..., None] + self.dout[:, None, :] <= cap
        ok &= self.load_in[..., None] + self.din[:, None, :] <= cap
        closure = 0.0 if self.open else self.to_depot[:, None, :]
        if self.limit is not None:
            ok &= self.route_len[..., None] + d + closure <= self.limit[:, None, None] + FEAS_TOL
        if self.spec.time_windows:
            start = np.maximum(self.clock[..., None] + d, self.e[:, None, :])
            ok &= start <= self.l[:, None, :] + FEAS_TOL
            if not self.open:
                back = start + self.s[:, None, :] + self.to_depot[:, None, :]
                ok &= back <= self.l[:, None, :1] + FEAS_TOL
        if self.linehaul_first:
            picked = self.load_in[..., None] > 0
            ok &= ~(picked & self.is_linehaul[:, None, :])
        ok[..., 0] = (self.cur != 0) | self.all_visited()
        if self.done.any():
            ok[self.done] = False
            ok[self.done, 0] = True
        if not ok.any(-1).all():
            raise DeadEnd("no feasible node while customers remain unvisited")
        return ok

    def dynamic_features(self) -> np.ndarray:
        B, P = self.B, self.P
        out = np.empty((B, P, NUM_DYNAMIC))
        out[..., 0] = self.cap[:, None] - self.load_out
        out[..., 1] = self.cap[:, None] - self.load_in
        if self.limit is not None:
            out[..., 2] = (self.limit[:, None] - self.route_len) / self.limit[:, None]
        else:
            out[..., 2] = 1.0
        if self.spec.time_windows:
            out[..., 3] = self.clock / self.l[:, :1]
        else:
            out[..., 3] = 0.0
        return out

    def step(self, node: np.ndarray, mask: np.ndarray = None) -> None:
        node = np.asarray(node, dtype=np.int64).reshape(self.B, self.P)
        if mask is None:
            mask = self.mask()
        allowed = np.take_along_axis(mask, node[..., None], -1)[..., 0]
        if not allowed.all():
            raise MaskViolation("action is masked as infeasible")
        active = ~self.done
        travel = self.dist[self._bidx, self.cur, node]
        depot = node == 0
        cust = active & ~depot
        leg = active & (~depot | (not self.open))
        self.cost = np.where(leg, self.cost + travel, self.cost)
        b, p = np.nonzero(cust)
        k = node[b, p]
        self.visited[b, p, k] = True
        self.load_out[b, p] += self.dout[b, k]
        self.load_in[b, p] += self.din[b, k]
        self.route_len[b, p] += travel[b, p]
        if self.spec.time_windows:
            arrive = self.clock[b, p] + travel[b, p]
            self.clock[b, p] = np.maximum(arrive, self.e[b, k]) + self.s[b, k]
        back = active & depot
        for arr in (self.load_out, self.load_in, self.route_len, self.clock):
            arr[back] = 0.0
        self.cur = np.where(active, node, self.cur)
        self.steps += active
        finished = self.all_visited() & (depot | self.open)
        self.done |= active & finished


def static_features(instance: Instance) -> np.ndarray:
    """(n+1, 8) rows of (x, y, demand, e, l, s, open-flag, depot distance / L)."""
    n1 = instance.n + 1
    f = np.zeros((n1, NUM_STATIC))
    f[:, 0:2] = instance.locations
    f[1:, 2] = instance.demands
    if instance.spec.time_windows:
        f[:, 3] = instance.tw_start
        f[:, 4] = instance.tw_end
        f[1:, 5] = instance.service
    if instance.spec.open:
        f[:, 6] = 1.0
    if instance.spec.duration_limit:
        f[:, 7] = instance.dist[0] / instance.duration_limit
    return f


def static_features_batch(instances: Sequence[Instance]) -> np.ndarray:
    return np.stack([static_features(inst) for inst in instances])


# single-instance API -------------------------------------------------------

def _env_from_state(instance: Instance, state: DecodeState) -> BatchEnv:
    env = BatchEnv([instance], 1)
    env.cur[0, 0] = state.current_node
    env.visited[0, 0, 1:] = state.visited
    env.load_out[0, 0] = state.load_out
    env.load_in[0, 0] = state.load_in
    env.route_len[0, 0] = state.route_len
    env.clock[0, 0] = state.clock
    env.cost[0, 0] = state.cost
    env.steps[0, 0] = state.step
    env.done[0, 0] = state.done
    return env


def _state_from_env(env: BatchEnv) -> DecodeState:
    return DecodeState(
        current_node=int(env.cur[0, 0]),
        visited=env.visited[0, 0, 1:].copy(),
        load_out=float(env.load_out[0, 0]),
        load_in=float(env.load_in[0, 0]),
        route_len=float(env.route_len[0, 0]),
        clock=float(env.clock[0, 0]),
        step=int(env.steps[0, 0]),
        done=bool(env.done[0, 0]),
        cost=float(env.cost[0, 0]),
    )


def reset(instance: Instance) -> DecodeState:
    return DecodeState(current_node=0, visited=np.zeros(instance.n, dtype=bool))


def feasible_mask(instance: Instance, state: DecodeState) -> np.ndarray:
    if state.done:
        raise ValueError("episode already finished")
    return _env_from_state(instance, state).mask()[0, 0]


def step(instance: Instance, state: DecodeState, node: int) -> DecodeState:
    env = _env_from_state(instance, state)
    if state.done:
        raise MaskViolation("episode already finished")
    env.step(np.array([[node]]))
    return _state_from_env(env)


def dynamic_features(instance: Instance, state: DecodeState) -> np.ndarray:
    return _env_from_state(instance, state).dynamic_features()[0, 0]
