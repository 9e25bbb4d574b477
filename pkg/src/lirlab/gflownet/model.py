"""Tabular forward policy with a fixed uniform backward policy, sampling and exact evaluation."""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.special import log_softmax

from .env import HyperGrid, RewardSpec, reward

ON_POLICY = "on_policy"
EPSILON_UNIFORM = "epsilon_uniform"


@dataclass
class TabularGFN:
    grid: HyperGrid
    logits: np.ndarray = None    # (n_states, d+1), -inf on invalid actions
    log_z: float = 0.0

    def __post_init__(self):
        mask = self.grid.action_mask()
        if self.logits is None:
            self.logits = np.zeros(mask.shape)
        self.logits = np.where(mask, np.asarray(self.logits, dtype=float), -np.inf)
        self.log_z = float(self.log_z)

    def copy(self) -> "TabularGFN":
        return TabularGFN(self.grid, self.logits.copy(), self.log_z)

    def log_pf(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)

    def log_pb_step(self, nxt) -> np.ndarray:
        """log P_B(parent | nxt) under the uniform backward policy."""
        npar = self.grid.n_parents()[nxt]
        return -np.log(npar)


@dataclass
class TrajectoryBatch:
    states: list            # per trajectory, flat state indices s_0 = 0, ..., s_n = x
    actions: list           # per trajectory, action indices (last is terminate)
    terminal: np.ndarray    # (m,) flat index of x
    lengths: np.ndarray     # (m,) n_i = number of actions including terminate
    log_pf: np.ndarray      # (m,)
    log_pb: np.ndarray      # (m,) log P_B(tau | x)
    log_r: np.ndarray       # (m,)

    @property
    def m(self) -> int:
        return len(self.terminal)

    def scores(self, log_z: float = 0.0) -> np.ndarray:
        """s_i = log P_F(tau) + log Z - log R(x) - log P_B(tau | x)."""
        return self.log_pf + log_z - self.log_r - self.log_pb


def sample_trajectories(gfn: TabularGFN, spec: RewardSpec, m: int, rng,
                        policy: str = ON_POLICY, epsilon: float = 0.0) -> TrajectoryBatch:
    """m trajectories from the origin, all stepped in lockstep until each terminates."""
    if m < 1:
        raise ValueError("batch size must be >= 1")
    if policy not in (ON_POLICY, EPSILON_UNIFORM):
        raise ValueError(f"unknown sampling policy {policy!r}")
    grid = gfn.grid
    mask = grid.action_mask()
    lpf = gfn.log_pf()
    pf = np.exp(lpf)
    strides = grid.strides()
    cur = np.zeros(m, dtype=np.int64)
    active = np.ones(m, dtype=bool)
    states = [[0] for _ in range(m)]
    actions = [[] for _ in range(m)]
    log_pf = np.zeros(m)
    log_pb = np.zeros(m)
    npar = grid.n_parents()
    while active.any():
        idx = np.flatnonzero(active)
        probs = pf[cur[idx]]
        if policy == EPSILON_UNIFORM and epsilon > 0:
            unif = mask[cur[idx]] / mask[cur[idx]].sum(axis=1, keepdims=True)
            probs = (1 - epsilon) * probs + epsilon * unif
        u = rng.random(len(idx))
        act = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
        act = np.minimum(act, grid.stop)
        # guard against round-off picking a masked action
        act = np.where(mask[cur[idx], act], act, grid.stop)
        log_pf[idx] += lpf[cur[idx], act]
        for k, i in enumerate(idx):
            actions[i].append(int(act[k]))
        stop = act == grid.stop
        active[idx[stop]] = False
        go = idx[~stop]
        nxt = cur[go] + strides[act[~stop]]
        log_pb[go] -= np.log(npar[nxt])
        cur[go] = nxt
        for i, s in zip(go, nxt):
            states[i].append(int(s))
    coords = grid.coords()[cur] if grid.n_states <= 10 ** 6 else np.stack(
        np.unravel_index(cur, (grid.H,) * grid.d), axis=1)
    log_r = np.log(reward(spec, grid, coords))
    lengths = np.array([len(a) for a in actions])
    return TrajectoryBatch(states, actions, cur.copy(), lengths, log_pf, log_pb, log_r)


def exact_terminal_distribution(gfn: TabularGFN) -> np.ndarray:
    """Terminal mass reach(s) * P_F(stop | s) by a forward pass over coordinate-sum levels."""
    grid = gfn.grid
    if grid.n_states > 10 ** 6:
        raise ValueError("exact evaluation needs H^d <= 1e6")
    pf = np.exp(gfn.log_pf())
    level = grid.coords().sum(axis=1)
    reach = np.zeros(grid.n_states)
    reach[0] = 1.0
    strides = grid.strides()
    order = np.argsort(level, kind="stable")
    bounds = np.searchsorted(level[order], np.arange(level.max() + 2))
    for L in range(level.max() + 1):
        idx = order[bounds[L]:bounds[L + 1]]
        for i in range(grid.d):
            ok = pf[idx, i] > 0
            np.add.at(reach, idx[ok] + strides[i], reach[idx[ok]] * pf[idx[ok], i])
    return reach * pf[:, grid.stop]


def target_distribution(spec: RewardSpec, grid: HyperGrid) -> np.ndarray:
    r = reward(spec, grid, grid.coords())
    return r / r.sum()


def balanced_policy(spec: RewardSpec, grid: HyperGrid) -> TabularGFN:
    """The forward policy and Z that balance every trajectory under the uniform backward policy.

    State flows F(s) = R(s) + sum_children F(c) P_B(s | c), then
    P_F(stop | s) = R(s)/F(s), P_F(c | s) = F(c) P_B(s | c)/F(s), Z = F(0).
    """
    r = reward(spec, grid, grid.coords())
    npar = grid.n_parents()
    mask = grid.action_mask()
    strides = grid.strides()
    flow = np.zeros(grid.n_states)
    for s in range(grid.n_states - 1, -1, -1):
        f = r[s]
        for i in range(grid.d):
            if mask[s, i]:
                c = s + strides[i]
                f += flow[c] / npar[c]
        flow[s] = f
    logits = np.full(mask.shape, -np.inf)
    logits[:, grid.stop] = np.log(r / flow)
    for i in range(grid.d):
        s = np.flatnonzero(mask[:, i])
        c = s + strides[i]
        logits[s, i] = np.log(flow[c] / npar[c] / flow[s])
    return TabularGFN(grid, logits, math.log(flow[0]))


def all_trajectories(grid: HyperGrid, max_count: int = 200000) -> list:
    """Every (states, actions) pair from the origin; only for tiny grids."""
    out = []
    strides = grid.strides()
    mask = grid.action_mask()
    stack = [([0], [])]
    while stack:
        st, ac = stack.pop()
        s = st[-1]
        out.append((st, ac + [grid.stop]))
        if len(out) > max_count:
            raise ValueError("too many trajectories to enumerate")
        for i in range(grid.d):
            if mask[s, i]:
                stack.append((st + [s + strides[i]], ac + [i]))
    return out


def batch_from(gfn: TabularGFN, spec: RewardSpec, trajs) -> TrajectoryBatch:
    """TrajectoryBatch for given (states, actions) pairs, e.g. a full-coverage batch."""
    grid = gfn.grid
    lpf = gfn.log_pf()
    npar = grid.n_parents()
    coords = grid.coords()
    states = [list(s) for s, _ in trajs]
    actions = [list(a) for _, a in trajs]
    term = np.array([s[-1] for s in states])
    log_pf = np.array([sum(lpf[s, a] for s, a in zip(st, ac)) for st, ac in zip(states, actions)])
    log_pb = np.array([-sum(np.log(npar[s]) for s in st[1:]) for st in states])
    log_r = np.log(reward(spec, grid, coords[term]))
    return TrajectoryBatch(states, actions, term, np.array([len(a) for a in actions]), log_pf,
                           log_pb, log_r)
