"""Training loop for tabular GFlowNets and the exact evaluation metrics."""

from dataclasses import dataclass, field
import math

import numpy as np

from ..lir import Adam
from ..rng import make_rng
from .env import HyperGrid, RewardSpec, mode_mask
from .losses import CLAMP, loss_and_grad, uses_log_z
from .model import (ON_POLICY, TabularGFN, exact_terminal_distribution, sample_trajectories,
                    target_distribution)


@dataclass
class TrainConfig:
    loss: str = "modtb"
    iters: int = 3000
    batch: int = 64
    rate: float = 0.01
    log_z_multiplier: float = 100.0
    clamp: float = CLAMP
    policy: str = ON_POLICY
    epsilon: float = 0.0
    eval_every: int = 100
    seed: int = 0


@dataclass
class TrainTrace:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)   # (iter, loss, l1, jsd, mode_coverage)
    visited: set = field(default_factory=set)
    gfn: TabularGFN = None


def score_grad(gfn: TabularGFN, batch, w) -> np.ndarray:
    """sum_i w_i d s_i / d logits, where d s_i/d logits[s, .] = onehot(a) - P_F(. | s) per step."""
    grid = gfn.grid
    pf = np.exp(gfn.log_pf())
    sa = np.zeros_like(pf)
    visits = np.zeros(grid.n_states)
    for wi, st, ac in zip(w, batch.states, batch.actions):
        if wi == 0:
            continue
        np.add.at(sa, (np.asarray(st), np.asarray(ac)), wi)
        np.add.at(visits, np.asarray(st), wi)
    return sa - visits[:, None] * pf


def js_divergence(p, q) -> float:
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p > 0, p * np.log(p / m), 0.0).sum()
        b = np.where(q > 0, q * np.log(q / m), 0.0).sum()
    return float(0.5 * a + 0.5 * b)


def eval_metrics(gfn: TabularGFN, spec: RewardSpec, visited=None):
    """(l1, jsd, mode_coverage) against p* proportional to the floored reward.

    Coverage is the fraction of modes in ``visited`` (terminal states seen in
    training samples); None when no visit set is given.
    """
    p = exact_terminal_distribution(gfn)
    target = target_distribution(spec, gfn.grid)
    l1 = float(np.abs(p - target).sum())
    cov = None
    if visited is not None:
        modes = np.flatnonzero(mode_mask(spec, gfn.grid))
        cov = float(np.isin(modes, list(visited)).mean()) if modes.size else 1.0
    return l1, js_divergence(p, target), cov


def train(gfn: TabularGFN, spec: RewardSpec, cfg: TrainConfig = None) -> TrainTrace:
    """Adam on the forward logits (and log Z for TB losses) from on-policy batches."""
    cfg = cfg or TrainConfig()
    gfn = gfn.copy()
    rng = make_rng(cfg.seed, 2)
    finite = np.isfinite(gfn.logits)
    opt = Adam(int(finite.sum()) + 1)
    lr = np.full(opt.m.size, cfg.rate)
    lr[-1] = cfg.rate * cfg.log_z_multiplier
    train_z = uses_log_z(cfg.loss)
    trace = TrainTrace()
    for it in range(cfg.iters):
        batch = sample_trajectories(gfn, spec, cfg.batch, rng, cfg.policy, cfg.epsilon)
        trace.visited.update(int(x) for x in batch.terminal)
        value, w = loss_and_grad(cfg.loss, batch, gfn.log_z, cfg.clamp)
        trace.losses.append(value)
        g = np.append(score_grad(gfn, batch, w)[finite], w.sum() if train_z else 0.0)
        x = opt.step(np.append(gfn.logits[finite], gfn.log_z), g, lr)
        gfn.logits[finite] = x[:-1]
        gfn.log_z = float(x[-1])
        if cfg.eval_every and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iters):
            l1, jsd, cov = eval_metrics(gfn, spec, trace.visited)
            trace.evals.append((it + 1, value, l1, jsd, cov))
    trace.gfn = gfn
    return trace


def moving_average(x, window: int = 100) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if len(x) < window:
        return np.array([x.mean()]) if len(x) else x
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[window:] - c[:-window]) / window
