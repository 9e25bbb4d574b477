"""Trajectory balance and log-partition variance losses, plain and length-normalized.

Each loss is a function of per-trajectory scores s_i; ``loss_and_grad``
returns the value and dL/ds_i so that training can chain through the
tabular parameters.
"""

import numpy as np

TB, MODTB, LPV, MODLPV = "tb", "modtb", "lpv", "modlpv"
LOSSES = (TB, MODTB, LPV, MODLPV)
CLAMP = 100.0


def _check(kind):
    kind = kind.lower()
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")
    return kind


def uses_log_z(kind) -> bool:
    return _check(kind) in (TB, MODTB)


def loss_and_grad(kind: str, batch, log_z: float = 0.0, clamp: float = None):
    """(loss, dL/ds) with each per-trajectory term capped at ``clamp`` (capped terms get no gradient)."""
    kind = _check(kind)
    m = batch.m
    if kind in (LPV, MODLPV) and m < 2:
        raise ValueError("variance losses need at least 2 trajectories")
    s = batch.scores(log_z if kind in (TB, MODTB) else 0.0)
    n = batch.lengths.astype(float) if kind in (MODTB, MODLPV) else np.ones(m)
    r = s if kind in (TB, MODTB) else s - s.mean()
    terms = r * r / n
    live = np.ones(m, dtype=bool) if clamp is None else terms <= clamp
    value = float(np.where(live, terms, clamp if clamp is not None else 0.0).sum() / m)
    g = np.where(live, 2.0 * r / n, 0.0) / m
    if kind in (LPV, MODLPV):
        g = g - g.sum() / m      # through the batch mean
    return value, g


def loss_tb(batch, log_z: float) -> float:
    """(1/m) sum s_i^2."""
    return loss_and_grad(TB, batch, log_z)[0]


def loss_modtb(batch, log_z: float) -> float:
    """(1/m) sum s_i^2 / n_i."""
    return loss_and_grad(MODTB, batch, log_z)[0]


def loss_lpv(batch) -> float:
    """(1/m) sum (s_i - mean s)^2 with log Z left out of s."""
    return loss_and_grad(LPV, batch)[0]


def loss_modlpv(batch) -> float:
    """(1/m) sum (s_i - mean s)^2 / n_i."""
    return loss_and_grad(MODLPV, batch)[0]


def loss(kind: str, batch, log_z: float = 0.0) -> float:
    return loss_and_grad(kind, batch, log_z)[0]
