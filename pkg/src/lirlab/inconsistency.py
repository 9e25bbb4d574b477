"""Observational incompatibility, structural deficiency and gamma-inconsistency.

The inner problem ``inf_mu OInc(mu) + gamma * SDef(mu)`` is solved over the
product domain of the attended variables, with ``mu`` parameterized as a
masked softmax of logits and descended with Adam-style moments.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .pdg import GAUSSIAN_MEAN, Focus, JointTable, ParametricPDG, PDGError, conditional, marginal

log = logging.getLogger(__name__)

ZERO_MASS = 1e-12  # mu mass below this on a p=0 cell counts as absent
HARD_TOL = 1e-9  # KL slack for an infinitely-weighted arc to count as satisfied


class InfeasibleError(PDGError):
    """Every joint distribution has infinite incompatibility."""


@dataclass
class InnerSolverConfig:
    max_iters: int = 300
    step_size: float = 0.05
    tolerance: float = 1e-7
    warm_start: Optional[JointTable] = None  # a JointTable, or a previous InconsistencyResult
    exact: bool = True  # closed forms: Gibbs when beta == gamma * alpha, product when the focus is a network
    b1: float = 0.9
    b2: float = 0.999
    method: str = "adam"  # or "lbfgs" for high-precision solves


    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.method not in ("adam", "lbfgs"):
            raise ValueError(f"unknown inner method {self.method!r}")

    def warm(self, mu, iters: int = 20) -> "InnerSolverConfig":
        return InnerSolverConfig(iters, self.step_size, self.tolerance, mu, self.exact,
                                 self.b1, self.b2, self.method)


@dataclass
class InconsistencyResult:
    value: float
    mu_star: JointTable
    converged: bool
    iterations_used: int
    grad_norm: float = 0.0
    state: Optional[dict] = None  # logits and optimizer moments, for warm restarts


def _weights(pdg: ParametricPDG, w, attr: str) -> dict:
    if w is None:
        return {a.id: getattr(a, attr) for a in pdg.arcs}
    if isinstance(w, Focus):
        w = getattr(w, attr)
    return {a.id: float(w.get(a.id, 0.0)) for a in pdg.arcs}


def _xlogy_ratio(num: np.ndarray, den_log: np.ndarray) -> np.ndarray:
    """Elementwise num * (log num - den_log) with 0 log 0 = 0."""
    out = np.zeros_like(num)
    pos = num > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out[pos] = num[pos] * (np.log(num[pos]) - den_log[pos])
    return out


def arc_kl(pdg: ParametricPDG, mu: JointTable, aid) -> float:
    """D( mu(Tgt, Src) || p(Tgt | Src) mu(Src) ) for one arc, in nats."""
    arc = pdg.arc(aid)
    if arc.cpd.kind == GAUSSIAN_MEAN:
        raise PDGError(f"arc {aid!r} is a density arc; score it with a reduction harness")
    joint = marginal(mu, arc.sources + arc.targets).probs.reshape(arc.cpd.n_src, arc.cpd.n_tgt)
    src = joint.sum(axis=1, keepdims=True)
    p = arc.cpd.table()
    if np.any((p == 0) & (joint >= ZERO_MASS)):
        return math.inf
    ok = (joint > 0) & (p > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(ok, joint * (np.log(np.where(ok, joint, 1.0))
                                      - np.log(np.where(ok, src, 1.0))
                                      - np.log(np.where(ok, p, 1.0))), 0.0)
    return float(max(terms.sum(), 0.0))


def _check_scope(pdg, mu, arcs):
    need = {v for a in arcs for v in pdg.arc(a).variables()}
    missing = need - set(mu.scope)
    if missing:
        raise PDGError(f"joint table scope is missing variables {sorted(missing)}")


def oinc(pdg: ParametricPDG, mu: JointTable, beta=None) -> float:
    """Beta-weighted sum of per-arc relative entropies (nats).

    ``beta`` is a per-arc mapping or a Focus; arcs absent from it are ignored.
    An infinite weight contributes 0 when its arc is satisfied and +inf otherwise.
    """
    beta = _weights(pdg, beta, "beta")
    active = [a for a, b in beta.items() if b != 0]
    _check_scope(pdg, mu, active)
    total = 0.0
    for aid in active:
        b = beta[aid]
        kl = arc_kl(pdg, mu, aid)
        if math.isinf(b):
            if b < 0:
                raise PDGError(f"arc {aid!r}: beta = -inf is not supported")
            term = 0.0 if kl <= HARD_TOL else math.inf
        elif kl == 0.0:
            term = 0.0
        else:
            term = b * kl
        total += term
    return total


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float).ravel()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def conditional_entropy(mu: JointTable, targets, sources=()) -> float:
    h_joint = entropy(marginal(mu, tuple(sources) + tuple(targets)).probs)
    h_src = entropy(marginal(mu, tuple(sources)).probs) if sources else 0.0
    return h_joint - h_src


def sdef(pdg: ParametricPDG, mu: JointTable, alpha=None) -> float:
    """-H(mu) + sum_a alpha_a H_mu(Tgt a | Src a)."""
    alpha = _weights(pdg, alpha, "alpha")
    active = [a for a, w in alpha.items() if w != 0]
    _check_scope(pdg, mu, active)
    total = -entropy(mu.probs)
    for aid in active:
        arc = pdg.arc(aid)
        total += alpha[aid] * conditional_entropy(mu, arc.targets, arc.sources)
    return total


def score(pdg: ParametricPDG, mu: JointTable, focus: Focus) -> float:
    """OInc + gamma * SDef at a given joint."""
    val = oinc(pdg, mu, focus)
    if focus.gamma:
        val += focus.gamma * sdef(pdg, mu, focus)
    return val


# -- inner problem -------------------------------------------------------------

def _broadcast(arr: np.ndarray, arc_vars, arc_sizes, scope) -> np.ndarray:
    """Reshape a table over ``arc_vars`` so it broadcasts against a tensor over ``scope``."""
    t = arr.reshape(arc_sizes)
    pos = [scope.index(v) for v in arc_vars]
    order = np.argsort(pos)
    t = np.transpose(t, order)
    shape = [1] * len(scope)
    for v, n in zip(arc_vars, arc_sizes):
        shape[scope.index(v)] = n
    return t.reshape(shape)


class _Term:
    __slots__ = ("aid", "beta", "alpha", "logp", "keep_st", "keep_s", "hard")

    def __init__(self, aid, beta, alpha, logp, keep_st, keep_s, hard):
        self.aid, self.beta, self.alpha, self.logp = aid, beta, alpha, logp
        self.keep_st, self.keep_s, self.hard = keep_st, keep_s, hard


class InnerProblem:
    """Compiled inner objective for one (pdg, focus) pair."""

    def __init__(self, pdg: ParametricPDG, focus: Focus):
        self.pdg = pdg
        self.gamma = float(focus.gamma)
        self.focus = focus
        self.attended = attended = [a for a in pdg.arcs if focus.attends(a.id)]
        involved = {v for a in attended for v in a.variables()}
        self.scope = [v for v in pdg.var_ids if v in involved]
        self.pruned = [v for v in pdg.var_ids if v not in involved]
        self.shape = tuple(pdg.sizes(self.scope))
        nd = len(self.scope)
        self.terms = []
        allowed = np.ones(self.shape, dtype=bool)
        pinned = []
        for a in attended:
            b, al = focus.b(a.id), focus.a(a.id)
            if a.cpd.kind == GAUSSIAN_MEAN:
                raise PDGError(f"arc {a.id!r} is a density arc; the discrete solver cannot score it")
            if math.isnan(b) or b == -math.inf:
                raise PDGError(f"arc {a.id!r}: beta must be finite or +inf")
            if self.gamma > 0 and b < self.gamma * al:
                raise PDGError(
                    f"arc {a.id!r}: beta={b} < gamma*alpha={self.gamma * al}; the infimum may "
                    "not be attained in this regime")
            p = a.cpd.table()
            with np.errstate(divide="ignore"):
                logp = _broadcast(np.log(p), a.variables(),
                                  pdg.sizes(a.sources) + pdg.sizes(a.targets), self.scope)
            st = {self.scope.index(v) for v in a.variables()}
            s = {self.scope.index(v) for v in a.sources}
            keep_st = tuple(i for i in range(nd) if i not in st)
            keep_s = tuple(i for i in range(nd) if i not in s)
            hard = math.isinf(b)
            if hard:
                if np.all((p < 1e-15) | (p > 1 - 1e-12)):
                    allowed &= logp > -1e-12
                elif not a.sources:
                    pinned.append(a)
                else:
                    raise PDGError(
                        f"arc {a.id!r}: infinite beta on a non-deterministic conditional cpd is not "
                        "supported by the inner solver")
            elif b > 0:
                allowed &= np.isfinite(logp)
            self.terms.append(_Term(a.id, b, al, logp, keep_st, keep_s, hard))
        seen = [v for a in pinned for v in a.targets]
        if len(seen) != len(set(seen)):
            raise PDGError("non-deterministic unconditional arcs with infinite beta must have "
                           "disjoint targets")
        for t in self.terms:
            if t.beta < 0 and np.any(allowed & ~np.isfinite(t.logp)):
                raise PDGError(f"arc {t.aid!r}: negative beta on a cpd with zero cells")
        self.pin = pinned
        self._layout(allowed)

    def _layout(self, allowed):
        nd = len(self.scope)
        pin_axes = sorted(self.scope.index(v) for a in self.pin for v in a.targets)
        rest = [i for i in range(nd) if i not in pin_axes]
        self.perm = pin_axes + rest
        self.inv_perm = np.argsort(self.perm)
        n_groups = int(np.prod([self.shape[i] for i in pin_axes], dtype=np.int64))
        n_rest = int(np.prod([self.shape[i] for i in rest], dtype=np.int64))
        self.grid = (n_groups, n_rest)
        # product of the pinned tables, laid out over pin_axes in scope order
        w = np.ones([self.shape[i] for i in pin_axes])
        for a in self.pin:
            axes = [pin_axes.index(self.scope.index(v)) for v in a.targets]
            t = a.cpd.table()[0].reshape(self.pdg.sizes(a.targets))
            order = np.argsort(axes)
            shape = [1] * len(pin_axes)
            for k in axes:
                shape[k] = self.shape[pin_axes[k]]
            w = w * np.transpose(t, order).reshape(shape)
        w = w.ravel()
        mask = np.transpose(allowed, self.perm).reshape(self.grid)
        mask &= (w > 0)[:, None]
        live = w > 0
        if not mask.any() or np.any(live & ~mask.any(axis=1)):
            raise InfeasibleError(
                "no joint distribution has finite incompatibility (conflicting zero-support cpds)")
        self.group_w = w
        with np.errstate(divide="ignore"):
            self.log_w = np.log(w)
        self.mask = mask

    # layout <-> tensor
    def to_tensor(self, arr2d):
        shaped = arr2d.reshape([self.shape[i] for i in self.perm])
        return np.transpose(shaped, self.inv_perm)

    def from_tensor(self, t):
        return np.transpose(t, self.perm).reshape(self.grid)

    def log_mu(self, z):
        zz = np.where(self.mask, z, -np.inf)
        m = zz.max(axis=1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        with np.errstate(divide="ignore"):
            lse = np.log(np.exp(zz - m).sum(axis=1, keepdims=True)) + m
        out = zz - np.where(np.isfinite(lse), lse, 0.0) + self.log_w[:, None]
        return np.where(self.mask, out, -np.inf)

    def objective(self, z, want_grad=True):
        """Value and gradient w.r.t. the layout logits ``z``."""
        lm2 = self.log_mu(z)
        mu2 = np.exp(lm2)
        lm = self.to_tensor(lm2)
        mu = self.to_tensor(mu2)
        pos = mu > 0
        g = np.zeros(self.shape)
        val = 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            for t in self.terms:
                mst = mu.sum(axis=t.keep_st, keepdims=True) if t.keep_st else mu
                ms = mu.sum(axis=t.keep_s, keepdims=True) if t.keep_s else np.ones_like(mu)
                lc = np.log(mst) - np.log(ms)
                coef = 0.0
                if not t.hard and t.beta != 0:
                    d = np.where(pos, lc - t.logp, 0.0)
                    val += t.beta * float((mu * d).sum())
                    g += t.beta * d
                if self.gamma and t.alpha:
                    coef = self.gamma * t.alpha
                    lcz = np.where(pos, lc, 0.0)
                    val -= coef * float((mu * lcz).sum())
                    g -= coef * lcz
            if self.gamma:
                lmz = np.where(pos, lm, 0.0)
                val += self.gamma * float((mu * lmz).sum())
                g += self.gamma * lmz
        if not want_grad:
            return val, None
        g2 = self.from_tensor(g)
        mean = (mu2 * g2).sum(axis=1, keepdims=True) / np.where(self.group_w > 0, self.group_w,
                                                                  1.0)[:, None]
        grad = np.where(self.mask, mu2 * (g2 - mean), 0.0)
        return val, grad

    def init_logits(self, warm: Optional[JointTable]):
        z = np.zeros(self.grid)
        if warm is not None:
            sub = marginal(warm, self.scope) if self.scope else None
            if sub is not None and tuple(sub.sizes) == self.shape:
                with np.errstate(divide="ignore"):
                    lt = np.log(np.maximum(sub.tensor(), 1e-300))
                z = self.from_tensor(lt).copy()
                z -= np.where(self.mask, z, -np.inf).max(axis=1, keepdims=True).clip(-1e300)
        return np.where(self.mask, z, 0.0)

    def gibbs(self):
        """Closed-form minimizer when every attended arc has beta == gamma * alpha."""
        if self.gamma <= 0 or self.pin:
            return None
        acc = np.zeros(self.shape)
        for t in self.terms:
            if t.hard or not math.isclose(t.beta, self.gamma * t.alpha, rel_tol=1e-12, abs_tol=1e-15):
                return None
            if t.beta:
                with np.errstate(invalid="ignore"):
                    acc = acc + (t.beta / self.gamma) * t.logp
        acc = np.where(np.isfinite(acc), acc, -np.inf)
        m = acc.max()
        if not np.isfinite(m):
            raise InfeasibleError("factor product is identically zero")
        w = np.exp(acc - m)
        return w / w.sum()

    def network_joint(self, warm: Optional[JointTable] = None) -> Optional[np.ndarray]:
        """Exact minimizer when gamma = 0 and the attended arcs form a Bayesian network.

        If every attended arc has beta > 0, no variable is the target of two
        arcs and the arcs are acyclic, then the joint that draws the source-free
        variables from ``warm`` (uniform without one) and every other variable
        from its arc matches each cpd exactly, so the value is 0.
        """
        if self.gamma != 0 or not self.attended or any(self.focus.b(a.id) <= 0 for a in self.attended):
            return None
        owner = {}
        for a in self.attended:
            for v in a.targets:
                if v in owner:
                    return None
                owner[v] = a
        order, done = [], set(v for v in self.scope if v not in owner)
        pending = list(self.attended)
        while pending:
            ready = [a for a in pending if all(v in done for v in a.sources)]
            if not ready:
                return None  # a directed cycle
            for a in ready:
                order.append(a)
                done.update(a.targets)
                pending.remove(a)
        roots = [v for v in self.scope if v not in owner]
        pdg = self.pdg
        if roots and warm is not None and set(warm.scope) == set(pdg.var_ids):
            r = marginal(warm, roots).probs
        else:
            r = np.full(int(np.prod(pdg.sizes(roots), dtype=np.int64)), 1.0)
        t = _broadcast(r / r.sum(), roots, pdg.sizes(roots), self.scope) if roots \
            else np.ones([1] * len(self.scope))
        for a in order:
            t = t * _broadcast(a.cpd.table(), a.variables(), pdg.sizes(a.sources) + pdg.sizes(a.targets),
                               self.scope)
        t = np.broadcast_to(t, self.shape)
        return t / t.sum()

    def full_joint(self, mu_kept: np.ndarray, warm: Optional[JointTable] = None) -> JointTable:
        """Extend a joint over the kept scope to the whole PDG.

        Pruned variables are uniform given the kept ones. With gamma = 0 any
        extension scores the same, so a warm joint's conditional
        warm(pruned | kept) is kept instead; later warm starts then still see
        what earlier foci learned about the pruned variables.
        """
        pdg = self.pdg
        if not self.pruned:
            t = mu_kept.reshape(self.shape)
        else:
            extra = pdg.sizes(self.pruned)
            n_extra = int(np.prod(extra, dtype=np.int64))
            if self.gamma == 0 and warm is not None and set(warm.scope) == set(pdg.var_ids):
                cond = conditional(warm, self.pruned, self.scope).reshape(self.shape + tuple(extra))
            else:
                cond = np.full(self.shape + tuple(extra), 1.0 / n_extra)
            t = mu_kept.reshape(self.shape + (1,) * len(extra)) * cond
        cur = self.scope + self.pruned
        order = [cur.index(v) for v in pdg.var_ids]
        t = np.transpose(t, order)
        p = np.clip(t.ravel(), 0.0, None)
        return JointTable(pdg.var_ids, pdg.sizes(pdg.var_ids), p / p.sum())


def solve_inconsistency(pdg: ParametricPDG, focus: Focus,
                        cfg: Optional[InnerSolverConfig] = None) -> InconsistencyResult:
    """gamma-inconsistency of the attention-weighted PDG and its optimal joint."""
    cfg = cfg or InnerSolverConfig()
    prob = InnerProblem(pdg, focus)
    warm = cfg.warm_start
    st = warm.state if isinstance(warm, InconsistencyResult) else None
    if isinstance(warm, InconsistencyResult):
        warm = warm.mu_star
    if cfg.exact:
        mu_g = prob.gibbs()
        if mu_g is None:
            mu_g = prob.network_joint(warm)
        if mu_g is not None:
            mu_star = prob.full_joint(mu_g, warm)
            return InconsistencyResult(score(pdg, mu_star, focus), mu_star, True, 0, 0.0)
    if st is not None and st["scope"] == prob.scope and st["perm"] == list(prob.perm) \
            and st["z"].shape == prob.grid \
            and np.array_equal(st["mask"], prob.mask):
        # same layout: resume from the previous logits and Adam moments
        z, m, v, t0 = st["z"].copy(), st["m"].copy(), st["v"].copy(), st["t"]
    else:
        z = prob.init_logits(warm)
        m, v, t0 = np.zeros_like(z), np.zeros_like(z), 0
    signed = any(t.beta < 0 for t in prob.terms)
    history = []
    gnorm = math.inf
    it = 0
    converged = False
    if prob.mask.sum() == prob.grid[0]:
        # a single allowed cell per group: mu is fully determined
        converged, gnorm = True, 0.0
    elif cfg.method == "lbfgs" and not signed:
        z, it, gnorm = _lbfgs(prob, z, cfg)
        converged = gnorm < cfg.tolerance
        t0 = -it  # no Adam moments were accumulated
    else:
        for it in range(1, cfg.max_iters + 1):
            val, grad = prob.objective(z)
            gnorm = float(np.sqrt((grad * grad).sum()))
            history.append(val)
            if gnorm < cfg.tolerance:
                converged = True
                it -= 1
                break
            m = cfg.b1 * m + (1 - cfg.b1) * grad
            v = cfg.b2 * v + (1 - cfg.b2) * grad * grad
            mh = m / (1 - cfg.b1 ** (t0 + it))
            vh = v / (1 - cfg.b2 ** (t0 + it))
            z = z - cfg.step_size * mh / (np.sqrt(vh) + 1e-12)
        else:
            _, grad = prob.objective(z)
            gnorm = float(np.sqrt((grad * grad).sum()))
            converged = gnorm < cfg.tolerance
    if signed and len(history) >= 10:
        tail = history[-10:]
        if max(tail) - min(tail) > max(cfg.tolerance, 1e-12):
            converged = False
    mu_kept = prob.to_tensor(np.exp(prob.log_mu(z)))
    mu_star = prob.full_joint(mu_kept, warm if isinstance(warm, JointTable) else None)
    value = score(pdg, mu_star, focus)
    if not math.isfinite(value):
        raise InfeasibleError("objective is not finite at the solver's joint")
    state = {"z": z, "m": m, "v": v, "t": t0 + it, "mask": prob.mask, "scope": list(prob.scope),
             "perm": list(prob.perm)}
    return InconsistencyResult(value, mu_star, converged, it, gnorm, state)


def _lbfgs(prob: InnerProblem, z0: np.ndarray, cfg: InnerSolverConfig, restarts: int = 4):
    """Quasi-Newton descent on the logits.

    Logit descent can stall with cells pushed towards zero mass (their logit
    gradient vanishes), so each restart blends a little uniform mass back in
    and keeps the best joint found.
    """
    from scipy.optimize import minimize

    idx = np.flatnonzero(prob.mask)
    base = np.zeros(prob.grid)

    def fun(x):
        z = base.copy()
        z.flat[idx] = x
        val, grad = prob.objective(z)
        return val, grad.flat[idx]

    best, best_val, nit = z0.flat[idx].copy(), math.inf, 0
    x0 = best
    for r in range(restarts + 1):
        res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                       options={"maxiter": cfg.max_iters, "gtol": cfg.tolerance, "ftol": 0.0,
                                "maxcor": 30})
        nit += int(res.nit)
        improved = res.fun < best_val - 1e-12
        if res.fun < best_val:
            best, best_val = res.x, float(res.fun)
        if r and not improved:
            break
        z = base.copy()
        z.flat[idx] = best
        mu = np.exp(prob.log_mu(z))
        live = np.maximum(prob.mask.sum(axis=1, keepdims=True), 1)
        mixed = 0.99 * mu + 0.01 * np.where(prob.mask, prob.group_w[:, None] / live, 0.0)
        with np.errstate(divide="ignore"):
            x0 = np.log(mixed.flat[idx])
    z = base.copy()
    z.flat[idx] = best
    _, grad = prob.objective(z)
    return z, nit, float(np.sqrt((grad * grad).sum()))


def envelope_grad(pdg: ParametricPDG, focus: Focus, mu_star: JointTable,
                  respect_chi: bool = True) -> dict:
    """Partial gradient of OInc + gamma*SDef w.r.t. every learnable arc's params at fixed mu.

    By the envelope theorem this is the gradient of the inconsistency when
    ``mu_star`` is the inner optimum. Arcs without control get zeros unless
    ``respect_chi`` is False.
    """
    out = {}
    for a in pdg.arcs:
        if not a.cpd.learnable:
            continue
        g = np.zeros(a.cpd.params.size)
        b = focus.b(a.id)
        controlled = focus.c(a.id) > 0 or (a.id in focus.chi_params
                                           and np.any(np.asarray(focus.chi_params[a.id]) > 0))
        if b != 0 and math.isfinite(b) and (controlled or not respect_chi):
            joint = marginal(mu_star, a.sources + a.targets).probs.reshape(a.cpd.n_src, a.cpd.n_tgt)
            src = joint.sum(axis=1, keepdims=True)
            g = a.cpd.param_grad(-b * (joint - src * a.cpd.table()))
        out[a.id] = g
    return out
