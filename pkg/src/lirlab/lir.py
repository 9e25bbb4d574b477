"""Local inconsistency resolution: refocus, inner solve, and parameter flow."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .inconsistency import (InconsistencyResult, InnerSolverConfig, envelope_grad,
                            solve_inconsistency)
from .pdg import LEARNABLE, Focus, JointTable, ParametricPDG, PDGError
from .rng import make_rng

log = logging.getLogger(__name__)

EULER, RK4, ADAPTIVE = "Euler", "RK4", "AdaptiveFirstOrder"
INTEGRATORS = (EULER, RK4, ADAPTIVE)
LOGIT_FLOOR = -745.0


def analysis_config() -> InnerSolverConfig:
    """High-precision cold solve used for the initial/final metrics of a run."""
    return InnerSolverConfig(max_iters=2000, tolerance=1e-10, method="lbfgs")


class StepFailure(RuntimeError):
    pass


@dataclass
class OdeConfig:
    integrator: str = ADAPTIVE
    outer_iters_per_step: int = 10
    step_scale: float = 0.05
    full_control_tol: float = 1e-8
    full_control_max_iters: int = 5000

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {self.integrator!r}; expected one of {INTEGRATORS}")
        if self.outer_iters_per_step < 1:
            raise ValueError("outer_iters_per_step must be >= 1")
        if not self.step_scale > 0:
            raise ValueError("step_scale must be positive")


# -- generic integrators -------------------------------------------------------

def euler_step(field_fn: Callable, x: np.ndarray, h: float) -> np.ndarray:
    return x + h * field_fn(x)


def rk4_step(field_fn: Callable, x: np.ndarray, h: float) -> np.ndarray:
    k1 = field_fn(x)
    k2 = field_fn(x + 0.5 * h * k1)
    k3 = field_fn(x + 0.5 * h * k2)
    k4 = field_fn(x + h * k3)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


class Adam:
    """Plain Adam on a flat vector; ``lr`` may be a vector (per-parameter control)."""

    def __init__(self, n: int, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.b1, self.b2, self.eps = b1, b2, eps

    def step(self, x, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return x - lr * mh / (np.sqrt(vh) + self.eps)


def integrate(field_fn: Callable, x0, h: float, n: int, method: str = RK4) -> np.ndarray:
    """n fixed steps of size h along dx/dt = field_fn(x)."""
    x = np.asarray(x0, dtype=float).copy()
    step = {EULER: euler_step, RK4: rk4_step}[method]
    for _ in range(n):
        x = step(field_fn, x, h)
    return x


# -- focus streams -------------------------------------------------------------

@dataclass
class RefocusStrategy:
    """How to pick the next focus.

    kind is one of FixedCycle, Uniform, Partial, Hub, SmoothExponential, Custom.
    Generated foci give every arc control 1 (so the ODE step size alone sets
    the learning rate) and gamma 0.
    """

    kind: str = "Uniform"
    seed: int = 0
    fraction: float = 0.5
    rate: float = 1.0
    foci: Sequence[Focus] = ()
    callback: Optional[Callable] = None  # callback(t, pdg, rng) -> Focus
    gamma: float = 0.0

    def __post_init__(self):
        aliases = {"fixed": "FixedCycle", "fixedcycle": "FixedCycle", "uniform": "Uniform",
                   "partial": "Partial", "hub": "Hub", "smooth": "SmoothExponential",
                   "smoothexponential": "SmoothExponential", "custom": "Custom"}
        self.kind = aliases.get(self.kind.lower(), self.kind)
        if self.kind not in ("FixedCycle", "Uniform", "Partial", "Hub", "SmoothExponential",
                             "Custom"):
            raise ValueError(f"unknown refocus strategy {self.kind!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError("Partial fraction must lie in (0, 1]")
        if not self.rate > 0:
            raise ValueError("SmoothExponential rate must be positive")
        if self.kind == "FixedCycle" and not self.foci:
            raise ValueError("FixedCycle needs at least one focus")
        if self.kind == "Custom" and self.callback is None:
            raise ValueError("Custom strategy needs a callback")


def _mask_focus(pdg, beta: dict, gamma: float) -> Focus:
    ids = pdg.arc_ids
    return Focus(alpha={a: 1.0 for a in ids}, beta={a: float(beta.get(a, 0.0)) for a in ids},
                 gamma=gamma, chi={a: 1.0 for a in ids})


def make_refocus(kind, pdg: ParametricPDG, seed: int = 0, **kw) -> Iterator[Focus]:
    """Infinite, seed-deterministic stream of foci for ``pdg``."""
    strat = kind if isinstance(kind, RefocusStrategy) else RefocusStrategy(kind, seed, **kw)
    ids = pdg.arc_ids
    if not ids:
        raise PDGError("refocus needs a PDG with at least one arc")
    rng = make_rng(strat.seed, 1)
    g = strat.gamma
    t = 0
    while True:
        if strat.kind == "FixedCycle":
            yield strat.foci[t % len(strat.foci)]
        elif strat.kind == "Uniform":
            yield _mask_focus(pdg, {a: 1.0 for a in ids}, g)
        elif strat.kind == "Partial":
            k = max(1, int(math.floor(len(ids) * strat.fraction)))
            pick = rng.choice(len(ids), size=k, replace=False)
            yield _mask_focus(pdg, {ids[i]: 1.0 for i in pick}, g)
        elif strat.kind == "Hub":
            node = pdg.var_ids[int(rng.integers(len(pdg.var_ids)))]
            yield _mask_focus(pdg, {a.id: 1.0 for a in pdg.arcs if node in a.variables()}, g)
        elif strat.kind == "SmoothExponential":
            w = rng.exponential(1.0 / strat.rate, size=len(ids))
            yield _mask_focus(pdg, dict(zip(ids, w)), g)
        else:
            yield strat.callback(t, pdg, rng)
        t += 1


# -- LIR step ------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    focus: Focus
    value: float
    param_hash: str
    mu_star: JointTable
    seconds: float
    inner_iters: int = 0
    full_value: Optional[float] = None
    full_mu: Optional[JointTable] = None


@dataclass
class LirTrace:
    steps: list = field(default_factory=list)
    init_value: Optional[float] = None
    init_mu: Optional[JointTable] = None
    final_value: Optional[float] = None
    final_mu: Optional[JointTable] = None
    aborted: bool = False
    error: str = ""
    pdg: Optional[ParametricPDG] = None

    @property
    def inner_iters(self) -> int:
        return sum(r.inner_iters for r in self.steps)

    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.steps])


class _Flow:
    """Flattened view of the parameters under finite control, plus the gradient field."""

    def __init__(self, pdg, focus, arcs, inner_cfg):
        self.pdg, self.focus, self.arcs = pdg, focus, arcs
        self.sizes = [pdg.arc(a).cpd.params.size for a in arcs]
        self.chi = np.concatenate([focus.chi_vector(a, n) for a, n in zip(arcs, self.sizes)])
        self.inner_cfg = inner_cfg
        self.mu = inner_cfg.warm_start
        self.iters = 0
        self.last: Optional[InconsistencyResult] = None

    def get(self):
        return np.concatenate([self.pdg.arc(a).cpd.params for a in self.arcs])

    def put(self, x):
        off = 0
        for a, n in zip(self.arcs, self.sizes):
            self.pdg.arc(a).cpd.params = x[off:off + n].copy()
            off += n

    def solve(self):
        cfg = self.inner_cfg.warm(self.mu, self.inner_cfg.max_iters) if self.mu is not None \
            else self.inner_cfg
        res = solve_inconsistency(self.pdg, self.focus, cfg)
        if not math.isfinite(res.value):
            raise StepFailure("inner solve returned a non-finite value")
        self.mu = res
        self.iters += res.iterations_used
        self.last = res
        return res

    def grad(self, x):
        self.put(x)
        res = self.solve()
        g = envelope_grad(self.pdg, self.focus, res.mu_star)
        return np.concatenate([g[a] for a in self.arcs])

    def field(self, x):
        return -self.chi * self.grad(x)


def _project_full_control(pdg, focus, arcs, inner_cfg):
    """Set each fully controlled table to mu*(Tgt|Src) of the problem without it.

    This is the exact minimizer over those tables when they carry beta > 0 and
    no structural weight.
    """
    beta = dict(focus.beta)
    for a in arcs:
        beta[a] = 0.0
    rest = Focus(alpha=focus.alpha, beta=beta, gamma=focus.gamma, chi=focus.chi)
    cfg = InnerSolverConfig(max(inner_cfg.max_iters, 2000), inner_cfg.step_size, 1e-10,
                            inner_cfg.warm_start, inner_cfg.exact)
    res = solve_inconsistency(pdg, rest, cfg)
    for aid in arcs:
        arc = pdg.arc(aid)
        cond = res.mu_star.conditional(arc.targets, arc.sources)
        with np.errstate(divide="ignore"):
            lg = np.maximum(np.log(cond), LOGIT_FLOOR)
        arc.cpd.params = (lg - lg.max(axis=1, keepdims=True)).ravel()
    return res.iterations_used


def _projectable(pdg, focus, aid) -> bool:
    arc = pdg.arc(aid)
    b = focus.b(aid)
    return (arc.cpd.kind == LEARNABLE and 0 < b < math.inf
            and focus.a(aid) * focus.gamma == 0 and aid not in focus.chi_params)


def lir_step(pdg: ParametricPDG, focus: Focus, ode_cfg: Optional[OdeConfig] = None,
             inner_cfg: Optional[InnerSolverConfig] = None, state: Optional[dict] = None):
    """One LIR update of the parameters of ``pdg`` (in place) under ``focus``.

    Returns (new params, InconsistencyResult at the updated parameters, inner
    iteration count). ``state`` carries optimizer moments across calls.
    """
    ode_cfg = ode_cfg or OdeConfig()
    inner_cfg = inner_cfg or InnerSolverConfig(max_iters=20)
    state = {} if state is None else state
    learn = [a.id for a in pdg.arcs if a.cpd.learnable]
    full, finite = [], []
    for aid in learn:
        chi = focus.chi_vector(aid, pdg.arc(aid).cpd.params.size)
        if np.all(chi == 0) or not focus.attends(aid):
            continue
        (full if np.any(np.isinf(chi)) else finite).append(aid)
    iters = 0
    try:
        proj = [a for a in full if _projectable(pdg, focus, a)]
        if proj:
            iters += _project_full_control(pdg, focus, proj, inner_cfg)
        joint = [a for a in full if a not in proj]
        if joint:
            iters += _descend_to_stationary(pdg, focus, joint, inner_cfg, ode_cfg)
        if finite:
            flow = _Flow(pdg, focus, finite, inner_cfg)
            x = flow.get()
            if ode_cfg.integrator == ADAPTIVE:
                # one Adam state per arc, kept while the attention pattern is unchanged;
                # a new focus defines a new flow, so its moments start fresh
                key = (focus.gamma,) + tuple((a, focus.b(a), focus.a(a)) for a in pdg.arc_ids if focus.attends(a))
                if state.get("attention") != key:
                    state["attention"], state["adam"] = key, {}
                opts = state["adam"]
                for aid, n in zip(finite, flow.sizes):
                    if aid not in opts or opts[aid].m.size != n:
                        opts[aid] = Adam(n)
                cuts = np.cumsum([0] + flow.sizes)
                lr = ode_cfg.step_scale * flow.chi
                for _ in range(ode_cfg.outer_iters_per_step):
                    g = flow.grad(x)
                    x = np.concatenate([opts[a].step(x[i:j], g[i:j], lr[i:j])
                                        for a, i, j in zip(finite, cuts[:-1], cuts[1:])])
            else:
                step = euler_step if ode_cfg.integrator == EULER else rk4_step
                for _ in range(ode_cfg.outer_iters_per_step):
                    x = step(flow.field, x, ode_cfg.step_scale)
            flow.put(x)
            iters += flow.iters
            inner_cfg = inner_cfg.warm(flow.mu, inner_cfg.max_iters)
        res = solve_inconsistency(pdg, focus, inner_cfg)
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        raise StepFailure(str(e)) from e
    if not math.isfinite(res.value):
        raise StepFailure("non-finite inconsistency after update")
    iters += res.iterations_used
    return pdg.params(), res, iters


def _descend_to_stationary(pdg, focus, arcs, inner_cfg, ode_cfg) -> int:
    """Quasi-Newton descent on the controlled params (precise warm inner solves) to stationarity."""
    from scipy.optimize import minimize

    sub = Focus(focus.alpha, focus.beta, focus.gamma, {a: 1.0 for a in arcs})
    precise = InnerSolverConfig(2000, inner_cfg.step_size, 1e-12, inner_cfg.warm_start,
                                inner_cfg.exact, method="lbfgs")
    flow = _Flow(pdg, sub, arcs, precise)

    def fun(x):
        g = flow.grad(x)
        return flow.last.value, g

    res = minimize(fun, flow.get(), jac=True, method="L-BFGS-B",
                   options={"maxiter": ode_cfg.full_control_max_iters,
                            "gtol": ode_cfg.full_control_tol, "ftol": 0.0})
    flow.put(res.x)
    return flow.iters


# -- runs and metrics ----------------------------------------------------------

def full_attention(pdg: ParametricPDG, gamma: float = 0.0) -> Focus:
    return Focus.uniform(pdg, chi=0.0, gamma=gamma)


def lir_run(pdg: ParametricPDG, strategy, steps: int, ode_cfg: Optional[OdeConfig] = None,
            inner_cfg: Optional[InnerSolverConfig] = None,
            analysis_cfg: Optional[InnerSolverConfig] = None, reset: bool = True,
            track_full: bool = True, timing: bool = True) -> LirTrace:
    """Run ``steps`` refocus-and-update iterations on a copy of ``pdg``.

    The initial and final full-attention inconsistencies are solved cold with
    ``analysis_cfg``; ``trace.pdg`` holds the updated model.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    ode_cfg = ode_cfg or OdeConfig()
    inner_cfg = inner_cfg or InnerSolverConfig(max_iters=20)
    analysis_cfg = analysis_cfg or analysis_config()
    pdg = pdg.copy()
    if reset:
        pdg.reset_params()
    strat = strategy if isinstance(strategy, RefocusStrategy) else RefocusStrategy(strategy)
    gamma = strat.gamma
    trace = LirTrace(pdg=pdg)
    init = solve_inconsistency(pdg, full_attention(pdg, gamma), analysis_cfg)
    trace.init_value, trace.init_mu = init.value, init.mu_star
    stream = make_refocus(strat, pdg)
    mu = init
    full_prev = init
    state: dict = {}
    for t in range(steps):
        focus = next(stream)
        t0 = time.perf_counter()
        res = None
        for attempt in range(2):
            try:
                warm = mu if attempt == 0 else None
                _, res, iters = lir_step(pdg, focus, ode_cfg, inner_cfg.warm(warm, inner_cfg.max_iters),
                                         state)
                break
            except (StepFailure, PDGError) as e:
                log.warning("step %d attempt %d failed: %s", t, attempt, e)
                err = str(e)
        if res is None:
            trace.aborted, trace.error = True, err
            break
        mu = res
        rec = StepRecord(t, focus, res.value, pdg.param_hash(), res.mu_star, 0.0, iters)
        if track_full:
            full = solve_inconsistency(pdg, full_attention(pdg, gamma),
                                       inner_cfg.warm(full_prev, inner_cfg.max_iters))
            full_prev = full
            rec.full_value, rec.full_mu = full.value, full.mu_star
        rec.seconds = time.perf_counter() - t0 if timing else 0.0
        trace.steps.append(rec)
    fin = solve_inconsistency(pdg, full_attention(pdg, gamma), analysis_cfg)
    trace.final_value, trace.final_mu = fin.value, fin.mu_star
    return trace


def resolution_percentage(trace_or_init, final: Optional[float] = None) -> float:
    """100 * (init - final) / init, from a trace or from two numbers."""
    if final is None:
        init, final = trace_or_init.init_value, trace_or_init.final_value
    else:
        init = trace_or_init
    if init is None or final is None:
        raise ValueError("trace lacks initial or final values")
    if init == 0:
        raise ValueError("resolution is undefined when the initial inconsistency is 0")
    return 100.0 * (init - final) / init


def tv_distortion(mu_init, mu_final) -> float:
    """Total variation distance between two joints over the same scope."""
    if isinstance(mu_init, JointTable):
        if isinstance(mu_final, JointTable):
            if list(mu_init.scope) != list(mu_final.scope):
                mu_final = mu_final.reorder(mu_init.scope)
            mu_final = mu_final.probs
        mu_init = mu_init.probs
    a, b = np.asarray(mu_init, dtype=float), np.asarray(mu_final, dtype=float)
    if a.shape != b.shape:
        raise ValueError("tv_distortion needs joints over the same scope")
    return float(0.5 * np.abs(a - b).sum())
