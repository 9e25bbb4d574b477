"""EM as LIR: alternate full control of the inference arc q and the model p.

The PDG has a latent Z (size k) and observed X0..X{m-1} that are
conditionally independent given Z (m = 1 is the plain mixture), with arcs

- ``d``:       hard empirical distribution over the observed tuple,
- ``q``:       inference cpd q(Z|X0..), hard,
- ``prior``:   learnable pi(Z),
- ``emit``:    p(X0..|Z), the product of the per-feature tables p(Xj|Z).

For m = 1 the emission arc is a free table and both steps are plain LIR
full-control projections. For m > 1 the arc's table is constrained to the
product family, and the M step maximizes over the feature tables.

With d and q hard the joint is forced to d(X) q(Z|X), and the inconsistency is
KL(d q || pi p) = E_d[-log p(x)] - H(d) + E_d KL(q || p(Z|x)).
"""

from dataclasses import dataclass, field
import math

import numpy as np

from ..pdg import CONSTANT, LEARNABLE, Cpd, Focus, JointTable, ParametricPDG, PDGError, Variable
from ..inconsistency import InnerSolverConfig, oinc
from ..lir import OdeConfig, lir_step


@dataclass
class LatentVarModel:
    """prior pi(Z) and emission tables p(Xj|Z); a single (k, v) array means m = 1."""

    prior: np.ndarray
    emission: object

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=float).ravel()
        em = self.emission
        if not isinstance(em, (list, tuple)):
            em = [em]
        self.emissions = [np.asarray(e, dtype=float) for e in em]
        self.emission = self.emissions[0] if len(self.emissions) == 1 else list(self.emissions)
        for t in [self.prior[None]] + self.emissions:
            if t.ndim != 2 or np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
                raise PDGError("prior and emission rows must be distributions")
        if any(e.shape[0] != self.prior.size for e in self.emissions):
            raise PDGError("each emission table needs one row per latent state")

    @property
    def k(self) -> int:
        return self.prior.size

    @property
    def sizes(self) -> tuple:
        return tuple(e.shape[1] for e in self.emissions)

    @property
    def v(self) -> int:
        return int(np.prod(self.sizes))

    def joint(self) -> np.ndarray:
        """p(z, x) with the observed tuple flattened row-major, shape (k, v)."""
        m = len(self.emissions)
        j = self.prior.reshape((-1,) + (1,) * m)
        for i, e in enumerate(self.emissions):
            shape = [self.k] + [1] * m
            shape[i + 1] = e.shape[1]
            j = j * e.reshape(shape)
        return j.reshape(self.k, -1)

    def log_marginal(self, x) -> float:
        return float(np.log(self.joint()[:, x].sum()))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.prior] + [e.ravel() for e in self.emissions])


@dataclass
class EmTrace:
    """Model after each half step (index 2t is after t full E+M cycles)."""

    thetas: list = field(default_factory=list)
    qs: list = field(default_factory=list)
    values: list = field(default_factory=list)


def empirical(data, sizes) -> np.ndarray:
    """Empirical distribution over the flattened observed tuple.

    ``data`` is a single index, an integer array of flat indices (or of shape
    (N, m) tuples), or a probability vector.
    """
    sizes = (sizes,) if np.isscalar(sizes) else tuple(sizes)
    v = int(np.prod(sizes))
    arr = np.asarray(data)
    if arr.dtype.kind in "iu":
        if arr.ndim == 2:
            arr = np.ravel_multi_index(tuple(arr.T), sizes)
        arr = np.atleast_1d(arr)
        if np.any(arr < 0) or np.any(arr >= v):
            raise PDGError("observation index out of range")
        return np.bincount(arr, minlength=v).astype(float) / arr.size
    d = arr.astype(float)
    if d.shape != (v,) or np.any(d < 0) or not math.isclose(d.sum(), 1.0, abs_tol=1e-9):
        raise PDGError("data distribution must be a probability vector over the observed tuple")
    return d


def _obs(m):
    return [f"X{j}" for j in range(m)]


def em_pdg(model: LatentVarModel, d: np.ndarray, q=None) -> ParametricPDG:
    k, v = model.k, model.v
    obs = _obs(len(model.emissions))
    q = np.full((v, k), 1.0 / k) if q is None else np.asarray(q, dtype=float)
    pdg = ParametricPDG([Variable("Z", k)] + [Variable(x, n) for x, n in zip(obs, model.sizes)])
    pdg.add_arc("d", [], obs, Cpd(CONSTANT, 1, v, table=d[None]), beta=math.inf)
    pdg.add_arc("q", obs, ["Z"], Cpd(LEARNABLE, v, k, table=q), beta=math.inf)
    pdg.add_arc("prior", [], ["Z"], Cpd(LEARNABLE, 1, k, table=model.prior[None]))
    pdg.add_arc("emit", ["Z"], obs, Cpd(LEARNABLE, k, v, table=model.joint() / model.prior[:, None]))
    return pdg


def _n_obs(pdg) -> int:
    return len(pdg.var_ids) - 1


def _forced_joint(pdg) -> JointTable:
    obs = _obs(_n_obs(pdg))
    d = pdg.arc("d").cpd.table()[0]
    q = pdg.arc("q").cpd.table()
    scope = obs + ["Z"]
    return JointTable(scope, pdg.sizes(scope), q * d[:, None])


def em_value(pdg) -> float:
    """Inconsistency at the forced joint d(X) q(Z|X)."""
    return oinc(pdg, _forced_joint(pdg), {a.id: a.beta for a in pdg.arcs})


E_FOCUS = "E"
M_FOCUS = "M"


def em_focus(kind: str) -> Focus:
    """Both foci attend to every arc; q is scored softly so it can be projected."""
    beta = {"d": math.inf, "q": 1.0, "prior": 1.0, "emit": 1.0}
    chi = {"q": math.inf} if kind == E_FOCUS else {"prior": math.inf, "emit": math.inf}
    return Focus(alpha={}, beta=beta, gamma=0.0, chi=chi)


def _set_table(cpd, table):
    with np.errstate(divide="ignore"):
        cpd.params = np.maximum(np.log(table), -745.0).ravel()


def _sync(pdg, model):
    _set_table(pdg.arc("prior").cpd, model.prior[None])
    _set_table(pdg.arc("emit").cpd, model.joint() / model.prior[:, None])


def _exact_step(pdg, model, kind) -> LatentVarModel:
    """Exact full-control update for the two EM foci; returns the new model.

    E: without q and with d pinned, the minimizer is d(x) p(z|x), so
    q <- p(Z|X). M: the joint is forced to d q and the model minimizing
    KL(d q || pi p) takes the matching marginal and conditionals of it.
    """
    obs = _obs(len(model.emissions))
    if kind == E_FOCUS:
        d = pdg.arc("d").cpd.table()[0]
        joint = JointTable(["Z"] + obs, (model.k,) + model.sizes, model.joint())
        if np.any(joint.marginal(obs).probs[d > 0] <= 0):
            raise PDGError("posterior undefined: an observed x has zero model probability")
        _set_table(pdg.arc("q").cpd, joint.conditional(["Z"], obs))
        return model
    mu = _forced_joint(pdg)
    model = LatentVarModel(mu.marginal(["Z"]).probs, [mu.conditional([x], ["Z"]) for x in obs])
    _sync(pdg, model)
    return model


def em_via_lir(model: LatentVarModel, data, iters: int, exact: bool = True,
               inner_cfg: InnerSolverConfig = None) -> EmTrace:
    """Alternate the E focus (control q) and the M focus (control prior and emission).

    ``exact`` applies the closed-form full-control update of each step;
    otherwise each step goes through ``lir_step`` with numeric inner solves,
    which needs m = 1 (a free emission table).
    """
    if np.any(model.flat() <= 0):
        raise PDGError("initial tables must be strictly positive")
    if not exact and len(model.emissions) != 1:
        raise PDGError("the numeric path needs a single free emission table")
    d = empirical(data, model.sizes)
    pdg = em_pdg(model, d)
    trace = EmTrace()

    def record():
        trace.thetas.append(model)
        trace.qs.append(pdg.arc("q").cpd.table().copy())
        trace.values.append(em_value(pdg))

    record()
    ode = OdeConfig()
    cfg = inner_cfg or InnerSolverConfig(3000, tolerance=1e-12, method="lbfgs")
    for _ in range(iters):
        for kind in (E_FOCUS, M_FOCUS):
            if exact:
                model = _exact_step(pdg, model, kind)
            else:
                lir_step(pdg, em_focus(kind), ode, cfg)
                model = LatentVarModel(pdg.arc("prior").cpd.table()[0], pdg.arc("emit").cpd.table())
            record()
    return trace
