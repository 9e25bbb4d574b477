"""Decision rules from inconsistency: prior p(S), outcome kernel tau(O|S,A), utility u(O).

The soft constraint b(T = true | U = u) = k exp(u) with T observed true turns
utility into conflict. With tau hard, A fixed to a and gamma = 0, the
inconsistency is

    inf_mu  beta_p KL(mu(S) || p) - beta_b sum_s mu(s) EU(s, a)
    = -beta_p log sum_s p(s) exp((beta_b / beta_p) EU(s, a)),

where EU(s, a) = E_{o ~ tau(s, a)} u(o) + log k.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, logsumexp

from ..pdg import CONSTANT, Cpd, JointTable, ParametricPDG, PDGError, Variable
from ..inconsistency import oinc


@dataclass
class DecisionProblem:
    prior: np.ndarray        # (n_s,)
    outcome: np.ndarray      # (n_s, n_a, n_o) tau(o | s, a)
    utility: np.ndarray      # (n_o,)
    beta_p: float = 1.0
    beta_b: float = 1.0
    k: float = None          # defaults to exp(-max u), so b(true | u) <= 1

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=float).ravel()
        self.outcome = np.asarray(self.outcome, dtype=float)
        self.utility = np.asarray(self.utility, dtype=float).ravel()
        if self.k is None:
            self.k = math.exp(-self.utility.max())
        if not self.k > 0:
            raise PDGError("k must be positive")
        if self.outcome.ndim != 3 or self.outcome.shape[0] != self.prior.size \
                or self.outcome.shape[2] != self.utility.size:
            raise PDGError("outcome kernel must have shape (n_states, n_actions, n_outcomes)")
        if not math.isclose(self.prior.sum(), 1.0, abs_tol=1e-9) or np.any(self.prior < 0):
            raise PDGError("prior must be a distribution")
        if np.any(self.outcome < 0) or not np.allclose(self.outcome.sum(axis=2), 1.0, atol=1e-9):
            raise PDGError("outcome kernel rows must be distributions")
        if not (0 < self.beta_p < math.inf):
            raise PDGError("beta_p must be positive and finite")
        if not self.beta_b >= 0:
            raise PDGError("beta_b must be nonnegative")

    @property
    def n_actions(self) -> int:
        return self.outcome.shape[1]

    def expected_utility(self) -> np.ndarray:
        """EU(s, a) including the log k shift, shape (n_s, n_a)."""
        return self.outcome @ self.utility + math.log(self.k)


def decision_inconsistency(problem: DecisionProblem, a: int) -> float:
    """Closed form -beta_p log sum_s p(s) exp(r EU(s, a)), r = beta_b / beta_p."""
    r = problem.beta_b / problem.beta_p
    eu = problem.expected_utility()[:, a]
    with np.errstate(divide="ignore"):
        lp = np.log(problem.prior)
    return float(-problem.beta_p * logsumexp(lp + r * eu))


def choose(problem: DecisionProblem) -> int:
    """Action minimizing the inconsistency (lowest index on ties)."""
    return int(np.argmin([decision_inconsistency(problem, a) for a in range(problem.n_actions)]))


def lse_bounds(problem: DecisionProblem, a: int):
    """(lower, upper) bounds on value / beta_b from max <= LSE <= max + log n.

    With r = beta_b / beta_p and M = min_s (-EU(s, a) - log p(s) / r):
    M - log |S| / r <= value / beta_b <= M.
    """
    r = problem.beta_b / problem.beta_p
    eu = problem.expected_utility()[:, a]
    keep = problem.prior > 0
    M = float(np.min(-eu[keep] - np.log(problem.prior[keep]) / r))
    return M - math.log(int(keep.sum())) / r, M


def decision_pdg(problem: DecisionProblem, a: int) -> ParametricPDG:
    """PDG over S, A, O, U, T; U indexes the distinct utility values."""
    n_s, n_a, n_o = problem.outcome.shape
    uvals, u_of = np.unique(problem.utility, return_inverse=True)
    pdg = ParametricPDG([Variable("S", n_s), Variable("A", n_a), Variable("O", n_o),
                         Variable("U", uvals.size), Variable("T", 2)])
    inf = math.inf
    act = np.zeros(n_a)
    act[a] = 1.0
    pdg.add_arc("p", [], ["S"], Cpd(CONSTANT, 1, n_s, table=problem.prior[None]), beta=problem.beta_p)
    pdg.add_arc("A=a", [], ["A"], Cpd(CONSTANT, 1, n_a, table=act[None]), beta=inf)
    pdg.add_arc("tau", ["S", "A"], ["O"], Cpd(CONSTANT, n_s * n_a, n_o,
                                              table=problem.outcome.reshape(-1, n_o)), beta=inf)
    pdg.add_arc("u", ["O"], ["U"], Cpd(CONSTANT, n_o, uvals.size, table=np.eye(uvals.size)[u_of]),
                beta=inf)
    pdg.add_arc("T=true", [], ["T"], Cpd(CONSTANT, 1, 2, table=[[0.0, 1.0]]), beta=inf)
    good = problem.k * np.exp(uvals)
    if np.any(good > 1 + 1e-12):
        raise PDGError("k * exp(u) exceeds 1; lower k")
    good = np.minimum(good, 1.0)
    pdg.add_arc("b", ["U"], ["T"], Cpd(CONSTANT, uvals.size, 2, table=np.stack([1 - good, good], 1)),
                beta=problem.beta_b)
    return pdg


def forced_joint(pdg, problem: DecisionProblem, a: int, mu_s) -> JointTable:
    """mu(S) times everything the hard arcs determine."""
    n_s, n_a, n_o = problem.outcome.shape
    n_u = pdg.sizes(["U"])[0]
    _, u_of = np.unique(problem.utility, return_inverse=True)
    t = np.zeros((n_s, n_a, n_o, n_u, 2))
    for o in range(n_o):
        t[:, a, o, u_of[o], 1] = mu_s * problem.outcome[:, a, o]
    return JointTable(["S", "A", "O", "U", "T"], t.shape, t.ravel())


def numeric_inconsistency(problem: DecisionProblem, a: int, restarts: int = 1) -> float:
    """Minimize the PDG's OInc over mu(S) with the hard arcs enforced exactly."""
    pdg = decision_pdg(problem, a)
    beta = {arc.id: arc.beta for arc in pdg.arcs}
    support = problem.prior > 0
    idx = np.flatnonzero(support)

    def f(z):
        mu = np.zeros(problem.prior.size)
        mu[idx] = np.exp(log_softmax(z))
        return oinc(pdg, forced_joint(pdg, problem, a, mu), beta)

    starts = [np.log(problem.prior[idx]), np.zeros(idx.size)][:max(1, restarts)]
    if idx.size > 1:
        # mu* is nearly a point mass when beta_b / beta_p is large; seed from the best vertex
        starts.append(min((10.0 * e for e in np.eye(idx.size)), key=f))
    best = math.inf
    for z0 in starts:
        # derivative-free: finite-difference gradients in saturated logits stall short of 1e-6
        res = minimize(f, z0, method="Powell", options={"xtol": 1e-10, "ftol": 1e-15})
        best = min(best, float(res.fun))
    return best
