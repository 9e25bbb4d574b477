"""Trajectory balance as inconsistency with surprisal-based attention.

States 0..N-1 of a small DAG (0 is the source) plus the sink N. A trajectory
is (s_0, ..., s_n = x, sink) with |tau| = n + 1 transitions. The forced joint
over (tau, i, S, S') is Q(tau) Unif(i) [S = tau_i] [S' = tau_{i+1}], and the
P_F / P_B arcs get attention phi_F = log P_B(tau) / P_F(tau) = -phi_B, held
fixed when differentiating. P_B's sink row is R(x) / Z, which is a
probability table only when Z = sum R.
"""

from dataclasses import dataclass
import itertools
import math

import numpy as np
from scipy.special import log_softmax

from ..pdg import CONSTANT, LEARNABLE, Cpd, JointTable, ParametricPDG, PDGError, Variable
from ..inconsistency import oinc

MAX_TRAJECTORIES = 30


@dataclass
class Dag:
    children: list           # children[s] = list of successor states
    terminal: np.ndarray     # bool per state: may move to the sink

    @property
    def n(self) -> int:
        return len(self.children)

    @property
    def sink(self) -> int:
        return self.n

    def parents(self, s) -> list:
        return [p for p in range(self.n) if s in self.children[p]]

    def trajectories(self) -> list:
        out = []

        def walk(path):
            s = path[-1]
            if self.terminal[s]:
                out.append(tuple(path) + (self.sink,))
            for c in self.children[s]:
                walk(path + [c])

        walk([0])
        return out

    def forward_mask(self) -> np.ndarray:
        m = np.zeros((self.n + 1, self.n + 1), dtype=bool)
        for s, cs in enumerate(self.children):
            m[s, cs] = True
            m[s, self.sink] = bool(self.terminal[s])
        return m

    def backward_mask(self) -> np.ndarray:
        """[s', s] true when s -> s' is an edge; the sink row covers terminal states."""
        return self.forward_mask().T.copy()


@dataclass
class GfnParams:
    pf_logits: np.ndarray    # (N+1, N+1), -inf off the forward mask
    pb: np.ndarray           # (N+1, N+1) P_B(s | s'), rows s' != sink are distributions
    reward: np.ndarray       # (N,) R(x), positive on terminal states
    log_z: float

    def log_pf(self) -> np.ndarray:
        lp = np.full_like(self.pf_logits, -np.inf)
        rows = np.isfinite(self.pf_logits).any(axis=1)
        lp[rows] = log_softmax(self.pf_logits[rows], axis=1)
        return lp

    def log_pb(self, sink: int) -> np.ndarray:
        with np.errstate(divide="ignore"):
            lb = np.log(self.pb)
            lb[sink, :sink] = np.log(self.reward) - self.log_z
        return lb


def random_layered_dag(rng, widths=(2, 2), p_edge: float = 0.7) -> Dag:
    """Source, then layers of the given widths; every state may terminate except the source."""
    layers = [[0]]
    nxt = 1
    for w in widths:
        layers.append(list(range(nxt, nxt + w)))
        nxt += w
    children = [[] for _ in range(nxt)]
    for a, b in zip(layers[:-1], layers[1:]):
        for t in b:
            parents = [s for s in a if rng.random() < p_edge] or [int(rng.choice(a))]
            for s in parents:
                children[s].append(t)
    terminal = np.ones(nxt, dtype=bool)
    terminal[0] = False
    return Dag(children, terminal)


def random_params(dag: Dag, rng, z_scale: float = 1.0) -> GfnParams:
    n = dag.n
    fm, bm = dag.forward_mask(), dag.backward_mask()
    pf = np.where(fm, rng.normal(size=fm.shape), -np.inf)
    pb = np.zeros((n + 1, n + 1))
    for sp in range(1, n):
        par = np.flatnonzero(bm[sp, :n])
        if par.size:
            pb[sp, par] = rng.dirichlet(np.ones(par.size))
    reward = np.where(dag.terminal, rng.uniform(0.5, 2.0, n), 0.0)
    reward[0] = 0.0
    pb[n, :n] = reward / reward.sum()
    log_z = math.log(reward.sum()) + z_scale * rng.normal()
    return GfnParams(pf, pb, np.maximum(reward, 0.0), log_z)


def _traj_logs(tau, lpf, lpb):
    a = sum(lpf[s, t] for s, t in zip(tau[:-1], tau[1:]))
    b = sum(lpb[t, s] for s, t in zip(tau[:-1], tau[1:]))
    return a, b


def modtb_loss(dag: Dag, params: GfnParams, Q) -> float:
    """E_Q[(1/|tau|) log^2 (P_F(tau) Z / (R(x) P_B(tau | x)))]."""
    trajs = dag.trajectories()
    lpf, lpb = params.log_pf(), params.log_pb(dag.sink)
    tot = 0.0
    for q, tau in zip(Q, trajs):
        if q == 0:
            continue
        x = tau[-2]
        log_pf = sum(lpf[s, t] for s, t in zip(tau[:-1], tau[1:]))
        log_pb_given_x = sum(lpb[t, s] for s, t in zip(tau[:-2], tau[1:-1]))
        r = log_pf + params.log_z - math.log(params.reward[x]) - log_pb_given_x
        tot += q * r * r / (len(tau) - 1)
    return float(tot)


def modtb_grad(dag: Dag, params: GfnParams, Q) -> np.ndarray:
    """Gradient of L_ModTB w.r.t. the forward logits."""
    lpf, lpb = params.log_pf(), params.log_pb(dag.sink)
    pf = np.exp(lpf)
    g = np.zeros_like(lpf)
    for q, tau in zip(Q, dag.trajectories()):
        if q == 0:
            continue
        a, b = _traj_logs(tau, lpf, lpb)
        coef = q * 2.0 * (a - b) / (len(tau) - 1)
        for s, t in zip(tau[:-1], tau[1:]):
            g[s] -= coef * pf[s]
            g[s, t] += coef
    return g


def forced_joint(dag: Dag, Q) -> dict:
    """Nonzero cells of mu*(tau, i, S, S') keyed by (tau index, i, s, s')."""
    cells = {}
    for k, (q, tau) in enumerate(zip(Q, dag.trajectories())):
        n = len(tau) - 1
        for i in range(n):
            cells[(k, i, tau[i], tau[i + 1])] = q / n
    return cells


def _attention(dag, params, Q):
    lpf, lpb = params.log_pf(), params.log_pb(dag.sink)
    phi_f = []
    for tau in dag.trajectories():
        a, b = _traj_logs(tau, lpf, lpb)
        phi_f.append(b - a)
    return np.array(phi_f), lpf, lpb


def _check(dag, Q):
    trajs = dag.trajectories()
    Q = np.asarray(Q, dtype=float)
    if len(trajs) > MAX_TRAJECTORIES:
        raise PDGError(f"{len(trajs)} trajectories; at most {MAX_TRAJECTORIES} are enumerable here")
    if Q.shape != (len(trajs),) or np.any(Q < 0) or not math.isclose(Q.sum(), 1.0, abs_tol=1e-9):
        raise PDGError("Q must be a distribution over the enumerated trajectories")
    if np.any(Q == 0):
        raise PDGError("Q must give every trajectory positive probability")
    return Q


def numeric_inconsistency(dag: Dag, params: GfnParams, Q, phi=None) -> float:
    """Attention-weighted OInc at the forced joint, summed cell by cell.

    Each conditional of mu* given (tau, i, S) is a point mass on S', so each
    arc's relative entropy reduces to the surprisal of the realized value.
    """
    Q = _check(dag, Q)
    phi_f, lpf, lpb = _attention(dag, params, Q)
    if phi is not None:
        phi_f = np.asarray(phi, dtype=float)
    tot = 0.0
    for (k, i, s, sp), m in forced_joint(dag, Q).items():
        tot += m * (phi_f[k] * -lpf[s, sp] + (-phi_f[k]) * -lpb[sp, s])
    return float(tot)


def numeric_grad(dag: Dag, params: GfnParams, Q) -> np.ndarray:
    """Gradient w.r.t. forward logits of the numeric value with attention frozen."""
    Q = _check(dag, Q)
    phi_f, lpf, _ = _attention(dag, params, Q)
    pf = np.exp(lpf)
    W = np.zeros_like(lpf)
    for (k, i, s, sp), m in forced_joint(dag, Q).items():
        W[s, sp] += m * phi_f[k]
    return -(W - W.sum(axis=1, keepdims=True) * pf)


def library_inconsistency(dag: Dag, params: GfnParams, Q) -> float:
    """Same quantity through PDG arcs S -> S' and S' -> S, one trajectory at a time.

    Needs a normalized sink row (Z = sum R); attention is a per-trajectory beta.
    """
    Q = _check(dag, Q)
    if not math.isclose(math.exp(params.log_z), params.reward.sum(), rel_tol=1e-12):
        raise PDGError("the PDG route needs Z = sum R so that P_B is a cpd")
    n1 = dag.n + 1
    phi_f, lpf, lpb = _attention(dag, params, Q)
    pf = np.exp(lpf)
    pb = np.exp(lpb)
    # rows never used as a source still need to be distributions
    for t in (pf, pb):
        empty = t.sum(axis=1) == 0
        t[empty] = 1.0 / n1
    pdg = ParametricPDG([Variable("S", n1), Variable("Sp", n1)])
    pdg.add_arc("PF", ["S"], ["Sp"], Cpd(CONSTANT, n1, n1, table=pf))
    pdg.add_arc("PB", ["Sp"], ["S"], Cpd(CONSTANT, n1, n1, table=pb))
    tot = 0.0
    for k, (q, tau) in enumerate(zip(Q, dag.trajectories())):
        mu = np.zeros((n1, n1))
        n = len(tau) - 1
        for s, sp in zip(tau[:-1], tau[1:]):
            mu[s, sp] += 1.0 / n
        joint = JointTable(["S", "Sp"], (n1, n1), mu)
        tot += q * oinc(pdg, joint, {"PF": phi_f[k], "PB": -phi_f[k]})
    return float(tot)


def gfn_identity_check(dag: Dag, params: GfnParams, Q):
    """(numeric inconsistency, L_ModTB)."""
    return numeric_inconsistency(dag, params, Q), modtb_loss(dag, params, Q)


def cosine(u, v) -> float:
    u, v = np.ravel(u), np.ravel(v)
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
