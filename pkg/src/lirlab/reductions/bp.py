"""Sum-product belief propagation as LIR over a PDG of messages.

Every factor a becomes an arc ``phi:a`` carrying phi_a (normalized) on its
scope. Every message and belief is a learnable unconditional arc on its
variable: ``m:X>a``, ``m:a>X`` and ``b:X``. Copies X^a of the variables are
elided; the equality arcs that would tie them to X are deterministic, and
each focus only attends to one copy's context.

A focus f attends (beta=1, alpha=1) to its context A_f minus the controlled
arc, attends to the controlled arc with (beta=1, alpha=0), uses gamma=1, and
gives the controlled arc full control.
"""

from dataclasses import dataclass, field
import itertools
import math

import numpy as np

from ..pdg import CONSTANT, LEARNABLE, Cpd, Focus, ParametricPDG, PDGError, Variable
from ..inconsistency import InnerSolverConfig
from ..lir import OdeConfig, lir_step

FACTOR_FLOOR = 1e-12

V2F = "v2f"
F2V = "f2v"
BELIEF = "belief"


@dataclass
class FactorGraph:
    """variables: name -> domain size; factors: name -> (scope tuple, table of shape sizes(scope))."""

    variables: dict
    factors: dict
    floored: bool = False

    def __post_init__(self):
        self.variables = {k: int(v) for k, v in self.variables.items()}
        out = {}
        for name, (scope, table) in self.factors.items():
            scope = tuple(scope)
            t = np.asarray(table, dtype=float)
            if any(v not in self.variables for v in scope) or len(set(scope)) != len(scope):
                raise PDGError(f"factor {name!r}: bad scope {scope}")
            if t.shape != tuple(self.variables[v] for v in scope):
                raise PDGError(f"factor {name!r}: table shape {t.shape} does not match its scope")
            if not np.all(np.isfinite(t)) or np.any(t < 0):
                raise PDGError(f"factor {name!r}: entries must be finite and nonnegative")
            if np.any(t < FACTOR_FLOOR):
                self.floored = True
                t = np.maximum(t, FACTOR_FLOOR)
            out[name] = (scope, t)
        self.factors = out

    def neighbors(self, x) -> list:
        """Factors with x in scope, in insertion order."""
        return [a for a, (scope, _) in self.factors.items() if x in scope]

    def edges(self) -> list:
        return [(x, a) for a, (scope, _) in self.factors.items() for x in scope]

    def brute_force_marginals(self) -> dict:
        names = list(self.variables)
        sizes = [self.variables[v] for v in names]
        p = np.ones(sizes)
        for scope, t in self.factors.values():
            axes = [names.index(v) for v in scope]
            order = np.argsort(axes)
            shape = [1] * len(names)
            for ax in axes:
                shape[ax] = sizes[ax]
            p = p * np.transpose(t, order).reshape(shape)
        p /= p.sum()
        return {v: p.sum(axis=tuple(j for j in range(len(names)) if j != i))
                for i, v in enumerate(names)}


@dataclass
class MessageState:
    v2f: dict = field(default_factory=dict)      # (X, a) -> distribution over X
    f2v: dict = field(default_factory=dict)      # (a, X) -> distribution over X
    beliefs: dict = field(default_factory=dict)  # X -> distribution over X
    history: list = field(default_factory=list)  # (focus key, updated vector) per step


def message_pdg(graph: FactorGraph) -> ParametricPDG:
    pdg = ParametricPDG([Variable(v, n) for v, n in graph.variables.items()])
    for a, (scope, t) in graph.factors.items():
        pdg.add_arc(f"phi:{a}", [], list(scope), Cpd(CONSTANT, 1, t.size, table=(t / t.sum()).reshape(1, -1)))
    for x, a in graph.edges():
        n = graph.variables[x]
        pdg.add_arc(f"m:{x}>{a}", [], [x], Cpd(LEARNABLE, 1, n, params=np.zeros(n)))
        pdg.add_arc(f"m:{a}>{x}", [], [x], Cpd(LEARNABLE, 1, n, params=np.zeros(n)))
    for x, n in graph.variables.items():
        pdg.add_arc(f"b:{x}", [], [x], Cpd(LEARNABLE, 1, n, params=np.zeros(n)))
    return pdg


def _context(graph, key):
    """(context arcs other than the controlled one, controlled arc)."""
    kind = key[0]
    if kind == V2F:
        _, x, a = key
        return [f"m:{b}>{x}" for b in graph.neighbors(x) if b != a], f"m:{x}>{a}"
    if kind == F2V:
        _, a, x = key
        scope = graph.factors[a][0]
        return [f"phi:{a}"] + [f"m:{y}>{a}" for y in scope if y != x], f"m:{a}>{x}"
    if kind == BELIEF:
        _, x = key
        return [f"m:{a}>{x}" for a in graph.neighbors(x)], f"b:{x}"
    raise PDGError(f"unknown BP focus {key!r}")


def bp_focus(graph: FactorGraph, key) -> Focus:
    ctx, ctrl = _context(graph, key)
    alpha = {c: 1.0 for c in ctx}
    beta = {c: 1.0 for c in ctx}
    alpha[ctrl], beta[ctrl] = 0.0, 1.0
    return Focus(alpha=alpha, beta=beta, gamma=1.0, chi={ctrl: math.inf})


def flooding_schedule(graph: FactorGraph) -> list:
    """All variable-to-factor messages, then all factor-to-variable messages."""
    return [(V2F, x, a) for x, a in graph.edges()] + [(F2V, a, x) for x, a in graph.edges()]


def belief_schedule(graph: FactorGraph) -> list:
    return [(BELIEF, x) for x in graph.variables]


def _read(pdg, graph) -> MessageState:
    st = MessageState()
    for x, a in graph.edges():
        st.v2f[(x, a)] = pdg.arc(f"m:{x}>{a}").cpd.table()[0].copy()
        st.f2v[(a, x)] = pdg.arc(f"m:{a}>{x}").cpd.table()[0].copy()
    for x in graph.variables:
        st.beliefs[x] = pdg.arc(f"b:{x}").cpd.table()[0].copy()
    return st


def bp_via_lir(graph: FactorGraph, schedule: list, iters: int = 1,
               inner_cfg: InnerSolverConfig = None) -> MessageState:
    """Run ``iters`` passes of ``schedule`` as LIR steps on the message PDG."""
    pdg = message_pdg(graph)
    cfg = inner_cfg or InnerSolverConfig(max_iters=20)
    ode = OdeConfig()
    history = []
    for _ in range(iters):
        for key in schedule:
            lir_step(pdg, bp_focus(graph, key), ode, cfg)
            _, ctrl = _context(graph, key)
            history.append((key, pdg.arc(ctrl).cpd.table()[0].copy()))
    st = _read(pdg, graph)
    st.history = history
    return st


def beliefs_from_messages(state: MessageState, graph: FactorGraph = None) -> dict:
    """b_X proportional to the product of incoming factor messages."""
    out = {}
    for (a, x), m in state.f2v.items():
        out[x] = out.get(x, 1.0) * m
    if graph is not None:
        for x, n in graph.variables.items():
            out.setdefault(x, np.ones(n))
    return {x: b / b.sum() for x, b in out.items()}


def sum_product(graph: FactorGraph, schedule: list, iters: int = 1) -> MessageState:
    """Plain sum-product updates under ``schedule``, messages normalized after each update."""
    st = MessageState()
    for x, a in graph.edges():
        n = graph.variables[x]
        st.v2f[(x, a)] = np.full(n, 1.0 / n)
        st.f2v[(a, x)] = np.full(n, 1.0 / n)
    for x, n in graph.variables.items():
        st.beliefs[x] = np.full(n, 1.0 / n)
    for _ in range(iters):
        for key in schedule:
            if key[0] == V2F:
                _, x, a = key
                m = np.ones(graph.variables[x])
                for b in graph.neighbors(x):
                    if b != a:
                        m = m * st.f2v[(b, x)]
                st.v2f[(x, a)] = new = m / m.sum()
            elif key[0] == F2V:
                _, a, x = key
                scope, t = graph.factors[a]
                acc = t
                for i, y in enumerate(scope):
                    if y != x:
                        shape = [1] * len(scope)
                        shape[i] = graph.variables[y]
                        acc = acc * st.v2f[(y, a)].reshape(shape)
                i = scope.index(x)
                m = acc.sum(axis=tuple(j for j in range(len(scope)) if j != i))
                st.f2v[(a, x)] = new = m / m.sum()
            else:
                _, x = key
                b = np.ones(graph.variables[x])
                for a in graph.neighbors(x):
                    b = b * st.f2v[(a, x)]
                st.beliefs[x] = new = b / b.sum()
            st.history.append((key, new.copy()))
    return st


def chain_graph(sizes, rng) -> FactorGraph:
    """Pairwise chain X0 - X1 - ... with random positive factors plus unary factors."""
    names = [f"X{i}" for i in range(len(sizes))]
    factors = {}
    for i, n in enumerate(sizes):
        factors[f"u{i}"] = ((names[i],), rng.uniform(0.2, 2.0, n))
    for i in range(len(sizes) - 1):
        factors[f"p{i}"] = ((names[i], names[i + 1]), rng.uniform(0.2, 2.0, (sizes[i], sizes[i + 1])))
    return FactorGraph(dict(zip(names, sizes)), factors)


def cycle_graph(n_vars, size, rng) -> FactorGraph:
    """Single loop X0 - X1 - ... - X{n-1} - X0 of pairwise factors."""
    names = [f"X{i}" for i in range(n_vars)]
    factors = {}
    for i in range(n_vars):
        j = (i + 1) % n_vars
        factors[f"p{i}"] = ((names[i], names[j]), rng.uniform(0.2, 2.0, (size, size)))
    return FactorGraph({v: size for v in names}, factors)
