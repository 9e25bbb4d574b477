"""Parametric PDGs over finite variables: variables, hyperarcs, cpds, foci and joint tables."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

CONSTANT = "ConstantTable"
LEARNABLE = "LearnableTable"
LINEAR_SOFTMAX = "LinearSoftmax"
GAUSSIAN_MEAN = "IsotropicGaussianMean"
CPD_KINDS = (CONSTANT, LEARNABLE, LINEAR_SOFTMAX, GAUSSIAN_MEAN)

ROW_TOL = 1e-9


class PDGError(ValueError):
    """Raised when a PDG, cpd, focus or joint table violates an invariant."""


@dataclass(frozen=True)
class Variable:
    id: str
    size: int

    def __post_init__(self):
        if int(self.size) < 1:
            raise PDGError(f"variable {self.id!r}: domain_size must be >= 1, got {self.size}")


class Cpd:
    """A parameterized conditional table p(Tgt | Src; theta).

    Tables are laid out as ``(n_src_states, n_tgt_states)`` with source and
    target joint states in row-major order over the arc's variable lists.
    """

    def __init__(self, kind: str, n_src: int, n_tgt: int, params=None, table=None,
                 features=None, default=None):
        if kind not in CPD_KINDS:
            raise PDGError(f"unknown cpd kind {kind!r}")
        self.kind = kind
        self.n_src = int(n_src)
        self.n_tgt = int(n_tgt)
        self._table = None
        self.features = None
        if kind == CONSTANT:
            if table is None:
                raise PDGError("ConstantTable needs a table")
            self._table = _check_rows(np.asarray(table, dtype=float).reshape(self.n_src, self.n_tgt))
            params = np.zeros(0)
        elif kind == LEARNABLE:
            if params is None:
                if table is None:
                    raise PDGError("LearnableTable needs a table or logits")
                t = _check_rows(np.asarray(table, dtype=float).reshape(self.n_src, self.n_tgt))
                with np.errstate(divide="ignore"):
                    params = np.log(t)
                # keep logits finite; exp(-745) underflows to 0 anyway
                params = np.maximum(params, -745.0)
            params = np.asarray(params, dtype=float).reshape(self.n_src * self.n_tgt)
        elif kind == LINEAR_SOFTMAX:
            feats = np.eye(self.n_src) if features is None else np.asarray(features, dtype=float)
            if feats.ndim != 2 or feats.shape[0] != self.n_src:
                raise PDGError("LinearSoftmax features must have one row per source state")
            self.features = feats
            n_par = self.n_tgt * (feats.shape[1] + 1)
            params = np.zeros(n_par) if params is None else np.asarray(params, dtype=float).ravel()
            if params.size != n_par:
                raise PDGError(f"LinearSoftmax expects {n_par} params, got {params.size}")
        else:
            params = np.asarray(params, dtype=float).ravel()
        self.params = params
        self.default = np.array(params if default is None else default, dtype=float).ravel()

    @property
    def learnable(self) -> bool:
        return self.params.size > 0 and self.kind != CONSTANT

    def copy(self) -> "Cpd":
        return copy.deepcopy(self)

    def logits(self) -> np.ndarray:
        if self.kind == LEARNABLE:
            return self.params.reshape(self.n_src, self.n_tgt)
        if self.kind == LINEAR_SOFTMAX:
            w, b = self.linear_weights()
            return self.features @ w.T + b
        raise PDGError(f"{self.kind} has no logits")

    def linear_weights(self):
        nf = self.features.shape[1]
        w = self.params[: self.n_tgt * nf].reshape(self.n_tgt, nf)
        b = self.params[self.n_tgt * nf:]
        return w, b

    def table(self) -> np.ndarray:
        if self.kind == CONSTANT:
            return self._table
        if self.kind == GAUSSIAN_MEAN:
            raise PDGError("IsotropicGaussianMean has no finite table; score it as a density")
        return softmax(self.logits(), axis=1)

    def log_table(self) -> np.ndarray:
        if self.kind == CONSTANT:
            with np.errstate(divide="ignore"):
                return np.log(self._table)
        if self.kind == GAUSSIAN_MEAN:
            raise PDGError("IsotropicGaussianMean has no finite table; score it as a density")
        return log_softmax(self.logits(), axis=1)

    def param_grad(self, logit_grad: np.ndarray) -> np.ndarray:
        """Chain a gradient w.r.t. the table logits back to ``params``."""
        logit_grad = np.asarray(logit_grad, dtype=float).reshape(self.n_src, self.n_tgt)
        if self.kind == LEARNABLE:
            return logit_grad.ravel()
        if self.kind == LINEAR_SOFTMAX:
            gw = logit_grad.T @ self.features
            gb = logit_grad.sum(axis=0)
            return np.concatenate([gw.ravel(), gb])
        return np.zeros(self.params.size)

    def gaussian_logpdf(self, x) -> float:
        if self.kind != GAUSSIAN_MEAN:
            raise PDGError("density scoring applies to IsotropicGaussianMean only")
        x = np.asarray(x, dtype=float).ravel()
        d = x - self.params
        return float(-0.5 * d @ d - 0.5 * x.size * math.log(2 * math.pi))

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == CONSTANT:
            out["table"] = self._table.tolist()
        elif self.kind == LINEAR_SOFTMAX:
            out["params"] = self.params.tolist()
            out["features"] = self.features.tolist()
        else:
            out["params"] = self.params.tolist()
        return out


def _check_rows(t: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise PDGError("cpd rows must be finite and nonnegative")
    sums = t.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > ROW_TOL):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise PDGError(f"cpd row {bad} sums to {sums[bad]!r}, not 1")
    return t


@dataclass
class Hyperarc:
    id: str
    sources: tuple
    targets: tuple
    cpd: Cpd
    alpha: float = 1.0
    beta: float = 1.0

    def variables(self) -> tuple:
        return tuple(self.sources) + tuple(self.targets)


class ParametricPDG:
    """Directed hypergraph of variables whose arcs carry parameterized cpds."""

    def __init__(self, variables: Sequence[Variable], arcs: Sequence[Hyperarc] = ()):
        self.variables = list(variables)
        self.arcs = []
        self._var = {}
        for v in self.variables:
            if v.id in self._var:
                raise PDGError(f"duplicate variable id {v.id!r}")
            self._var[v.id] = v
        self._arc = {}
        for a in arcs:
            self._add(a)

    def _add(self, arc: Hyperarc):
        if arc.id in self._arc:
            raise PDGError(f"duplicate arc id {arc.id!r}")
        if not arc.targets:
            raise PDGError(f"arc {arc.id!r}: targets must be nonempty")
        for vid in arc.variables():
            if vid not in self._var:
                raise PDGError(f"arc {arc.id!r}: unknown variable {vid!r}")
        if set(arc.sources) & set(arc.targets):
            raise PDGError(f"arc {arc.id!r}: sources and targets overlap")
        if len(set(arc.sources)) != len(arc.sources) or len(set(arc.targets)) != len(arc.targets):
            raise PDGError(f"arc {arc.id!r}: repeated variable")
        n_src = self.states(arc.sources)
        n_tgt = self.states(arc.targets)
        if arc.cpd.kind != GAUSSIAN_MEAN and (arc.cpd.n_src, arc.cpd.n_tgt) != (n_src, n_tgt):
            raise PDGError(
                f"arc {arc.id!r}: cpd shape {(arc.cpd.n_src, arc.cpd.n_tgt)} != {(n_src, n_tgt)}")
        self.arcs.append(arc)
        self._arc[arc.id] = arc

    def add_arc(self, arc_id, sources, targets, cpd, alpha=1.0, beta=1.0) -> Hyperarc:
        arc = Hyperarc(arc_id, tuple(sources), tuple(targets), cpd, alpha, beta)
        self._add(arc)
        return arc

    def var(self, vid) -> Variable:
        return self._var[vid]

    def arc(self, aid) -> Hyperarc:
        try:
            return self._arc[aid]
        except KeyError:
            raise PDGError(f"unknown arc {aid!r}") from None

    @property
    def var_ids(self) -> list:
        return [v.id for v in self.variables]

    @property
    def arc_ids(self) -> list:
        return [a.id for a in self.arcs]

    def sizes(self, vids: Iterable) -> tuple:
        return tuple(self._var[v].size for v in vids)

    def states(self, vids: Iterable) -> int:
        return int(np.prod(self.sizes(vids), dtype=np.int64))

    def copy(self) -> "ParametricPDG":
        return copy.deepcopy(self)

    def params(self) -> dict:
        return {a.id: a.cpd.params.copy() for a in self.arcs if a.cpd.learnable}

    def set_params(self, params: Mapping[str, np.ndarray]):
        for aid, p in params.items():
            cpd = self.arc(aid).cpd
            p = np.asarray(p, dtype=float).ravel()
            if p.shape != cpd.params.shape:
                raise PDGError(f"arc {aid!r}: parameter shape {p.shape} != {cpd.params.shape}")
            cpd.params = p.copy()

    def reset_params(self):
        for a in self.arcs:
            if a.cpd.learnable:
                a.cpd.params = a.cpd.default.copy()

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for aid, p in sorted(self.params().items()):
            h.update(aid.encode())
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "variables": [{"id": v.id, "size": v.size} for v in self.variables],
            "arcs": [
                {"id": a.id, "src": list(a.sources), "tgt": list(a.targets),
                 "alpha": a.alpha, "beta": a.beta, **a.cpd.to_json()}
                for a in self.arcs
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


def _parse_arc(pdg: ParametricPDG, spec: dict, i: int):
    for key in ("id", "tgt", "kind"):
        if key not in spec:
            raise PDGError(f"arcs[{i}]: missing field {key!r}")
    src, tgt = tuple(spec.get("src", ())), tuple(spec["tgt"])
    for vid in src + tgt:
        if vid not in pdg._var:
            raise PDGError(f"arcs[{i}] ({spec['id']!r}): unknown variable {vid!r}")
    kind = spec["kind"]
    n_src, n_tgt = pdg.states(src), pdg.states(tgt)
    try:
        if kind == GAUSSIAN_MEAN:
            cpd = Cpd(kind, 1, 1, params=spec.get("params", []))
        else:
            cpd = Cpd(kind, n_src, n_tgt, params=spec.get("params"), table=spec.get("table"),
                      features=spec.get("features"))
    except PDGError as err:
        raise PDGError(f"arcs[{i}] ({spec['id']!r}): {err}") from None
    except ValueError as err:
        raise PDGError(f"arcs[{i}] ({spec['id']!r}): table has the wrong size ({err})") from None
    pdg.add_arc(spec["id"], src, tgt, cpd, float(spec.get("alpha", 1.0)),
                float(spec.get("beta", 1.0)))


def pdg_from_json(doc: dict) -> ParametricPDG:
    """Build and validate a PDG from its JSON document; raises on the first violation."""
    if not isinstance(doc, dict) or "variables" not in doc:
        raise PDGError("document must be an object with a 'variables' list")
    variables = []
    for i, v in enumerate(doc["variables"]):
        if "id" not in v or "size" not in v:
            raise PDGError(f"variables[{i}]: needs 'id' and 'size'")
        if not isinstance(v["size"], int) or v["size"] < 1:
            raise PDGError(f"variables[{i}] ({v['id']!r}): domain_size must be a positive integer")
        variables.append(Variable(str(v["id"]), int(v["size"])))
    pdg = ParametricPDG(variables)
    for i, spec in enumerate(doc.get("arcs", [])):
        _parse_arc(pdg, spec, i)
    return pdg


def load_pdg(path) -> ParametricPDG:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise PDGError(f"not valid JSON: {err}") from None
    return pdg_from_json(doc)


def save_pdg(pdg: ParametricPDG, path):
    with open(path, "w") as fh:
        fh.write(pdg.dumps())
        fh.write("\n")


# -- foci ---------------------------------------------------------------------

@dataclass
class Focus:
    """Attention (alpha, beta, gamma) and control (chi) masks, keyed by arc id.

    Arcs missing from ``alpha``/``beta`` get zero attention; arcs missing from
    ``chi`` get no control. ``chi_params`` optionally overrides chi for
    individual parameters of an arc.
    """

    alpha: dict = field(default_factory=dict)
    beta: dict = field(default_factory=dict)
    gamma: float = 0.0
    chi: dict = field(default_factory=dict)
    chi_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.gamma >= 0:
            raise PDGError("gamma must be nonnegative")
        for aid, c in self.chi.items():
            if not c >= 0:
                raise PDGError(f"chi[{aid!r}] must be nonnegative")
        for aid, c in self.chi_params.items():
            if np.any(~(np.asarray(c) >= 0)):
                raise PDGError(f"chi_params[{aid!r}] must be nonnegative")

    @classmethod
    def of(cls, pdg: ParametricPDG, beta=None, alpha=None, gamma=0.0, chi=None) -> "Focus":
        """Focus with per-arc defaults from the PDG, overridden by the given maps."""
        b = {a.id: a.beta for a in pdg.arcs}
        al = {a.id: a.alpha for a in pdg.arcs}
        b.update(beta or {})
        al.update(alpha or {})
        return cls(alpha=al, beta=b, gamma=gamma, chi=dict(chi or {}))

    @classmethod
    def uniform(cls, pdg: ParametricPDG, chi: float = 0.0, gamma: float = 0.0) -> "Focus":
        ids = pdg.arc_ids
        return cls(alpha={a: 1.0 for a in ids}, beta={a: 1.0 for a in ids}, gamma=gamma,
                   chi={a: chi for a in ids})

    def b(self, aid) -> float:
        return float(self.beta.get(aid, 0.0))

    def a(self, aid) -> float:
        return float(self.alpha.get(aid, 0.0))

    def c(self, aid) -> float:
        return float(self.chi.get(aid, 0.0))

    def chi_vector(self, aid, n: int) -> np.ndarray:
        if aid in self.chi_params:
            return np.broadcast_to(np.asarray(self.chi_params[aid], dtype=float), (n,)).copy()
        return np.full(n, self.c(aid))

    def attends(self, aid) -> bool:
        return self.b(aid) != 0 or self.a(aid) * self.gamma != 0

    def to_json(self) -> dict:
        return {
            "alpha": {k: _jsonable(v) for k, v in sorted(self.alpha.items())},
            "beta": {k: _jsonable(v) for k, v in sorted(self.beta.items())},
            "gamma": self.gamma,
            "chi": {k: _jsonable(v) for k, v in sorted(self.chi.items())},
        }


def _jsonable(x):
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


# -- joint tables ---------------------------------------------------------------

def joint_index(sizes: Sequence[int], assignment: Sequence[int]) -> int:
    """Row-major flat index of ``assignment`` in a product domain of ``sizes``."""
    if len(sizes) != len(assignment):
        raise PDGError("assignment length does not match scope")
    idx = 0
    for n, v in zip(sizes, assignment):
        if not 0 <= int(v) < n:
            raise PDGError(f"value {v} out of range for a variable of size {n}")
        idx = idx * n + int(v)
    return idx


@dataclass
class JointTable:
    scope: tuple
    sizes: tuple
    probs: np.ndarray

    def __post_init__(self):
        self.scope = tuple(self.scope)
        self.sizes = tuple(int(s) for s in self.sizes)
        self.probs = np.asarray(self.probs, dtype=float).ravel()
        if len(self.scope) != len(self.sizes):
            raise PDGError("scope and sizes differ in length")
        if self.probs.size != int(np.prod(self.sizes, dtype=np.int64)):
            raise PDGError(f"probs has {self.probs.size} entries, scope needs {np.prod(self.sizes)}")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > ROW_TOL:
            raise PDGError("joint table must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, scope, sizes) -> "JointTable":
        n = int(np.prod(sizes, dtype=np.int64))
        return cls(scope, sizes, np.full(n, 1.0 / n))

    @classmethod
    def for_pdg(cls, pdg: ParametricPDG, probs=None) -> "JointTable":
        sizes = pdg.sizes(pdg.var_ids)
        if probs is None:
            return cls.uniform(pdg.var_ids, sizes)
        return cls(pdg.var_ids, sizes, probs)

    def tensor(self) -> np.ndarray:
        return self.probs.reshape(self.sizes)

    def index(self, assignment) -> int:
        return joint_index(self.sizes, assignment)

    def axes(self, vids) -> list:
        pos = {v: i for i, v in enumerate(self.scope)}
        try:
            return [pos[v] for v in vids]
        except KeyError as err:
            raise PDGError(f"unknown variable {err.args[0]!r}") from None

    def reorder(self, scope) -> "JointTable":
        axes = self.axes(scope)
        if len(axes) != len(self.scope):
            raise PDGError("reorder needs a permutation of the scope")
        t = np.transpose(self.tensor(), axes)
        return JointTable(scope, t.shape, t.ravel())

    def marginal(self, subset) -> "JointTable":
        return marginal(self, subset)

    def conditional(self, targets, sources=()) -> np.ndarray:
        return conditional(self, targets, sources)


def marginal(mu: JointTable, subset) -> JointTable:
    """Marginal of ``mu`` on ``subset`` (in the order given)."""
    subset = tuple(subset)
    keep = mu.axes(subset)
    drop = tuple(i for i in range(len(mu.scope)) if i not in keep)
    t = mu.tensor().sum(axis=drop)
    # remaining axes are in scope order; permute to the requested order
    order = sorted(keep)
    t = np.transpose(t, [order.index(k) for k in keep]) if subset else np.asarray(t)
    sizes = tuple(mu.sizes[k] for k in keep)
    p = np.asarray(t).ravel()
    return JointTable(subset, sizes, p / p.sum())


def conditional(mu: JointTable, targets, sources=()) -> np.ndarray:
    """Row-stochastic table mu(targets | sources) of shape (n_src, n_tgt).

    Rows whose source assignment has zero mass are uniform.
    """
    targets, sources = tuple(targets), tuple(sources)
    if set(targets) & set(sources):
        raise PDGError("targets and sources must be disjoint")
    joint = marginal(mu, sources + targets)
    n_src = int(np.prod(joint.sizes[: len(sources)], dtype=np.int64))
    n_tgt = int(np.prod(joint.sizes[len(sources):], dtype=np.int64))
    t = joint.probs.reshape(n_src, n_tgt)
    mass = t.sum(axis=1, keepdims=True)
    out = np.full_like(t, 1.0 / n_tgt)
    np.divide(t, mass, out=out, where=mass[:, 0:1] > 0)
    return out
