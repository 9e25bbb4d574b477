"""The classification triad: training, inference and adversarial examples as LIR.

The PDG has a label variable Y with two arcs: the classifier p_theta(Y | x),
a LinearSoftmax cpd whose single feature row is the input x, and the label
belief y. With y hard the inconsistency is KL(y || p_theta(.|x)), which is
-log p_theta(y|x) for a one-hot y. Controlling theta trains, controlling y
infers, and controlling x forms an adversarial example.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from ..pdg import GAUSSIAN_MEAN, LEARNABLE, LINEAR_SOFTMAX, Cpd, Focus, ParametricPDG, PDGError, Variable
from ..inconsistency import InnerSolverConfig, envelope_grad, solve_inconsistency
from ..lir import EULER, OdeConfig, lir_step

CONTROLS = ("theta", "y", "x")


@dataclass
class LinearClassifier:
    W: np.ndarray    # (n_labels, d)
    b: np.ndarray    # (n_labels,)

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.b.size != self.W.shape[0]:
            raise PDGError("bias needs one entry per label")

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b])

    @classmethod
    def from_params(cls, params, n_labels, d):
        params = np.asarray(params, dtype=float)
        return cls(params[: n_labels * d].reshape(n_labels, d), params[n_labels * d:])

    def probs(self, x) -> np.ndarray:
        z = self.W @ np.asarray(x, dtype=float) + self.b
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    def nll(self, x, y) -> float:
        """Cross-entropy -sum_c y_c log p(c | x)."""
        p = self.probs(x)
        y = _label(y, p.size)
        with np.errstate(divide="ignore"):
            return float(-(y[y > 0] * np.log(p[y > 0])).sum())


def _label(y, n):
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        out = np.zeros(n)
        out[int(y)] = 1.0
        return out
    if y.shape != (n,) or np.any(y < 0) or not math.isclose(y.sum(), 1.0, abs_tol=1e-9):
        raise PDGError("label must be an index or a distribution over labels")
    return y


def triad_pdg(model: LinearClassifier, x, y, beta_y: float = math.inf) -> ParametricPDG:
    n, d = model.W.shape
    pdg = ParametricPDG([Variable("Y", n)])
    pdg.add_arc("p", [], ["Y"], Cpd(LINEAR_SOFTMAX, 1, n, params=model.params,
                                    features=np.asarray(x, dtype=float)[None]))
    yt = np.clip(_label(y, n), 1e-300, None)
    pdg.add_arc("y", [], ["Y"], Cpd(LEARNABLE, 1, n, table=(yt / yt.sum())[None]), beta=beta_y)
    return pdg


def _logit_grad(pdg, focus) -> np.ndarray:
    """d inconsistency / d logits of p, read off the bias block of the envelope gradient."""
    res = solve_inconsistency(pdg, focus, InnerSolverConfig(exact=True))
    g = envelope_grad(pdg, focus, res.mu_star, respect_chi=False)["p"]
    n = pdg.sizes(["Y"])[0]
    return g[-n:]


def triad_resolve(model: LinearClassifier, x, y, control: str, steps: int = 1,
                  rate: float = 0.1, chi: float = 1.0):
    """Resolve the triad PDG with control over theta, y or x; returns the controlled quantity.

    theta: ``steps`` LIR steps with Euler flow at learning rate ``rate * chi``.
    y: with chi = inf, one full-control step projecting y onto p_theta(.|x).
    x: Euler descent on -log p_theta(y|x) w.r.t. x, chained through the logits.
    """
    if control not in CONTROLS:
        raise PDGError(f"control must be one of {CONTROLS}")
    n, d = model.W.shape
    x = np.asarray(x, dtype=float).copy()
    if control == "theta":
        pdg = triad_pdg(model, x, y)
        focus = Focus(alpha={}, beta={"p": 1.0, "y": math.inf}, chi={"p": chi})
        ode = OdeConfig(integrator=EULER, outer_iters_per_step=1, step_scale=rate)
        for _ in range(steps):
            lir_step(pdg, focus, ode, InnerSolverConfig(exact=True))
        return LinearClassifier.from_params(pdg.arc("p").cpd.params, n, d)
    if control == "y":
        pdg = triad_pdg(model, x, y, beta_y=1.0)
        focus = Focus(alpha={}, beta={"p": 1.0, "y": 1.0}, chi={"y": chi})
        ode = OdeConfig(integrator=EULER, outer_iters_per_step=1, step_scale=rate)
        for _ in range(1 if math.isinf(chi) else steps):
            lir_step(pdg, focus, ode, InnerSolverConfig(max_iters=2000, tolerance=1e-12, method="lbfgs"))
        return pdg.arc("y").cpd.table()[0]
    focus = Focus(alpha={}, beta={"p": 1.0, "y": math.inf})
    for _ in range(steps):
        pdg = triad_pdg(model, x, y)
        x = x - rate * chi * (model.W.T @ _logit_grad(pdg, focus))
    return x


@dataclass
class AdversarialTrace:
    x_adv: list = field(default_factory=list)
    attack: list = field(default_factory=list)   # -log p(y'|x') + |x' - x|^2 / 2 after each attack step
    patch_before: list = field(default_factory=list)
    patch_after: list = field(default_factory=list)
    models: list = field(default_factory=list)


def proximity(x_adv, x) -> float:
    """-log N(x' | x, I) without its constant, i.e. |x' - x|^2 / 2."""
    cpd = Cpd(GAUSSIAN_MEAN, 1, 1, params=np.asarray(x, dtype=float))
    d = np.asarray(x_adv).size
    return float(-cpd.gaussian_logpdf(x_adv) - 0.5 * d * math.log(2 * math.pi))


def adversarial_cycle(model: LinearClassifier, sample, steps: int = 1, attack_steps: int = 10,
                      patch_steps: int = 10, rate: float = 0.1) -> AdversarialTrace:
    """Alternate the attack focus (control x') and the patch focus (control theta).

    ``sample`` is (x, y, y_adv). The attack descends -log p(y_adv | x') plus
    the Gaussian proximity term; the patch trains theta so x' gets label y.
    """
    x, y, y_adv = sample
    x = np.asarray(x, dtype=float)
    n, d = model.W.shape
    x_adv = x.copy()
    tr = AdversarialTrace(x_adv=[x_adv.copy()], models=[model])
    focus = Focus(alpha={}, beta={"p": 1.0, "y": math.inf})
    for _ in range(steps):
        for _ in range(attack_steps):
            pdg = triad_pdg(model, x_adv, y_adv)
            g = model.W.T @ _logit_grad(pdg, focus) + (x_adv - x)
            x_adv = x_adv - rate * g
            tr.x_adv.append(x_adv.copy())
            tr.attack.append(model.nll(x_adv, y_adv) + proximity(x_adv, x))
        tr.patch_before.append(model.nll(x_adv, y))
        model = triad_resolve(model, x_adv, y, "theta", steps=patch_steps, rate=rate)
        tr.patch_after.append(model.nll(x_adv, y))
        tr.models.append(model)
    return tr
