"""Random chain-with-conflicts PDGs and the refocus-strategy comparison suite."""

from __future__ import annotations

import csv
import io
import logging
import re
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .inconsistency import InnerSolverConfig, solve_inconsistency
from .lir import (OdeConfig, RefocusStrategy, analysis_config, lir_run, resolution_percentage,
                  tv_distortion)
from .pdg import LEARNABLE, Cpd, Focus, ParametricPDG, Variable
from .rng import make_rng

log = logging.getLogger(__name__)

CHAIN_SPECS = ("chain_4v_3e", "chain_5v_4e", "chain_6v_5e", "chain_7v_6e")
CSV_COLUMNS = ("pdg", "strategy", "seed", "init", "final", "resolution_pct", "tv", "seconds")
MAX_TRIES = 1000
MIN_INCONSISTENCY = 1e-3   # suite instances must be genuinely inconsistent


@dataclass
class GeneratorSpec:
    n_vars: int
    m_edges: int
    seed: int = 0
    domain_sizes: Optional[list] = None

    def __post_init__(self):
        if self.n_vars < 2:
            raise ValueError("n_vars must be >= 2")
        if self.m_edges < 1:
            raise ValueError("m_edges must be >= 1")
        if self.m_edges // 2 > self.n_vars - 1:
            raise ValueError(f"{self.m_edges // 2} chain edges do not fit on {self.n_vars} variables")
        if self.domain_sizes is None:
            rng = make_rng(self.seed, 0)
            self.domain_sizes = [int(s) for s in rng.choice([2, 3], size=self.n_vars)]
        elif len(self.domain_sizes) != self.n_vars:
            raise ValueError("domain_sizes needs one entry per variable")

    @property
    def name(self) -> str:
        return f"chain_{self.n_vars}v_{self.m_edges}e"

    @classmethod
    def parse(cls, name: str, seed: int = 0) -> "GeneratorSpec":
        m = re.fullmatch(r"chain_(\d+)v_(\d+)e", name.strip())
        if not m:
            raise ValueError(f"bad generator spec {name!r}; expected chain_<n>v_<m>e")
        return cls(int(m.group(1)), int(m.group(2)), seed)


def generate_chain_pdg(spec: GeneratorSpec, min_inconsistency: Optional[float] = None) -> ParametricPDG:
    """Chain X0 -> X1 -> ... plus conflict edges aimed at existing targets.

    With ``min_inconsistency`` the cpds are redrawn (same graph, same stream)
    until the full-attention inconsistency exceeds it.
    """
    rng = make_rng(spec.seed, 1)
    n, m = spec.n_vars, spec.m_edges
    names = [f"X{i}" for i in range(n)]
    edges = [(i, i + 1) for i in range(m // 2)]
    tries = 0
    while len(edges) < m:
        tries += 1
        if tries > MAX_TRIES:
            raise ValueError(f"could not place {m - m // 2} distinct conflict edges on {n} variables")
        targets = sorted({j for _, j in edges})
        if not targets:
            # no chain edge yet (m == 1): any variable may serve as the first target
            targets = list(range(n))
        j = targets[int(rng.integers(len(targets)))]
        i = int(rng.integers(n - 1))
        if i >= j:
            i += 1
        if (i, j) in edges:
            continue
        edges.append((i, j))
    for _ in range(MAX_TRIES):
        pdg = ParametricPDG([Variable(v, s) for v, s in zip(names, spec.domain_sizes)])
        for k, (i, j) in enumerate(edges):
            rows = rng.dirichlet(np.ones(spec.domain_sizes[j]), size=spec.domain_sizes[i])
            pdg.add_arc(f"a{k}", (names[i],), (names[j],),
                        Cpd(LEARNABLE, spec.domain_sizes[i], spec.domain_sizes[j], table=rows))
        if min_inconsistency is None:
            return pdg
        val = solve_inconsistency(pdg, Focus.uniform(pdg), analysis_config()).value
        if val > min_inconsistency:
            return pdg
    raise ValueError(f"no draw of {spec.name} reached inconsistency {min_inconsistency}")


@dataclass
class SuiteRow:
    pdg: str
    strategy: str
    seed: int
    init: float = float("nan")
    final: float = float("nan")
    resolution_pct: float = float("nan")
    tv: float = float("nan")
    seconds: float = 0.0
    inner_iters: int = 0
    failed: bool = False
    error: str = ""


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)

    def ok(self) -> list:
        return [r for r in self.rows if not r.failed]

    def aggregate(self) -> dict:
        """(strategy) -> {resolution_mean, resolution_std, tv_mean, tv_std, n}."""
        out = {}
        for s in sorted({r.strategy for r in self.rows}):
            rs = [r for r in self.ok() if r.strategy == s]
            res = np.array(sorted(r.resolution_pct for r in rs))
            tv = np.array(sorted(r.tv for r in rs))
            out[s] = {"resolution_mean": float(res.mean()) if rs else float("nan"),
                      "resolution_std": float(res.std()) if rs else float("nan"),
                      "tv_mean": float(tv.mean()) if rs else float("nan"),
                      "tv_std": float(tv.std()) if rs else float("nan"),
                      "n": len(rs)}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.pdg, r.strategy, r.seed] + [
                "failed" if r.failed else f"{v:.10g}"
                for v in (r.init, r.final, r.resolution_pct, r.tv)] + [f"{r.seconds:.6f}"])
        return buf.getvalue()


def run_cell(spec: GeneratorSpec, strategy: str, seed: int, steps: int = 20,
             ode_cfg: Optional[OdeConfig] = None, inner_cfg: Optional[InnerSolverConfig] = None,
             analysis_cfg: Optional[InnerSolverConfig] = None, timing: bool = True) -> SuiteRow:
    row = SuiteRow(spec.name, strategy, seed)
    t0 = time.perf_counter()
    try:
        pdg = generate_chain_pdg(spec, MIN_INCONSISTENCY)
        strat = RefocusStrategy(strategy, seed=seed)
        tr = lir_run(pdg, strat, steps, ode_cfg, inner_cfg, analysis_cfg, track_full=False,
                     timing=timing)
        if tr.aborted:
            raise RuntimeError(tr.error)
        row.init, row.final = tr.init_value, tr.final_value
        row.resolution_pct = resolution_percentage(tr) if steps else 0.0
        row.tv = tv_distortion(tr.init_mu, tr.final_mu) if steps else 0.0
        row.inner_iters = tr.inner_iters
    except Exception as e:  # per-cell failures are recorded; the suite continues
        log.warning("cell %s/%s/%d failed: %s", spec.name, strategy, seed, e)
        row.failed, row.error = True, str(e)
    row.seconds = time.perf_counter() - t0 if timing else 0.0
    return row


def run_strategy_suite(specs: Sequence, strategies: Sequence[str], seeds: Sequence[int],
                       steps: int = 20, ode_cfg: Optional[OdeConfig] = None,
                       inner_cfg: Optional[InnerSolverConfig] = None,
                       analysis_cfg: Optional[InnerSolverConfig] = None,
                       timing: bool = True, workers: int = 1) -> ExperimentReport:
    """Every (spec, strategy, seed) cell.

    Specs given by name are instantiated with the cell's seed, so each seed
    sees a different random PDG; GeneratorSpec objects are used as given.
    """
    if not specs or not strategies or not seeds:
        raise ValueError("specs, strategies and seeds must be nonempty")
    jobs = [(GeneratorSpec.parse(sp, sd) if isinstance(sp, str) else sp, st, sd)
            for sp in specs for st in strategies for sd in seeds]
    args = dict(steps=steps, ode_cfg=ode_cfg, inner_cfg=inner_cfg, analysis_cfg=analysis_cfg,
                timing=timing)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_run_job, [(j, args) for j in jobs]))
    else:
        rows = [run_cell(*j, **args) for j in jobs]
    return ExperimentReport(rows)


def _run_job(packed):
    (sp, st, sd), args = packed
    return run_cell(sp, st, sd, **args)
