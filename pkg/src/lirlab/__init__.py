"""Probabilistic dependency graphs and local inconsistency resolution."""

from .pdg import (Cpd, Focus, Hyperarc, JointTable, ParametricPDG, PDGError, Variable,
                  conditional, joint_index, load_pdg, marginal, pdg_from_json, save_pdg)
from .inconsistency import (InconsistencyResult, InnerSolverConfig, envelope_grad, oinc, sdef,
                            solve_inconsistency)

__version__ = "0.1.0"
