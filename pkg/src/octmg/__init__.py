"""Geometric multigrid for Poisson's equation on block quadtrees/octrees with
irregular Dirichlet boundaries given by level set functions."""

from .fields import AnalyticSolution, ErrorNorms, error_norms, face_gradient, gradient_norm
from .harness import CaseConfig, CaseReport, run_case, scaling_probe, write_outputs
from .levelset import LevelSetSpec, RootSearchConfig, cell_distances, find_root
from .mesh import FaceBC, TreeMesh, build_uniform, fill_ghosts
from .multigrid import CoarseSolveError, MgConfig, MgState, fmg_cycle, run_cycles, v_cycle
from .stencil import StencilOptions, build_stencils

__version__ = "0.1.0"

__all__ = [
    "AnalyticSolution", "CaseConfig", "CaseReport", "CoarseSolveError", "ErrorNorms",
    "FaceBC", "LevelSetSpec", "MgConfig", "MgState", "RootSearchConfig", "StencilOptions",
    "TreeMesh", "build_stencils", "build_uniform", "cell_distances", "error_norms",
    "face_gradient", "fill_ghosts", "find_root", "fmg_cycle", "gradient_norm", "run_case",
    "run_cycles", "scaling_probe", "v_cycle", "write_outputs",
]
