"""FAS multigrid on block-structured trees.

Every level holds a full approximation of the solution.  Going down, the
residual of level ``l`` is averaged onto the blocks of level ``l - 1`` that
it covers, and the right-hand side there becomes ``L(R phi) + R r``.  Going
up, the change of the coarse solution is interpolated and added.  Levels
are smoothed with red-black Gauss-Seidel on all of their blocks.  The
coarsest level is solved with preconditioned BiCGStab on an assembled
sparse matrix.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pyamg
import scipy.sparse.linalg as spla

from . import _kernels as K
from .mesh import TreeMesh, fill_ghosts
from .stencil import LevelStencil, assemble_level, residual_level

log = logging.getLogger(__name__)


class CoarseSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class MgConfig:
    n_up: int = 2
    n_down: int = 2
    cycle: str = "fmg"
    coarse_rel_tol: float = 1e-6
    max_cycles: int = 10
    target_resid: float = 0.0
    coarse_max_iter: int = 500
    fallback_sweeps: int = 2000

    def __post_init__(self):
        if self.n_up < 1 or self.n_down < 1:
            raise ValueError("n_up and n_down must be at least 1")
        if not 0.0 < self.coarse_rel_tol < 1.0:
            raise ValueError("coarse_rel_tol must lie in (0, 1)")
        if self.cycle not in ("v", "fmg"):
            raise ValueError(f"unknown cycle type {self.cycle!r}")
        if self.max_cycles < 0:
            raise ValueError("max_cycles must be non-negative")


@dataclass
class CycleRecord:
    cycle: int
    max_resid: float
    l2_resid: float
    seconds: float


# above this many unknowns an AMG V-cycle replaces incomplete LU
AMG_THRESHOLD = 4096


class CoarseSolver:
    """Krylov solve of the coarsest level.

    Small systems are preconditioned with incomplete LU.  Larger ones (large
    blocks or many root blocks) use one smoothed-aggregation V-cycle, which
    keeps the cost per solve roughly linear in the number of unknowns.
    """

    def __init__(self, mesh: TreeMesh, st: LevelStencil, cfg: MgConfig):
        self.mesh = mesh
        self.st = st
        self.cfg = cfg
        self.A, self.c, self.solved = assemble_level(mesh, 1, st)
        self.pin = np.zeros(self.A.shape[0])
        if st.n_boundary:
            nc = mesh.n ** mesh.dim
            p = np.zeros((mesh.level(1).n_blocks, nc))
            p[st.bidx] = st.pinval.reshape(st.n_boundary, nc)
            self.pin = p.ravel()
        if self.A.shape[0] > AMG_THRESHOLD:
            ml = pyamg.smoothed_aggregation_solver(self.A.tocsr(), symmetry="nonsymmetric")
            self.M = ml.aspreconditioner(cycle="V")
        else:
            ilu = spla.spilu(self.A.tocsc(), drop_tol=1e-6, fill_factor=20)
            self.M = spla.LinearOperator(self.A.shape, ilu.solve)
        self.iterations = 0

    def solve(self, phi, rhs):
        """Solve in place for the interior of ``phi`` (level 1 arrays)."""
        mesh = self.mesh
        x0 = mesh.interior(phi).ravel()
        b = np.where(self.solved, mesh.interior(rhs).ravel() - self.c, self.pin)
        r0 = np.linalg.norm(b - self.A @ x0)
        floor = 1e-14 * max(np.linalg.norm(b), 1e-300)
        if r0 <= floor:
            return
        tol = max(self.cfg.coarse_rel_tol * r0, floor)
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = spla.bicgstab(self.A, b, x0=x0, rtol=0.0, atol=tol,
                                maxiter=self.cfg.coarse_max_iter, M=self.M, callback=cb)
        self.iterations += count[0]
        if info != 0 or not np.all(np.isfinite(x)):
            x = self._fallback(x0, b, tol, r0)
        mesh.interior(phi)[:] = x.reshape(mesh.interior(phi).shape)

    def _fallback(self, x0, b, tol, r0):
        if self.A.shape[0] > 8 ** self.mesh.dim:
            raise CoarseSolveError(
                f"coarse BiCGStab did not reach {tol:.3e} (initial residual {r0:.3e}) "
                f"within {self.cfg.coarse_max_iter} iterations")
        log.warning("coarse BiCGStab stalled; falling back to Gauss-Seidel sweeps")
        A = self.A.tocsr()
        diag = A.diagonal()
        x = x0.copy()
        for _ in range(self.cfg.fallback_sweeps):
            for i in range(A.shape[0]):
                s, e = A.indptr[i], A.indptr[i + 1]
                x[i] += (b[i] - A.data[s:e] @ x[A.indices[s:e]]) / diag[i]
            if np.linalg.norm(b - A @ x) <= tol:
                return x
        raise CoarseSolveError(
            f"coarse solve failed: residual {np.linalg.norm(b - A @ x):.3e} > {tol:.3e}")


class MgState:
    """Solver arrays and stencils for one mesh.

    ``phi`` and ``rhs`` live in ``mesh.fields``; ``rhs`` holds the source term
    on leaf blocks and the FAS right-hand side on covered blocks.
    """

    def __init__(self, mesh: TreeMesh, stencils: list, cfg: MgConfig = MgConfig()):
        if len(stencils) != mesh.n_levels:
            raise ValueError("need one stencil per level")
        self.mesh = mesh
        self.st = stencils
        self.cfg = cfg
        for name in ("phi", "rhs"):
            if name not in mesh.fields:
                mesh.add_field(name)
        self.phi = mesh.fields["phi"]
        self.rhs = mesh.fields["rhs"]
        self.old = [np.zeros(mesh.shape(l)) for l in range(1, mesh.n_levels + 1)]
        self.tmp = [np.zeros(mesh.shape(l)) for l in range(1, mesh.n_levels + 1)]
        self.leaves = [lev.leaves for lev in mesh.levels]
        self.parents = [lev.parents for lev in mesh.levels]
        self.all = [np.arange(lev.n_blocks, dtype=np.int64) for lev in mesh.levels]
        self.coarse = CoarseSolver(mesh, stencils[0], cfg)
        self.history: list[CycleRecord] = []
        self.initial_resid: Optional[tuple] = None
        self.have_guess = False
        d3 = mesh.dim == 3
        self._gsrb = K.gsrb_3d if d3 else K.gsrb_2d
        self._op = K.operator_3d if d3 else K.operator_2d
        self._restrict = K.restrict_3d if d3 else K.restrict_2d
        self._prolong = K.prolong_3d if d3 else K.prolong_2d
        self._pin = K.pin_3d if d3 else K.pin_2d
        self._norms = K.norms_3d if d3 else K.norms_2d
        for l in range(1, mesh.n_levels + 1):
            self.pin(l)

    @property
    def n_levels(self) -> int:
        return self.mesh.n_levels

    def set_rhs(self, func: Callable):
        """Sample a source term at the cell centers of every level."""
        for l in range(1, self.n_levels + 1):
            self.mesh.interior(self.rhs[l - 1])[:] = func(self.mesh.cell_centers(l))

    def pin(self, l):
        st = self.st[l - 1]
        if st.n_boundary:
            self._pin(self.phi[l - 1], st.bidx, st.solved, st.pinval)

    def fill(self, l, arr=None):
        fill_ghosts(self.mesh, l, self.phi if arr is None else arr)

    def fill_all(self):
        for l in range(1, self.n_levels + 1):
            self.fill(l)

    def set_boundary_value(self, values):
        for st in self.st:
            st.set_boundary_value(values)
        self.coarse = CoarseSolver(self.mesh, self.st[0], self.cfg)
        for l in range(1, self.n_levels + 1):
            self.pin(l)


# --------------------------------------------------------------------------
# building blocks

def gsrb_sweep(state: MgState, l: int, color: int):
    """One half-sweep on cells with ``(sum of global indices) % 2 == color``."""
    st = state.st[l - 1]
    dx = st.dx
    state._gsrb(state.phi[l - 1], state.rhs[l - 1], st.bmap, st.coef, st.brhs,
                st.kind, dx * dx, color)
    state.fill(l)


def smooth(state: MgState, l: int, n_sweeps: int):
    for _ in range(n_sweeps):
        gsrb_sweep(state, l, 0)
        gsrb_sweep(state, l, 1)


def residual(state: MgState, l: int, blocks=None):
    """Residual of level ``l`` into the scratch array (ghosts must be filled)."""
    st = state.st[l - 1]
    blocks = state.all[l - 1] if blocks is None else blocks
    residual_level(state.mesh, l, state.phi[l - 1], state.rhs[l - 1], st,
                   state.tmp[l - 1], blocks)
    return state.tmp[l - 1]


def restrict(state: MgState, l: int):
    """Move level ``l`` to ``l - 1``: average phi and the residual, then set
    the FAS right-hand side on the covered coarse blocks."""
    lev = state.mesh.level(l)
    residual(state, l)
    state._restrict(state.phi[l - 1], state.phi[l - 2], lev.parent, lev.offs)
    state._restrict(state.tmp[l - 1], state.tmp[l - 2], lev.parent, lev.offs)
    state.pin(l - 1)
    state.fill(l - 1)
    np.copyto(state.old[l - 2], state.phi[l - 2])
    st = state.st[l - 2]
    state._op(state.phi[l - 2], state.rhs[l - 2], state.tmp[l - 2], state.parents[l - 2], 2,
              st.bmap, st.coef, st.brhs, st.kind, st.idx2)


def prolong_correction(state: MgState, l: int, full=False):
    """Add the interpolated change of level ``l - 1`` to level ``l``.

    With ``full`` the coarse solution itself is interpolated instead.
    """
    lev = state.mesh.level(l)
    st = state.st[l - 1]
    state._prolong(state.phi[l - 2], state.old[l - 2], state.phi[l - 1], state.all[l - 1],
                   lev.parent, lev.offs, 0 if full else 1, st.bmap, st.solved)
    state.fill(l)


def coarse_solve(state: MgState):
    state.coarse.solve(state.phi[0], state.rhs[0])
    state.pin(1)
    state.fill(1)


def v_cycle(state: MgState, top: Optional[int] = None):
    """V-cycle over levels ``1..top``; returns nothing, see :func:`leaf_residual`."""
    cfg = state.cfg
    top = state.n_levels if top is None else top
    state.have_guess = True
    for l in range(top, 1, -1):
        smooth(state, l, cfg.n_down)
        restrict(state, l)
    coarse_solve(state)
    for l in range(2, top + 1):
        prolong_correction(state, l)
        smooth(state, l, cfg.n_up)


def restrict_source(state: MgState):
    """Start from zero: average the source term onto covered blocks.

    Without a guess the FAS right-hand side would carry the fine-level
    boundary terms of ``phi = 0``, so the first coarse solves would not
    approximate the solution.
    """
    for l in range(state.n_levels, 0, -1):
        state.phi[l - 1][:] = 0.0
        state.pin(l)
        if l > 1:
            lev = state.mesh.level(l)
            state._restrict(state.rhs[l - 1], state.rhs[l - 2], lev.parent, lev.offs)
    state.fill_all()


def fmg_cycle(state: MgState):
    """Restrict to all levels, then V-cycles up to each level in turn."""
    full = not state.have_guess
    if full:
        restrict_source(state)
    else:
        state.fill_all()
        for l in range(state.n_levels, 1, -1):
            restrict(state, l)
    state.have_guess = True
    for l in range(1, state.n_levels + 1):
        # the snapshot precedes the correction so that level l + 1 later
        # receives everything level l gained
        np.copyto(state.old[l - 1], state.phi[l - 1])
        if l > 1:
            prolong_correction(state, l, full)
        v_cycle(state, l)


def leaf_residual(state: MgState):
    """``(max, rms)`` of the residual over solved leaf cells."""
    rmax, ssq, cnt = 0.0, 0.0, 0
    state.fill_all()
    for l in range(1, state.n_levels + 1):
        ids = state.leaves[l - 1]
        if not ids.size:
            continue
        residual(state, l, ids)
        st = state.st[l - 1]
        a, b, c = state._norms(state.tmp[l - 1], ids, st.bmap, st.solved)
        rmax = max(rmax, a)
        ssq += b
        cnt += c
    return rmax, float(np.sqrt(ssq / cnt)) if cnt else 0.0


def run_cycles(state: MgState, n_cycles: Optional[int] = None,
               callback: Optional[Callable] = None) -> list:
    """Run cycles until ``max_cycles`` or the residual drops below target.

    The residual of the starting guess is kept in ``state.initial_resid``.
    """
    cfg = state.cfg
    n_cycles = cfg.max_cycles if n_cycles is None else n_cycles
    cycle = fmg_cycle if cfg.cycle == "fmg" else v_cycle
    if state.initial_resid is None:
        state.initial_resid = leaf_residual(state)
    for _ in range(n_cycles):
        t0 = time.perf_counter()
        cycle(state)
        dt = time.perf_counter() - t0
        rmax, rl2 = leaf_residual(state)
        rec = CycleRecord(len(state.history) + 1, rmax, rl2, dt)
        state.history.append(rec)
        log.info("cycle %d  max resid %.3e  l2 resid %.3e  %.3fs",
                 rec.cycle, rmax, rl2, dt)
        if callback is not None:
            callback(state, rec)
        if not np.isfinite(rmax):
            raise FloatingPointError(f"residual became {rmax} in cycle {rec.cycle}")
        if rmax < cfg.target_resid:
            break
    return state.history


def reduction_factors(history) -> np.ndarray:
    """Per-cycle max-residual reduction ``r[k-1] / r[k]`` (first entry omitted)."""
    r = np.array([h.max_resid for h in history])
    return r[:-1] / r[1:]
