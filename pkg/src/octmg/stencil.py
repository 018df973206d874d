"""Per-block Laplacian stencils with embedded Dirichlet boundaries.

Blocks away from objects use the constant 5/7-point Laplacian.  Blocks that
touch an object store per-cell coefficients: along each axis the two
one-sided gradients are divided by their lengths ``d dx`` and the
difference is divided by ``(d_minus + d_plus) dx / 2``.  A direction that is
cut by a boundary refers to the object's boundary value instead of the
neighbor; those terms are kept apart (``bw``) so boundary values can be
changed without repeating the root searches.  Cells whose center lies inside
an object are pinned to the object's value.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import _kernels as K
from .levelset import (LevelSetSpec, RootSearchConfig, boundary_length,
                       cell_distances_batch, evaluate, gradient, object_index,
                       resolve_thin_batch)
from .mesh import TreeMesh


@dataclass(frozen=True)
class StencilOptions:
    """Settings for boundary detection and thin-object handling.

    ``w_min`` is the smallest object width resolved on coarse grids; the
    gradient descent for unresolved objects runs on levels with
    ``dx > w_min`` when ``resolve_thin`` is set.
    """

    root: RootSearchConfig = field(default_factory=RootSearchConfig)
    w_min: float = 0.0
    safety_factor: float = 1.5
    resolve_thin: bool = True
    chunk_cells: int = 1 << 20

    def __post_init__(self):
        if self.w_min < 0:
            raise ValueError("w_min must be non-negative")
        if self.safety_factor <= 0:
            raise ValueError("safety_factor must be positive")


@dataclass
class LevelStencil:
    """Stencils of all blocks on one level.

    Arrays with a leading ``m`` dimension hold the boundary blocks listed in
    ``bidx``; ``bmap[b]`` is the row of block ``b`` or -1 for the constant
    Laplacian.  Per-cell arrays have shape ``(m, n, ..., n)``; ``coef`` has
    ``2*dim + 1`` entries per cell ordered center, -x, +x, -y, ...
    """

    dim: int
    n: int
    dx: float
    bidx: np.ndarray
    bmap: np.ndarray
    coef: np.ndarray
    bw: np.ndarray          # (m, 2*dim, ...) weights of boundary values
    bobj: np.ndarray        # (m, 2*dim, ...) object id per cut direction
    d: np.ndarray           # (m, 2*dim, ...) relative distances
    solved: np.ndarray      # (m, ...) uint8, 0 for pinned cells
    pobj: np.ndarray        # (m, ...) object id of pinned cells
    values: np.ndarray      # boundary value per object
    brhs: np.ndarray = None
    pinval: np.ndarray = None
    kind: np.ndarray = None  # (m, ...) 0 pinned, 1 cut, 2 regular
    n_thin: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        uncut = ~(self.bw > 0).any(axis=1)
        self.kind = (self.solved.astype(np.uint8) * (1 + uncut)).astype(np.uint8)
        self._refresh()

    def _refresh(self):
        v = self.values if self.values.size else np.zeros(1)
        self.brhs = np.sum(self.bw * v[self.bobj], axis=1)
        self.pinval = v[self.pobj]

    @property
    def idx2(self) -> float:
        return 1.0 / (self.dx * self.dx)

    @property
    def n_boundary(self) -> int:
        return int(self.bidx.size)

    def set_boundary_value(self, values):
        """Change object boundary values; uniform blocks are unaffected."""
        values = np.atleast_1d(np.asarray(values, dtype=float))
        if values.size != max(self.values.size, 1):
            raise ValueError(f"expected {self.values.size} boundary values")
        if not np.all(np.isfinite(values)):
            raise ValueError("boundary values must be finite")
        self.values = values
        self._refresh()

    def block(self, b) -> "BlockStencil":
        return block_stencil(self, b)


@dataclass
class BlockStencil:
    """Stencil of a single block.

    ``variant`` is ``"uniform"`` or ``"boundary"``.  For both variants
    ``coef`` holds full per-cell coefficients so the two can be compared
    directly; ``bsum`` is the per-cell sum of boundary weights and ``brhs``
    the boundary contribution for the current boundary values.
    """

    variant: str
    dx: float
    coef: np.ndarray
    bw: np.ndarray
    bsum: np.ndarray
    brhs: np.ndarray
    d: np.ndarray
    solved: np.ndarray
    pinval: np.ndarray


def uniform_coefficients(dim, n, dx) -> np.ndarray:
    c = np.full((2 * dim + 1,) + (n,) * dim, 1.0 / dx**2)
    c[0] = -2.0 * dim / dx**2
    return c


def block_stencil(st: LevelStencil, b) -> BlockStencil:
    k = int(st.bmap[b])
    shape = (st.n,) * st.dim
    if k < 0:
        return BlockStencil("uniform", st.dx, uniform_coefficients(st.dim, st.n, st.dx),
                            np.zeros((2 * st.dim,) + shape), np.zeros(shape),
                            np.zeros(shape), np.ones((2 * st.dim,) + shape),
                            np.ones(shape, dtype=bool), np.zeros(shape))
    return BlockStencil("boundary", st.dx, st.coef[k].copy(), st.bw[k].copy(),
                        st.bw[k].sum(axis=0), st.brhs[k].copy(), st.d[k].copy(),
                        st.solved[k].astype(bool), st.pinval[k].copy())


def coefficients_from_distances(d, cut, dx):
    """Boundary-modified coefficients from relative distances.

    ``d`` and ``cut`` have shape ``(2*dim, ...)``.  Returns ``(coef, bw)``:
    neighbor coefficients of cut directions are moved to ``bw``.
    """
    nd = d.shape[0]
    coef = np.zeros((nd + 1,) + d.shape[1:])
    bw = np.zeros(d.shape)
    for k in range(nd // 2):
        dm, dp = d[2 * k], d[2 * k + 1]
        w = 2.0 / ((dm + dp) * dx * dx)
        cm, cp = w / dm, w / dp
        coef[0] -= cm + cp
        for j, c in ((2 * k, cm), (2 * k + 1, cp)):
            coef[1 + j] = np.where(cut[j], 0.0, c)
            bw[j] = np.where(cut[j], c, 0.0)
    return coef, bw


def _detect(mesh, l, ids, lsf, opts):
    """Blocks needing per-cell stencils: a candidate cell in the interior or
    ghost ring, or an interior cell inside an object."""
    dx = mesh.dx(l)
    dim = mesh.dim
    per = (mesh.n + 2) ** dim
    out = np.zeros(ids.size, dtype=bool)
    step = max(1, opts.chunk_cells // per)
    L = boundary_length(dx, dim, opts.safety_factor)
    inner = (slice(None),) + (slice(1, mesh.n + 1),) * dim
    for s in range(0, ids.size, step):
        sub = ids[s:s + step]
        x = mesh.cell_centers(l, sub, ghost=1)
        f = evaluate(lsf, x)
        near = np.abs(f) < L * np.linalg.norm(gradient(lsf, x, dx), axis=-1)
        out[s:s + step] = (near.reshape(sub.size, -1).any(axis=1)
                           | (f[inner] <= 0.0).reshape(sub.size, -1).any(axis=1))
    return out


def _build_rows(mesh, l, ids, lsf, opts):
    dim, n = mesh.dim, mesh.n
    dx = mesh.dx(l)
    m = ids.size
    nc = n ** dim
    x = mesh.cell_centers(l, ids).reshape(m * nc, dim)
    f = evaluate(lsf, x)
    solved = f > 0.0
    L = boundary_length(dx, dim, opts.safety_factor)
    cand = solved & (np.abs(f) < L * np.linalg.norm(gradient(lsf, x, dx), axis=-1))

    d = np.ones((m * nc, 2 * dim))
    cut = np.zeros((m * nc, 2 * dim), dtype=bool)
    bobj = np.zeros((m * nc, 2 * dim), dtype=np.int8)
    sel = np.flatnonzero(cand)
    n_thin = 0
    if sel.size:
        ds, cs, x0 = cell_distances_batch(lsf, x[sel], dx, opts.root)
        d[sel], cut[sel] = ds, cs
        hit = np.nonzero(cs)
        bobj[sel[hit[0]], hit[1]] = object_index(lsf, x0[hit])
        if opts.resolve_thin and dx > opts.w_min > 0.0:
            thin = sel[~cs.any(axis=1)]
            if thin.size:
                dirs, dt, xt = resolve_thin_batch(lsf, x[thin], dx, opts.w_min, opts.root)
                ok = dirs >= 0
                t, dd = thin[ok], dirs[ok]
                d[t, dd] = dt[ok]
                cut[t, dd] = True
                bobj[t, dd] = object_index(lsf, xt[ok])
                n_thin = int(ok.sum())

    shape = (m,) + (n,) * dim
    dT = np.moveaxis(d.reshape(m, nc, 2 * dim), 2, 1).reshape((m, 2 * dim) + shape[1:])
    cT = np.moveaxis(cut.reshape(m, nc, 2 * dim), 2, 1).reshape(dT.shape)
    oT = np.moveaxis(bobj.reshape(m, nc, 2 * dim), 2, 1).reshape(dT.shape)
    coef, bw = coefficients_from_distances(np.moveaxis(dT, 1, 0), np.moveaxis(cT, 1, 0), dx)
    coef = np.ascontiguousarray(np.moveaxis(coef, 0, 1))
    bw = np.ascontiguousarray(np.moveaxis(bw, 0, 1))
    solved = solved.reshape(shape)
    pin = ~solved
    # identity rows for pinned cells
    coef[:, 0][pin] = 1.0
    for j in range(1, 2 * dim + 1):
        coef[:, j][pin] = 0.0
    bw[np.broadcast_to(pin[:, None], bw.shape)] = 0.0
    pobj = object_index(lsf, x).reshape(shape)
    return coef, bw, oT, dT, solved.astype(np.uint8), pobj, n_thin


def build_level_stencil(mesh: TreeMesh, l: int, lsf: Optional[LevelSetSpec],
                        opts: StencilOptions = StencilOptions()) -> LevelStencil:
    """Build the stencils of every block on level ``l``."""
    dim, n = mesh.dim, mesh.n
    lev = mesh.level(l)
    nb = lev.n_blocks
    cells = (n,) * dim
    if lsf is None:
        bidx = np.zeros(0, dtype=np.int64)
    else:
        bidx = np.flatnonzero(_detect(mesh, l, np.arange(nb), lsf, opts)).astype(np.int64)
    m = bidx.size
    coef = np.zeros((m, 2 * dim + 1) + cells)
    bw = np.zeros((m, 2 * dim) + cells)
    bobj = np.zeros((m, 2 * dim) + cells, dtype=np.int8)
    d = np.ones((m, 2 * dim) + cells)
    solved = np.ones((m,) + cells, dtype=np.uint8)
    pobj = np.zeros((m,) + cells, dtype=np.int8)
    n_thin = 0
    step = max(1, opts.chunk_cells // (n ** dim * 4 * dim))
    for s in range(0, m, step):
        sl = slice(s, s + step)
        (coef[sl], bw[sl], bobj[sl], d[sl], solved[sl], pobj[sl],
         t) = _build_rows(mesh, l, bidx[sl], lsf, opts)
        n_thin += t
    bmap = np.full(nb, -1, dtype=np.int32)
    bmap[bidx] = np.arange(m, dtype=np.int32)
    values = lsf.values if lsf is not None else np.zeros(0)
    return LevelStencil(dim=dim, n=n, dx=mesh.dx(l), bidx=bidx, bmap=bmap, coef=coef,
                        bw=bw, bobj=bobj, d=d, solved=solved, pobj=pobj,
                        values=values, n_thin=n_thin)


def build_block_stencil(mesh: TreeMesh, l: int, b: int, lsf: Optional[LevelSetSpec],
                        opts: StencilOptions = StencilOptions()) -> BlockStencil:
    """Stencil of block ``b`` on level ``l`` alone."""
    dim, n = mesh.dim, mesh.n
    ids = np.array([b], dtype=np.int64)
    if lsf is None or not _detect(mesh, l, ids, lsf, opts)[0]:
        st = LevelStencil(dim, n, mesh.dx(l), np.zeros(0, np.int64),
                          np.full(1, -1, np.int32), np.zeros((0, 2 * dim + 1) + (n,) * dim),
                          np.zeros((0, 2 * dim) + (n,) * dim),
                          np.zeros((0, 2 * dim) + (n,) * dim, np.int8),
                          np.ones((0, 2 * dim) + (n,) * dim),
                          np.ones((0,) + (n,) * dim, np.uint8),
                          np.zeros((0,) + (n,) * dim, np.int8),
                          lsf.values if lsf is not None else np.zeros(0))
        return block_stencil(st, 0)
    coef, bw, bobj, d, solved, pobj, _ = _build_rows(mesh, l, ids, lsf, opts)
    st = LevelStencil(dim, n, mesh.dx(l), ids, np.zeros(1, np.int32), coef, bw, bobj, d,
                      solved, pobj, lsf.values)
    return block_stencil(st, 0)


def build_stencils(mesh, lsf, opts=StencilOptions()) -> list:
    return [build_level_stencil(mesh, l, lsf, opts) for l in range(1, mesh.n_levels + 1)]


# --------------------------------------------------------------------------
# application

def apply(stencil: BlockStencil, phi) -> np.ndarray:
    """``L phi`` on the interior of one block; ``phi`` includes ghosts.

    Pinned cells return 0.
    """
    phi = np.asarray(phi, dtype=float)
    dim = phi.ndim
    n = phi.shape[0] - 2
    c = (slice(1, n + 1),) * dim
    out = stencil.coef[0] * phi[c] + stencil.brhs
    for k in range(dim):
        for j, s in ((2 * k, -1), (2 * k + 1, 1)):
            sl = list(c)
            sl[k] = slice(1 + s, n + 1 + s)
            out = out + stencil.coef[1 + j] * phi[tuple(sl)]
    return np.where(stencil.solved, out, 0.0)


def residual(stencil: BlockStencil, phi, g) -> np.ndarray:
    """``g - L phi`` on one block (0 at pinned cells)."""
    return np.where(stencil.solved, np.asarray(g) - apply(stencil, phi), 0.0)


def apply_level(mesh: TreeMesh, l: int, phi, st: LevelStencil, out, blocks=None):
    """Compiled ``out = L phi`` on blocks of level ``l`` (ghosts filled)."""
    fn = K.operator_2d if mesh.dim == 2 else K.operator_3d
    blocks = np.arange(phi.shape[0], dtype=np.int64) if blocks is None else blocks
    fn(phi, phi, out, blocks, 0, st.bmap, st.coef, st.brhs, st.kind, st.idx2)
    return out


def residual_level(mesh: TreeMesh, l: int, phi, g, st: LevelStencil, out, blocks=None):
    fn = K.operator_2d if mesh.dim == 2 else K.operator_3d
    blocks = np.arange(phi.shape[0], dtype=np.int64) if blocks is None else blocks
    fn(phi, g, out, blocks, 1, st.bmap, st.coef, st.brhs, st.kind, st.idx2)
    return out


def full_coefficients(st: LevelStencil, nb: int) -> np.ndarray:
    """Per-cell coefficients ``(nb, 2*dim + 1, n, ...)`` for every block."""
    c = np.broadcast_to(uniform_coefficients(st.dim, st.n, st.dx),
                        (nb, 2 * st.dim + 1) + (st.n,) * st.dim).copy()
    c[st.bidx] = st.coef
    return c


def assemble_level(mesh: TreeMesh, l: int, st: LevelStencil):
    """Sparse matrix of the operator on a level without coarse-fine faces.

    Returns ``(A, c, solved)`` with ``L phi = A phi + c`` for solved cells;
    rows of pinned cells are identity rows with ``c = 0``.  Unknowns are
    ordered block by block, cells in C order.
    """
    dim, n = mesh.dim, mesh.n
    lev = mesh.level(l)
    nb = lev.n_blocks
    nc = n ** dim
    coef = full_coefficients(st, nb).reshape(nb, 2 * dim + 1, nc)
    brhs = np.zeros((nb, nc))
    solved = np.ones((nb, nc), dtype=bool)
    if st.n_boundary:
        brhs[st.bidx] = st.brhs.reshape(st.n_boundary, nc)
        solved[st.bidx] = st.solved.reshape(st.n_boundary, nc).astype(bool)
    idx = np.stack(np.meshgrid(*([np.arange(n)] * dim), indexing="ij"), -1).reshape(nc, dim)
    rows_all = np.arange(nb * nc).reshape(nb, nc)
    R, C, V = [rows_all.ravel()], [rows_all.ravel()], [coef[:, 0].ravel()]
    c = brhs.copy()
    center = np.ones(dim, dtype=int)
    for k in range(dim):
        for sd in (0, 1):
            j = 2 * k + sd
            w = coef[:, 1 + j]                       # (nb, nc)
            tgt = idx.copy()
            tgt[:, k] += 2 * sd - 1
            inside = (tgt[:, k] >= 0) & (tgt[:, k] < n)
            # same block
            col = np.ravel_multi_index(np.where(inside[:, None], tgt, 0).T, (n,) * dim)
            R.append(rows_all[:, inside].ravel())
            C.append((rows_all[:, col])[:, inside].ravel())
            V.append(w[:, inside].ravel())
            # across the block face
            off = center.copy()
            off[k] += 2 * sd - 1
            nid = lev.nbr[(slice(None),) + tuple(off)]
            if np.any(nid == K.COARSE):
                raise ValueError(f"level {l} has coarse-fine faces; cannot assemble")
            wrap = tgt.copy()
            wrap[:, k] %= n
            wcol = np.ravel_multi_index(wrap.T, (n,) * dim)
            face = np.flatnonzero(~inside)
            same = np.flatnonzero(nid >= 0)
            R.append(rows_all[np.ix_(same, face)].ravel())
            C.append((nid[same, None] * nc + wcol[None, face]).ravel())
            V.append(w[np.ix_(same, face)].ravel())
            out = np.flatnonzero(nid == K.OUTSIDE)
            if out.size:
                # ghost = s * own + add
                s = mesh.bc_scale[j]
                r = lev.bc_index[out, j]
                tr = [m for m in range(dim) if m != k]
                tpos = np.ravel_multi_index(idx[face][:, tr].T, (n,) * (dim - 1)) \
                    if dim > 1 else np.zeros(face.size, int)
                add = lev.bc_add[r][:, tpos]
                R.append(rows_all[np.ix_(out, face)].ravel())
                C.append(rows_all[np.ix_(out, face)].ravel())
                V.append((s * w[np.ix_(out, face)]).ravel())
                c[np.ix_(out, face)] += w[np.ix_(out, face)] * add
    R, C, V = (np.concatenate(a) for a in (R, C, V))
    pinned = ~solved.ravel()
    keep = ~pinned[R] | (R == C)
    A = sp.csr_matrix((V[keep], (R[keep], C[keep])), shape=(nb * nc,) * 2)
    c = c.ravel()
    c[pinned] = 0.0
    return A, c, solved.ravel()


def dump_coefficients(st: LevelStencil, path, blocks=None):
    """Text dump of boundary-block coefficients, one cell per line."""
    lines = [f"# dim={st.dim} n={st.n} dx={st.dx!r}",
             "# block cell... solved center nbr[2*dim] bw[2*dim] d[2*dim]"]
    blocks = st.bidx if blocks is None else blocks
    for b in blocks:
        k = st.bmap[b]
        if k < 0:
            continue
        for cell in itertools.product(range(st.n), repeat=st.dim):
            at = (k, slice(None)) + cell
            vals = [*st.coef[at], *st.bw[at], *st.d[at]]
            lines.append(" ".join([str(int(b)), *map(str, cell), str(int(st.solved[(k,) + cell]))]
                                  + [f"{v:.17g}" for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n")
