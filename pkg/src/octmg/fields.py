"""Post-processing: analytic references, error norms and face gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .mesh import TreeMesh, fill_ghosts
from .stencil import LevelStencil


@dataclass(frozen=True)
class AnalyticSolution:
    """Potential around a sphere (3D) or circle (2D) at the origin.

    ``phi = phi_b + a ln(r / R)`` in 2D and ``phi_b + a (1 - R / r)`` in 3D.
    """

    dim: int
    radius: float
    phi_b: float = 0.0
    a: float = 1.0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def __call__(self, x):
        return analytic_eval(self, x)


def analytic_eval(sol: AnalyticSolution, x, strict=True) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != sol.dim:
        raise ValueError("point dimension does not match the solution")
    r = np.sqrt(np.sum(x * x, axis=-1))
    if strict and np.any(r < sol.radius * (1.0 - 1e-12)):
        raise ValueError("analytic solution is only defined outside the object")
    r = np.maximum(r, sol.radius)
    if sol.dim == 2:
        return sol.phi_b + sol.a * np.log(r / sol.radius)
    return sol.phi_b + sol.a * (1.0 - sol.radius / r)


@dataclass
class ErrorNorms:
    linf: float
    l2: float
    l2_volume: float
    n_cells: int


def _solved_masks(mesh, stencils, l, ids):
    shape = (ids.size,) + (mesh.n,) * mesh.dim
    mask = np.ones(shape, dtype=bool)
    if stencils is not None:
        st = stencils[l - 1]
        rows = st.bmap[ids]
        has = rows >= 0
        if has.any():
            mask[has] = st.solved[rows[has]].astype(bool)
    return mask


def error_norms(mesh: TreeMesh, phi, exact, stencils=None) -> ErrorNorms:
    """Max and RMS error over solved leaf cells.

    ``exact`` is a callable of cell centers.  The plain RMS weights every
    leaf cell equally; ``l2_volume`` weights cells by their volume.
    """
    arrs = mesh.fields[phi] if isinstance(phi, str) else phi
    linf, ssq, wsq, vol, cnt = 0.0, 0.0, 0.0, 0.0, 0
    for lev in mesh.levels:
        ids = lev.leaves
        if not ids.size:
            continue
        l = lev.lvl
        mask = _solved_masks(mesh, stencils, l, ids)
        x = mesh.cell_centers(l, ids)
        err = np.abs(mesh.interior(arrs[l - 1])[ids] - exact(x))[mask]
        if not err.size:
            continue
        linf = max(linf, float(err.max()))
        ssq += float(np.sum(err**2))
        cv = lev.dx ** mesh.dim
        wsq += cv * float(np.sum(err**2))
        vol += cv * err.size
        cnt += err.size
    if cnt == 0:
        return ErrorNorms(0.0, 0.0, 0.0, 0)
    return ErrorNorms(linf, np.sqrt(ssq / cnt), np.sqrt(wsq / vol), cnt)


def face_gradient(mesh: TreeMesh, l: int, phi, st: LevelStencil):
    """Face-centered gradient components on level ``l``.

    Returns one array per axis with ``n + 1`` faces along that axis.  Faces
    cut by a boundary use ``(phi_b - phi) / (d dx)`` from the solved side;
    faces between two pinned cells are zero.  Faces shared by two blocks get
    identical values.  Ghosts are refreshed first.
    """
    arrs = mesh.fields[phi] if isinstance(phi, str) else phi
    fill_ghosts(mesh, l, arrs)
    a = arrs[l - 1]
    dim, n = mesh.dim, mesh.n
    dx = mesh.dx(l)
    nb = a.shape[0]
    lev = mesh.level(l)
    cells = (nb,) + (n,) * dim
    solved = np.ones(cells, dtype=bool)
    cut = np.zeros((nb, 2 * dim) + (n,) * dim, dtype=bool)
    if st.n_boundary:
        solved[st.bidx] = st.solved.astype(bool)
        cut[st.bidx] = (st.bw > 0) & solved[st.bidx][:, None]
    sg = _with_ghosts(mesh, l, solved)
    values = st.values if st.values.size else np.zeros(1)
    out = []
    for k in range(dim):
        lo = [slice(None)] + [slice(1, n + 1)] * dim
        hi = list(lo)
        lo[1 + k] = slice(0, n + 1)
        hi[1 + k] = slice(1, n + 2)
        g = (a[tuple(hi)] - a[tuple(lo)]) / dx
        g[~sg[tuple(lo)] & ~sg[tuple(hi)]] = 0.0
        if st.n_boundary:
            c = mesh.interior(a)[st.bidx]
            sub = g[st.bidx]
            up = _shift(k, 1, n, dim)
            dn = _shift(k, 0, n, dim)
            for j, sl, sign in ((2 * k + 1, up, 1.0), (2 * k, dn, -1.0)):
                m = cut[st.bidx, j]
                bval = values[st.bobj[:, j]]
                face = sub[sl]
                face[m] = sign * (bval[m] - c[m]) / (st.d[:, j][m] * dx)
                sub[sl] = face
            g[st.bidx] = sub
            _reconcile(g, cut, lev, k, n, dim)
        out.append(g)
    return out


def _shift(k, lo, n, dim):
    sl = [slice(None)] * (dim + 1)
    sl[1 + k] = slice(lo, lo + n)
    return tuple(sl)


def _reconcile(g, cut, lev, k, n, dim):
    """Make both copies of a block-boundary face equal; a cut side wins."""
    off = [1] * dim
    off[k] = 2
    nid = lev.nbr[(slice(None),) + tuple(off)]
    A = np.flatnonzero(nid >= 0)
    if not A.size:
        return
    B = nid[A]
    fa = [slice(None)] * dim
    fb = [slice(None)] * dim
    fa[k] = n
    fb[k] = 0
    ca = [slice(None)] * dim
    cb = [slice(None)] * dim
    ca[k] = n - 1
    cb[k] = 0
    ga = g[A][(slice(None),) + tuple(fa)]
    gb = g[B][(slice(None),) + tuple(fb)]
    cut_a = cut[A, 2 * k + 1][(slice(None),) + tuple(ca)]
    cut_b = cut[B, 2 * k][(slice(None),) + tuple(cb)]
    val = np.where(cut_a, ga, np.where(cut_b, gb, ga))
    sa = (A,) + tuple(fa)
    sb = (B,) + tuple(fb)
    g[sa] = val
    g[sb] = val


def _with_ghosts(mesh, l, solved):
    """Solved mask with a ghost ring copied from same-level neighbors."""
    lev = mesh.level(l)
    m = np.ones((solved.shape[0],) + (mesh.n + 2,) * mesh.dim)
    mesh.interior(m)[:] = solved
    fn = K.ghost_faces_2d if mesh.dim == 2 else K.ghost_faces_3d
    fn(m, lev.nbr, lev.bc_index, np.zeros_like(lev.bc_add), np.ones(2 * mesh.dim), True)
    return m > 0.5


def gradient_norm(mesh: TreeMesh, l: int, phi, st: LevelStencil) -> np.ndarray:
    """Cell-centered ``|grad phi|`` from averaged face gradients; zero in
    pinned cells."""
    faces = face_gradient(mesh, l, phi, st)
    n, dim = mesh.n, mesh.dim
    acc = 0.0
    for k, g in enumerate(faces):
        lo = [slice(None)] * (dim + 1)
        hi = list(lo)
        lo[1 + k] = slice(0, n)
        hi[1 + k] = slice(1, n + 1)
        acc = acc + (0.5 * (g[tuple(lo)] + g[tuple(hi)])) ** 2
    out = np.sqrt(acc)
    if st.n_boundary:
        out[st.bidx] = np.where(st.solved.astype(bool), out[st.bidx], 0.0)
    return out
