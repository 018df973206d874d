"""Compiled loops over stacked block arrays.

A level is stored as one array with the block index first and one ghost
layer per side: ``(nb, n + 2, n + 2)`` in 2D and ``(nb, n + 2, n + 2, n + 2)``
in 3D.  Blocks near boundaries carry per-cell coefficients; ``bmap[b]`` is
their row in the coefficient arrays or -1 for the constant Laplacian.

Coefficient order is ``[center, -x, +x, -y, +y, -z, +z]``.  ``brhs`` holds
the boundary terms moved out of the stencil and ``solved`` is zero for
cells pinned inside an object.  Smoothing and operator kernels take a
``kind`` array instead: 0 pinned, 1 cut by a boundary, 2 regular (the
constant Laplacian applies even inside a boundary block).

Neighbor tables ``nbr`` have shape ``(nb, 3, 3)`` / ``(nb, 3, 3, 3)`` and are
indexed by offset + 1.  Entries are a same-level block id, -1 where the
region is only covered by a coarser level, or -2 outside the domain.
"""
import numba as nb
import numpy as np

_jit = dict(cache=True, nogil=True)

COARSE = -1
OUTSIDE = -2


# --------------------------------------------------------------------------
# Laplacian at one cell

@nb.njit(inline="always", **_jit)
def _lap2(a, b, i, j, k, coef, brhs, idx2):
    if k < 0:
        return (a[b, i - 1, j] + a[b, i + 1, j] + a[b, i, j - 1] + a[b, i, j + 1]
                - 4.0 * a[b, i, j]) * idx2
    ii = i - 1
    jj = j - 1
    return (coef[k, 0, ii, jj] * a[b, i, j]
            + coef[k, 1, ii, jj] * a[b, i - 1, j] + coef[k, 2, ii, jj] * a[b, i + 1, j]
            + coef[k, 3, ii, jj] * a[b, i, j - 1] + coef[k, 4, ii, jj] * a[b, i, j + 1]
            + brhs[k, ii, jj])


@nb.njit(inline="always", **_jit)
def _lap3(a, b, i, j, l, k, coef, brhs, idx2):
    if k < 0:
        return (a[b, i - 1, j, l] + a[b, i + 1, j, l] + a[b, i, j - 1, l]
                + a[b, i, j + 1, l] + a[b, i, j, l - 1] + a[b, i, j, l + 1]
                - 6.0 * a[b, i, j, l]) * idx2
    ii = i - 1
    jj = j - 1
    ll = l - 1
    return (coef[k, 0, ii, jj, ll] * a[b, i, j, l]
            + coef[k, 1, ii, jj, ll] * a[b, i - 1, j, l]
            + coef[k, 2, ii, jj, ll] * a[b, i + 1, j, l]
            + coef[k, 3, ii, jj, ll] * a[b, i, j - 1, l]
            + coef[k, 4, ii, jj, ll] * a[b, i, j + 1, l]
            + coef[k, 5, ii, jj, ll] * a[b, i, j, l - 1]
            + coef[k, 6, ii, jj, ll] * a[b, i, j, l + 1]
            + brhs[k, ii, jj, ll])


# --------------------------------------------------------------------------
# smoothing

@nb.njit(**_jit)
def gsrb_2d(phi, rhs, bmap, coef, brhs, kind, dx2, color):
    n = phi.shape[1] - 2
    for b in range(phi.shape[0]):
        k = bmap[b]
        if k < 0:
            for i in range(1, n + 1):
                for j in range(1 + (i + 1 + color) % 2, n + 1, 2):
                    phi[b, i, j] = 0.25 * (phi[b, i - 1, j] + phi[b, i + 1, j]
                                           + phi[b, i, j - 1] + phi[b, i, j + 1]
                                           - dx2 * rhs[b, i, j])
            continue
        for i in range(1, n + 1):
            for j in range(1 + (i + 1 + color) % 2, n + 1, 2):
                ii = i - 1
                jj = j - 1
                c = kind[k, ii, jj]
                if c == 2:
                    phi[b, i, j] = 0.25 * (phi[b, i - 1, j] + phi[b, i + 1, j]
                                           + phi[b, i, j - 1] + phi[b, i, j + 1]
                                           - dx2 * rhs[b, i, j])
                elif c == 1:
                    phi[b, i, j] = (rhs[b, i, j] - brhs[k, ii, jj]
                                    - coef[k, 1, ii, jj] * phi[b, i - 1, j]
                                    - coef[k, 2, ii, jj] * phi[b, i + 1, j]
                                    - coef[k, 3, ii, jj] * phi[b, i, j - 1]
                                    - coef[k, 4, ii, jj] * phi[b, i, j + 1]) / coef[k, 0, ii, jj]


@nb.njit(**_jit)
def gsrb_3d(phi, rhs, bmap, coef, brhs, kind, dx2, color):
    n = phi.shape[1] - 2
    sixth = 1.0 / 6.0
    for b in range(phi.shape[0]):
        k = bmap[b]
        if k < 0:
            for i in range(1, n + 1):
                for j in range(1, n + 1):
                    for l in range(1 + (i + j + color) % 2, n + 1, 2):
                        phi[b, i, j, l] = sixth * (
                            phi[b, i - 1, j, l] + phi[b, i + 1, j, l]
                            + phi[b, i, j - 1, l] + phi[b, i, j + 1, l]
                            + phi[b, i, j, l - 1] + phi[b, i, j, l + 1]
                            - dx2 * rhs[b, i, j, l])
            continue
        for i in range(1, n + 1):
            for j in range(1, n + 1):
                for l in range(1 + (i + j + color) % 2, n + 1, 2):
                    ii = i - 1
                    jj = j - 1
                    ll = l - 1
                    c = kind[k, ii, jj, ll]
                    if c == 2:
                        phi[b, i, j, l] = sixth * (
                            phi[b, i - 1, j, l] + phi[b, i + 1, j, l]
                            + phi[b, i, j - 1, l] + phi[b, i, j + 1, l]
                            + phi[b, i, j, l - 1] + phi[b, i, j, l + 1]
                            - dx2 * rhs[b, i, j, l])
                    elif c == 1:
                        phi[b, i, j, l] = (
                            rhs[b, i, j, l] - brhs[k, ii, jj, ll]
                            - coef[k, 1, ii, jj, ll] * phi[b, i - 1, j, l]
                            - coef[k, 2, ii, jj, ll] * phi[b, i + 1, j, l]
                            - coef[k, 3, ii, jj, ll] * phi[b, i, j - 1, l]
                            - coef[k, 4, ii, jj, ll] * phi[b, i, j + 1, l]
                            - coef[k, 5, ii, jj, ll] * phi[b, i, j, l - 1]
                            - coef[k, 6, ii, jj, ll] * phi[b, i, j, l + 1]
                        ) / coef[k, 0, ii, jj, ll]


# --------------------------------------------------------------------------
# operator application
#
# mode 0: out = L(phi)
# mode 1: out = rhs - L(phi)          (residual, zero at pinned cells)
# mode 2: rhs = L(phi) + out          (FAS right-hand side)

@nb.njit(**_jit)
def operator_2d(phi, rhs, out, blocks, mode, bmap, coef, brhs, kind, idx2):
    n = phi.shape[1] - 2
    for q in range(blocks.shape[0]):
        b = blocks[q]
        k = bmap[b]
        for i in range(1, n + 1):
            for j in range(1, n + 1):
                c = 2 if k < 0 else kind[k, i - 1, j - 1]
                if c == 0:
                    lap = 0.0
                    if mode == 1:
                        out[b, i, j] = 0.0
                        continue
                else:
                    lap = _lap2(phi, b, i, j, -1 if c == 2 else k, coef, brhs, idx2)
                if mode == 0:
                    out[b, i, j] = lap
                elif mode == 1:
                    out[b, i, j] = rhs[b, i, j] - lap
                else:
                    rhs[b, i, j] = lap + out[b, i, j]


@nb.njit(**_jit)
def operator_3d(phi, rhs, out, blocks, mode, bmap, coef, brhs, kind, idx2):
    n = phi.shape[1] - 2
    for q in range(blocks.shape[0]):
        b = blocks[q]
        k = bmap[b]
        for i in range(1, n + 1):
            for j in range(1, n + 1):
                for l in range(1, n + 1):
                    c = 2 if k < 0 else kind[k, i - 1, j - 1, l - 1]
                    if c == 0:
                        lap = 0.0
                        if mode == 1:
                            out[b, i, j, l] = 0.0
                            continue
                    else:
                        lap = _lap3(phi, b, i, j, l, -1 if c == 2 else k, coef, brhs, idx2)
                    if mode == 0:
                        out[b, i, j, l] = lap
                    elif mode == 1:
                        out[b, i, j, l] = rhs[b, i, j, l] - lap
                    else:
                        rhs[b, i, j, l] = lap + out[b, i, j, l]


@nb.njit(**_jit)
def norms_2d(res, blocks, bmap, solved):
    """Max norm, sum of squares and count over solved cells of ``blocks``."""
    n = res.shape[1] - 2
    rmax = 0.0
    ssq = 0.0
    cnt = 0
    for q in range(blocks.shape[0]):
        b = blocks[q]
        k = bmap[b]
        for i in range(n):
            for j in range(n):
                if k >= 0 and not solved[k, i, j]:
                    continue
                v = abs(res[b, i + 1, j + 1])
                rmax = max(rmax, v)
                ssq += v * v
                cnt += 1
    return rmax, ssq, cnt


@nb.njit(**_jit)
def norms_3d(res, blocks, bmap, solved):
    n = res.shape[1] - 2
    rmax = 0.0
    ssq = 0.0
    cnt = 0
    for q in range(blocks.shape[0]):
        b = blocks[q]
        k = bmap[b]
        for i in range(n):
            for j in range(n):
                for l in range(n):
                    if k >= 0 and not solved[k, i, j, l]:
                        continue
                    v = abs(res[b, i + 1, j + 1, l + 1])
                    rmax = max(rmax, v)
                    ssq += v * v
                    cnt += 1
    return rmax, ssq, cnt


# --------------------------------------------------------------------------
# inter-level transfer

@nb.njit(**_jit)
def restrict_2d(fine, coarse, parent, offs):
    n = fine.shape[1] - 2
    h = n // 2
    for b in range(fine.shape[0]):
        p = parent[b]
        oi = 1 + offs[b, 0] * h
        oj = 1 + offs[b, 1] * h
        for I in range(h):
            for J in range(h):
                i = 1 + 2 * I
                j = 1 + 2 * J
                coarse[p, oi + I, oj + J] = 0.25 * (
                    fine[b, i, j] + fine[b, i + 1, j] + fine[b, i, j + 1] + fine[b, i + 1, j + 1])


@nb.njit(**_jit)
def restrict_3d(fine, coarse, parent, offs):
    n = fine.shape[1] - 2
    h = n // 2
    for b in range(fine.shape[0]):
        p = parent[b]
        oi = 1 + offs[b, 0] * h
        oj = 1 + offs[b, 1] * h
        ol = 1 + offs[b, 2] * h
        for I in range(h):
            for J in range(h):
                for L in range(h):
                    i = 1 + 2 * I
                    j = 1 + 2 * J
                    l = 1 + 2 * L
                    coarse[p, oi + I, oj + J, ol + L] = 0.125 * (
                        fine[b, i, j, l] + fine[b, i + 1, j, l]
                        + fine[b, i, j + 1, l] + fine[b, i + 1, j + 1, l]
                        + fine[b, i, j, l + 1] + fine[b, i + 1, j, l + 1]
                        + fine[b, i, j + 1, l + 1] + fine[b, i + 1, j + 1, l + 1])


# mode 0: fine = P(cnew);  mode 1: fine += P(cnew - cold).  Pinned fine cells
# are skipped.

@nb.njit(**_jit)
def prolong_2d(cnew, cold, fine, blocks, parent, offs, mode, bmap, solved):
    n = fine.shape[1] - 2
    h = n // 2
    for q in range(blocks.shape[0]):
        b = blocks[q]
        p = parent[b]
        k = bmap[b]
        for i in range(n):
            I = 1 + offs[b, 0] * h + i // 2
            si = 1 if i % 2 == 1 else -1
            for j in range(n):
                if k >= 0 and not solved[k, i, j]:
                    continue
                J = 1 + offs[b, 1] * h + j // 2
                sj = 1 if j % 2 == 1 else -1
                v = (0.5625 * cnew[p, I, J] + 0.1875 * (cnew[p, I + si, J] + cnew[p, I, J + sj])
                     + 0.0625 * cnew[p, I + si, J + sj])
                if mode == 1:
                    v -= (0.5625 * cold[p, I, J] + 0.1875 * (cold[p, I + si, J] + cold[p, I, J + sj])
                          + 0.0625 * cold[p, I + si, J + sj])
                    fine[b, i + 1, j + 1] += v
                else:
                    fine[b, i + 1, j + 1] = v


@nb.njit(**_jit)
def _tri(c, p, I, J, L, si, sj, sl):
    return (0.421875 * c[p, I, J, L]
            + 0.140625 * (c[p, I + si, J, L] + c[p, I, J + sj, L] + c[p, I, J, L + sl])
            + 0.046875 * (c[p, I + si, J + sj, L] + c[p, I + si, J, L + sl] + c[p, I, J + sj, L + sl])
            + 0.015625 * c[p, I + si, J + sj, L + sl])


@nb.njit(**_jit)
def prolong_3d(cnew, cold, fine, blocks, parent, offs, mode, bmap, solved):
    n = fine.shape[1] - 2
    h = n // 2
    for q in range(blocks.shape[0]):
        b = blocks[q]
        p = parent[b]
        k = bmap[b]
        for i in range(n):
            I = 1 + offs[b, 0] * h + i // 2
            si = 1 if i % 2 == 1 else -1
            for j in range(n):
                J = 1 + offs[b, 1] * h + j // 2
                sj = 1 if j % 2 == 1 else -1
                for l in range(n):
                    if k >= 0 and not solved[k, i, j, l]:
                        continue
                    L = 1 + offs[b, 2] * h + l // 2
                    sl = 1 if l % 2 == 1 else -1
                    v = _tri(cnew, p, I, J, L, si, sj, sl)
                    if mode == 1:
                        fine[b, i + 1, j + 1, l + 1] += v - _tri(cold, p, I, J, L, si, sj, sl)
                    else:
                        fine[b, i + 1, j + 1, l + 1] = v


@nb.njit(**_jit)
def pin_2d(phi, bidx, solved, pinval):
    n = phi.shape[1] - 2
    for k in range(bidx.shape[0]):
        b = bidx[k]
        for i in range(n):
            for j in range(n):
                if not solved[k, i, j]:
                    phi[b, i + 1, j + 1] = pinval[k, i, j]


@nb.njit(**_jit)
def pin_3d(phi, bidx, solved, pinval):
    n = phi.shape[1] - 2
    for k in range(bidx.shape[0]):
        b = bidx[k]
        for i in range(n):
            for j in range(n):
                for l in range(n):
                    if not solved[k, i, j, l]:
                        phi[b, i + 1, j + 1, l + 1] = pinval[k, i, j, l]


# --------------------------------------------------------------------------
# ghost cells
#
# Faces are numbered f = 2 * axis + side (side 0 = low, 1 = high).

@nb.njit(**_jit)
def ghost_faces_2d(a, nbr, bc_index, bc_add, bc_scale, homogeneous):
    """Same-level copies and physical boundary faces."""
    n = a.shape[1] - 2
    for b in range(a.shape[0]):
        for f in range(4):
            ax = f // 2
            sd = f % 2
            if ax == 0:
                nid = nbr[b, 2 * sd, 1]
            else:
                nid = nbr[b, 1, 2 * sd]
            g = (n + 1) * sd
            src = n - (n - 1) * sd
            own = 1 + (n - 1) * sd
            if nid >= 0:
                for t in range(1, n + 1):
                    if ax == 0:
                        a[b, g, t] = a[nid, src, t]
                    else:
                        a[b, t, g] = a[nid, t, src]
            elif nid == OUTSIDE:
                r = bc_index[b, f]
                s = bc_scale[f]
                for t in range(1, n + 1):
                    add = 0.0 if homogeneous else bc_add[r, t - 1]
                    if ax == 0:
                        a[b, g, t] = s * a[b, own, t] + add
                    else:
                        a[b, t, g] = s * a[b, t, own] + add


@nb.njit(**_jit)
def ghost_faces_3d(a, nbr, bc_index, bc_add, bc_scale, homogeneous):
    n = a.shape[1] - 2
    for b in range(a.shape[0]):
        for f in range(6):
            ax = f // 2
            sd = f % 2
            if ax == 0:
                nid = nbr[b, 2 * sd, 1, 1]
            elif ax == 1:
                nid = nbr[b, 1, 2 * sd, 1]
            else:
                nid = nbr[b, 1, 1, 2 * sd]
            g = (n + 1) * sd
            src = n - (n - 1) * sd
            own = 1 + (n - 1) * sd
            if nid >= 0:
                for t in range(1, n + 1):
                    for u in range(1, n + 1):
                        if ax == 0:
                            a[b, g, t, u] = a[nid, src, t, u]
                        elif ax == 1:
                            a[b, t, g, u] = a[nid, t, src, u]
                        else:
                            a[b, t, u, g] = a[nid, t, u, src]
            elif nid == OUTSIDE:
                r = bc_index[b, f]
                s = bc_scale[f]
                for t in range(1, n + 1):
                    for u in range(1, n + 1):
                        add = 0.0 if homogeneous else bc_add[r, (t - 1) * n + u - 1]
                        if ax == 0:
                            a[b, g, t, u] = s * a[b, own, t, u] + add
                        elif ax == 1:
                            a[b, t, g, u] = s * a[b, t, own, u] + add
                        else:
                            a[b, t, u, g] = s * a[b, t, u, own] + add


@nb.njit(**_jit)
def ghost_coarse_2d(a, ac, nbr, parent, offs, nbr_c):
    """Refinement-boundary faces.

    The ghost value averages a transversely interpolated coarse value with
    a linear extrapolation of the two nearest fine cells, so the fine fluxes
    through a coarse face average to the coarse flux.
    """
    n = a.shape[1] - 2
    h = n // 2
    for b in range(a.shape[0]):
        p = parent[b]
        for f in range(4):
            ax = f // 2
            sd = f % 2
            if ax == 0:
                nid = nbr[b, 2 * sd, 1]
                cn = nbr_c[p, 2 * sd, 1]
            else:
                nid = nbr[b, 1, 2 * sd]
                cn = nbr_c[p, 1, 2 * sd]
            if nid != COARSE:
                continue
            g = (n + 1) * sd
            own1 = 1 + (n - 1) * sd
            own2 = 2 + (n - 3) * sd
            cidx = n - (n - 1) * sd
            to = offs[b, 1 - ax] * h
            for t in range(n):
                T = 1 + to + t // 2
                st = 0.125 if t % 2 == 1 else -0.125
                if ax == 0:
                    c = ac[cn, cidx, T] + st * (ac[cn, cidx, T + 1] - ac[cn, cidx, T - 1])
                    a[b, g, t + 1] = 0.5 * c + 0.75 * a[b, own1, t + 1] - 0.25 * a[b, own2, t + 1]
                else:
                    c = ac[cn, T, cidx] + st * (ac[cn, T + 1, cidx] - ac[cn, T - 1, cidx])
                    a[b, t + 1, g] = 0.5 * c + 0.75 * a[b, t + 1, own1] - 0.25 * a[b, t + 1, own2]


@nb.njit(**_jit)
def ghost_coarse_3d(a, ac, nbr, parent, offs, nbr_c):
    n = a.shape[1] - 2
    h = n // 2
    for b in range(a.shape[0]):
        p = parent[b]
        for f in range(6):
            ax = f // 2
            sd = f % 2
            if ax == 0:
                nid = nbr[b, 2 * sd, 1, 1]
                cn = nbr_c[p, 2 * sd, 1, 1]
                t1 = 1
                t2 = 2
            elif ax == 1:
                nid = nbr[b, 1, 2 * sd, 1]
                cn = nbr_c[p, 1, 2 * sd, 1]
                t1 = 0
                t2 = 2
            else:
                nid = nbr[b, 1, 1, 2 * sd]
                cn = nbr_c[p, 1, 1, 2 * sd]
                t1 = 0
                t2 = 1
            if nid != COARSE:
                continue
            g = (n + 1) * sd
            own1 = 1 + (n - 1) * sd
            own2 = 2 + (n - 3) * sd
            cidx = n - (n - 1) * sd
            o1 = offs[b, t1] * h
            o2 = offs[b, t2] * h
            for t in range(n):
                T = 1 + o1 + t // 2
                st = 0.125 if t % 2 == 1 else -0.125
                for u in range(n):
                    U = 1 + o2 + u // 2
                    su = 0.125 if u % 2 == 1 else -0.125
                    if ax == 0:
                        c = (ac[cn, cidx, T, U]
                             + st * (ac[cn, cidx, T + 1, U] - ac[cn, cidx, T - 1, U])
                             + su * (ac[cn, cidx, T, U + 1] - ac[cn, cidx, T, U - 1]))
                        a[b, g, t + 1, u + 1] = (0.5 * c + 0.75 * a[b, own1, t + 1, u + 1]
                                                 - 0.25 * a[b, own2, t + 1, u + 1])
                    elif ax == 1:
                        c = (ac[cn, T, cidx, U]
                             + st * (ac[cn, T + 1, cidx, U] - ac[cn, T - 1, cidx, U])
                             + su * (ac[cn, T, cidx, U + 1] - ac[cn, T, cidx, U - 1]))
                        a[b, t + 1, g, u + 1] = (0.5 * c + 0.75 * a[b, t + 1, own1, u + 1]
                                                 - 0.25 * a[b, t + 1, own2, u + 1])
                    else:
                        c = (ac[cn, T, U, cidx]
                             + st * (ac[cn, T + 1, U, cidx] - ac[cn, T - 1, U, cidx])
                             + su * (ac[cn, T, U + 1, cidx] - ac[cn, T, U - 1, cidx]))
                        a[b, t + 1, u + 1, g] = (0.5 * c + 0.75 * a[b, t + 1, u + 1, own1]
                                                 - 0.25 * a[b, t + 1, u + 1, own2])


@nb.njit(**_jit)
def ghost_diag_2d(a, nbr):
    """Corner ghosts: copy from a diagonal neighbor, else extrapolate along x."""
    n = a.shape[1] - 2
    for b in range(a.shape[0]):
        for sx in range(2):
            for sy in range(2):
                gx = (n + 1) * sx
                gy = (n + 1) * sy
                d = nbr[b, 2 * sx, 2 * sy]
                if d >= 0:
                    a[b, gx, gy] = a[d, n - (n - 1) * sx, n - (n - 1) * sy]
                else:
                    a[b, gx, gy] = 2.0 * a[b, 1 + (n - 1) * sx, gy] - a[b, 2 + (n - 3) * sx, gy]


@nb.njit(inline="always", **_jit)
def _src_idx(o, t, n):
    # index in the neighbor block for offset o along an axis
    if o < 0:
        return n
    if o > 0:
        return 1
    return t


@nb.njit(inline="always", **_jit)
def _ghost_idx(o, t, n):
    if o < 0:
        return 0
    if o > 0:
        return n + 1
    return t


@nb.njit(**_jit)
def ghost_diag_3d(a, nbr):
    """Edge then corner ghosts; extrapolation runs along the first ghost axis."""
    n = a.shape[1] - 2
    for b in range(a.shape[0]):
        for order in range(2, 4):
            for ox in range(-1, 2):
                for oy in range(-1, 2):
                    for oz in range(-1, 2):
                        nz = (ox != 0) + (oy != 0) + (oz != 0)
                        if nz != order:
                            continue
                        d = nbr[b, ox + 1, oy + 1, oz + 1]
                        for t in range(1, n + 1 if order == 2 else 2):
                            # the single free axis (edges) runs over t
                            i = _ghost_idx(ox, t, n)
                            j = _ghost_idx(oy, t, n)
                            l = _ghost_idx(oz, t, n)
                            if d >= 0:
                                a[b, i, j, l] = a[d, _src_idx(ox, t, n), _src_idx(oy, t, n),
                                                  _src_idx(oz, t, n)]
                            elif ox != 0:
                                i1 = 1 + (n - 1) * (ox > 0)
                                i2 = 2 + (n - 3) * (ox > 0)
                                a[b, i, j, l] = 2.0 * a[b, i1, j, l] - a[b, i2, j, l]
                            else:
                                j1 = 1 + (n - 1) * (oy > 0)
                                j2 = 2 + (n - 3) * (oy > 0)
                                a[b, i, j, l] = 2.0 * a[b, i, j1, l] - a[b, i, j2, l]
