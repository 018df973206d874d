"""Level set functions and sub-grid boundary location.

Objects are described by a level set function ``f`` that is negative inside
and positive outside.  Boundaries are located along segments between cell
centers with a bisection search, preceded by a golden-section bracket search
when the end points have the same sign.

All search routines work on batches of segments at once: the level set is
evaluated on arrays of points and every iteration advances all segments that
are still active.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

GOLDEN = 0.5 * (math.sqrt(5.0) - 1.0)

SHAPES_2D = ("spheroid", "rhombus", "heart", "astroid")


def _shape_spheroid(p, q):
    return np.sqrt(8.0 * p**2 + q**2) - 1.0


def _shape_rhombus(p, q):
    return 8.0 * np.abs(p) + np.abs(q) - 1.5


def _shape_heart(p, q):
    return p**2 + (q - np.abs(p) ** (2.0 / 3.0)) ** 2 - 1.0


def _shape_astroid(p, q):
    return np.abs(p) ** (2.0 / 3.0) / 0.8 + np.abs(q) ** (2.0 / 3.0) / 1.5 - 0.8


_SHAPE_FUNCS = {
    "spheroid": _shape_spheroid,
    "rhombus": _shape_rhombus,
    "heart": _shape_heart,
    "astroid": _shape_astroid,
}


@dataclass(frozen=True)
class LevelSetSpec:
    """Analytic description of one or more irregular boundaries.

    ``kind`` is one of ``sphere``, ``spheroid``, ``rhombus``, ``heart``,
    ``astroid``, ``rod``, ``composite`` or ``custom``.  ``value`` is the
    Dirichlet potential imposed on the object's boundary.  The named 2D
    shapes are evaluated in transformed coordinates
    ``p = scale * (x - shift[0])`` and ``q = scale * (y - shift[1])``; with
    ``cylindrical`` set, ``x`` is replaced by the distance to the z-axis and
    ``y`` by ``z``.
    """

    kind: str
    value: float = 0.0
    center: tuple = ()
    radius: float = 0.0
    segment: tuple = ()
    shift: tuple = (0.5, 0.5)
    scale: float = 4.0
    cylindrical: bool = False
    children: tuple = ()
    func: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        kinds = ("sphere", "rod", "composite", "custom") + SHAPES_2D
        if self.kind not in kinds:
            raise ValueError(f"unknown level set kind {self.kind!r}")
        if self.kind == "composite" and not self.children:
            raise ValueError("composite level set needs children")
        if self.kind == "custom" and self.func is None:
            raise ValueError("custom level set needs func")
        if not np.isfinite(self.value):
            raise ValueError("boundary value must be finite")

    # constructors -------------------------------------------------------
    @classmethod
    def sphere(cls, center, radius, value=0.0):
        return cls("sphere", value=float(value), center=tuple(map(float, center)),
                   radius=float(radius))

    @classmethod
    def shape(cls, name, value=1.0, shift=(0.5, 0.5), scale=4.0, cylindrical=False):
        return cls(name, value=float(value), shift=tuple(map(float, shift)),
                   scale=float(scale), cylindrical=cylindrical)

    @classmethod
    def rod(cls, p0, p1, radius, value=0.0):
        return cls("rod", value=float(value),
                   segment=(tuple(map(float, p0)), tuple(map(float, p1))),
                   radius=float(radius))

    @classmethod
    def composite(cls, children: Sequence["LevelSetSpec"]):
        return cls("composite", children=tuple(children))

    @classmethod
    def custom(cls, func, value=0.0):
        return cls("custom", value=float(value), func=func)

    # evaluation ---------------------------------------------------------
    def __call__(self, x):
        return evaluate(self, x)

    def objects(self) -> list:
        """Leaf objects in evaluation order; their positions are object ids."""
        if self.kind != "composite":
            return [self]
        out = []
        for c in self.children:
            out.extend(c.objects())
        return out

    @property
    def values(self) -> np.ndarray:
        return np.array([o.value for o in self.objects()])

    @property
    def n_objects(self) -> int:
        return len(self.objects())


def evaluate(spec: LevelSetSpec, x) -> np.ndarray:
    """Evaluate the level set at points ``x`` of shape ``(..., dim)``."""
    x = np.asarray(x, dtype=float)
    kind = spec.kind
    if kind == "sphere":
        c = np.asarray(spec.center)
        return np.sqrt(np.sum((x - c) ** 2, axis=-1)) - spec.radius
    if kind in _SHAPE_FUNCS:
        if spec.cylindrical:
            r = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)
            p = spec.scale * (r - spec.shift[0])
            q = spec.scale * (x[..., 2] - spec.shift[1])
        else:
            p = spec.scale * (x[..., 0] - spec.shift[0])
            q = spec.scale * (x[..., 1] - spec.shift[1])
        return _SHAPE_FUNCS[kind](p, q)
    if kind == "rod":
        p0 = np.asarray(spec.segment[0])
        p1 = np.asarray(spec.segment[1])
        ab = p1 - p0
        t = np.clip(np.sum((x - p0) * ab, axis=-1) / np.dot(ab, ab), 0.0, 1.0)
        closest = p0 + t[..., None] * ab
        return np.sqrt(np.sum((x - closest) ** 2, axis=-1)) - spec.radius
    if kind == "composite":
        return np.min([evaluate(o, x) for o in spec.objects()], axis=0)
    return np.asarray(spec.func(x), dtype=float)


def object_index(spec: LevelSetSpec, x) -> np.ndarray:
    """Id of the object whose level set is smallest at each point."""
    x = np.asarray(x, dtype=float)
    if spec.kind != "composite":
        return np.zeros(x.shape[:-1], dtype=np.int8)
    vals = np.array([evaluate(o, x) for o in spec.objects()])
    return np.argmin(vals, axis=0).astype(np.int8)


def _as_lsf(spec) -> Callable:
    if isinstance(spec, LevelSetSpec):
        return lambda x: evaluate(spec, x)
    return spec


@dataclass(frozen=True)
class RootSearchConfig:
    eps_tol: float = 1e-8
    max_bracket_iters: int = 45
    d_min: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.eps_tol < 1.0:
            raise ValueError("eps_tol must lie in (0, 1)")
        need = math.ceil(math.log(self.eps_tol) / math.log(GOLDEN))
        if self.max_bracket_iters < need:
            raise ValueError(
                f"max_bracket_iters={self.max_bracket_iters} cannot reach "
                f"eps_tol={self.eps_tol} (need >= {need})")
        if not 0.0 < self.d_min <= 1.0:
            raise ValueError("d_min must lie in (0, 1]")

    @property
    def bisection_iters(self) -> int:
        return math.ceil(math.log2(1.0 / self.eps_tol)) + 1


@dataclass
class DirectionalDistances:
    """Relative boundary distances toward the 2*dim neighbor centers.

    Direction ``2*k`` points along ``-e_k`` and ``2*k + 1`` along ``+e_k``.
    ``cut`` marks directions with a located boundary, ``obj`` the object id
    found there (-1 when not cut).
    """

    d: np.ndarray
    cut: np.ndarray
    obj: np.ndarray


def _bisect(f, a, ab, fa, lo, hi, n_iter):
    """Shrink brackets [lo, hi] in segment parameter t, g(lo) > 0 >= g(hi)."""
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        gm = f(a + mid[:, None] * ab) * fa
        neg = gm <= 0.0
        hi = np.where(neg, mid, hi)
        lo = np.where(neg, lo, mid)
    return lo, hi


def find_roots(spec, a, b, cfg: RootSearchConfig = RootSearchConfig(),
               return_bracket=False):
    """Locate the boundary nearest to ``a`` on each segment ``a -> b``.

    Parameters
    ----------
    spec : LevelSetSpec or callable
        Level set; a callable must accept points of shape ``(n, dim)``.
    a, b : array_like, shape (n, dim)
        Segment start and end points.

    Returns
    -------
    d : ndarray, shape (n,)
        Relative distance of the root from ``a``, clamped to
        ``[cfg.d_min, 1]``; 1 where no root was found.
    found : ndarray of bool
        Whether a sign change was detected on the segment.
    """
    f = _as_lsf(spec)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    n = a.shape[0]
    ab = b - a
    fa = f(a)
    fb = f(b)

    lo = np.zeros(n)
    hi = np.ones(n)
    found = fa * fb <= 0.0

    # golden-section search minimizing g(t) = f(a + t (b - a)) f(a)
    idx = np.flatnonzero(~found)
    if idx.size:
        sa, sab, sfa = a[idx], ab[idx], fa[idx]

        def g(t, sub):
            return f(sa[sub] + t[:, None] * sab[sub]) * sfa[sub]

        everything = np.arange(idx.size)
        glo = np.zeros(idx.size)
        ghi = np.ones(idx.size)
        x1 = ghi - GOLDEN * (ghi - glo)
        x2 = glo + GOLDEN * (ghi - glo)
        g1 = g(x1, everything)
        g2 = g(x2, everything)
        t_hit = np.where(g1 <= 0.0, x1, np.where(g2 <= 0.0, x2, np.inf))
        for _ in range(cfg.max_bracket_iters):
            act = np.flatnonzero(np.isinf(t_hit))
            if not act.size:
                break
            left = g1 < g2
            new_lo = np.where(left, glo, x1)
            new_hi = np.where(left, x2, ghi)
            probe = np.where(left, new_hi - GOLDEN * (new_hi - new_lo),
                             new_lo + GOLDEN * (new_hi - new_lo))
            gp = np.full(idx.size, np.inf)
            gp[act] = g(probe[act], act)
            g1, g2 = np.where(left, gp, g2), np.where(left, g1, gp)
            x1, x2 = np.where(left, probe, x2), np.where(left, x1, probe)
            glo, ghi = new_lo, new_hi
            t_hit[act] = np.where(gp[act] <= 0.0, probe[act], np.inf)
        ok = np.isfinite(t_hit)
        found[idx[ok]] = True
        hi[idx[ok]] = t_hit[ok]

    d = np.ones(n)
    sel = np.flatnonzero(found)
    if sel.size:
        blo, bhi = _bisect(f, a[sel], ab[sel], fa[sel], lo[sel], hi[sel],
                           cfg.bisection_iters)
        d[sel] = np.clip(0.5 * (blo + bhi), cfg.d_min, 1.0)
        if return_bracket:
            lo[sel], hi[sel] = blo, bhi
    if return_bracket:
        return d, found, lo, hi
    return d, found


def find_root(spec, a, b, cfg: RootSearchConfig = RootSearchConfig()) -> float:
    """Scalar version of :func:`find_roots`; returns only ``d``."""
    d, _ = find_roots(spec, np.asarray(a, float)[None], np.asarray(b, float)[None], cfg)
    return float(d[0])


def gradient(spec, x, h) -> np.ndarray:
    """Central-difference gradient of the level set with step ``h``."""
    f = _as_lsf(spec)
    x = np.asarray(x, dtype=float)
    dim = x.shape[-1]
    g = np.empty(x.shape)
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = h
        g[..., k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def boundary_length(dx, dim, safety_factor=1.5):
    return safety_factor * math.sqrt(dim) * dx


def boundary_candidates(spec, x, dx, safety_factor=1.5) -> np.ndarray:
    """Flag points where ``|f| < L |grad f|`` with ``L = sf * sqrt(dim) * dx``."""
    x = np.asarray(x, dtype=float)
    f = _as_lsf(spec)(x)
    gnorm = np.linalg.norm(gradient(spec, x, dx), axis=-1)
    return np.abs(f) < boundary_length(dx, x.shape[-1], safety_factor) * gnorm


def boundary_candidate(spec, x, dx, dim=None, safety_factor=1.5) -> bool:
    x = np.asarray(x, dtype=float)
    if dim is not None and x.shape[-1] != dim:
        raise ValueError("point dimension does not match dim")
    return bool(boundary_candidates(spec, x[None], dx, safety_factor)[0])


def neighbor_offsets(dim) -> np.ndarray:
    """Unit offsets toward the 2*dim axis neighbors, ordered -x, +x, -y, ..."""
    off = np.zeros((2 * dim, dim))
    for k in range(dim):
        off[2 * k, k] = -1.0
        off[2 * k + 1, k] = 1.0
    return off


def cell_distances_batch(spec, centers, dx, cfg: RootSearchConfig = RootSearchConfig()):
    """Root searches from each center toward its 2*dim neighbor centers.

    Returns ``(d, cut, x0)`` with shapes ``(n, 2*dim)``, ``(n, 2*dim)`` and
    ``(n, 2*dim, dim)``; ``x0`` holds the located boundary points.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    n, dim = centers.shape
    off = neighbor_offsets(dim) * dx
    a = np.repeat(centers, 2 * dim, axis=0)
    b = a + np.tile(off, (n, 1))
    d, found = find_roots(spec, a, b, cfg)
    x0 = a + d[:, None] * (b - a)
    return d.reshape(n, 2 * dim), found.reshape(n, 2 * dim), x0.reshape(n, 2 * dim, dim)


def cell_distances(spec, center, dx, cfg: RootSearchConfig = RootSearchConfig()):
    d, cut, x0 = cell_distances_batch(spec, np.asarray(center, float)[None], dx, cfg)
    d, cut = d[0], cut[0]
    obj = np.where(cut, object_index(spec, x0[0]), -1).astype(np.int8) \
        if isinstance(spec, LevelSetSpec) else np.where(cut, 0, -1).astype(np.int8)
    return DirectionalDistances(d=d, cut=cut, obj=obj)


def nearest_direction(centers, points, dx) -> np.ndarray:
    """Index of the axis neighbor center closest to each point.

    Near-ties (within 1e-12 dx^2) go to the lowest axis, negative side first.
    """
    centers = np.atleast_2d(centers)
    dim = centers.shape[1]
    nbrs = centers[:, None, :] + neighbor_offsets(dim)[None] * dx
    dist2 = np.sum((nbrs - points[:, None, :]) ** 2, axis=-1)
    close = dist2 <= dist2.min(axis=1, keepdims=True) + 1e-12 * dx * dx
    return np.argmax(close, axis=1)


def resolve_thin_batch(spec, centers, dx, w_min, cfg: RootSearchConfig = RootSearchConfig()):
    """Descend along the level set gradient to find boundaries the axis
    searches missed.

    At most ``floor(dx / w_min)`` steps of length ``w_min`` are taken from
    each center.  Returns ``(direction, d, x0)``; ``direction`` is -1 where
    nothing was found.
    """
    f = _as_lsf(spec)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    n, dim = centers.shape
    direction = np.full(n, -1, dtype=np.int64)
    d_out = np.ones(n)
    x0_out = centers.copy()
    if n == 0 or not (dx > w_min > 0.0):
        return direction, d_out, x0_out

    fa = f(centers)
    x = centers.copy()
    hit = np.zeros(n, dtype=bool)
    alive = fa != 0.0
    n_steps = int(math.floor(dx / w_min + 1e-12))
    for _ in range(n_steps):
        idx = np.flatnonzero(alive & ~hit)
        if not idx.size:
            break
        grad = gradient(f, x[idx], dx)
        gnorm = np.linalg.norm(grad, axis=1)
        flat = gnorm == 0.0
        alive[idx[flat]] = False
        idx, grad, gnorm = idx[~flat], grad[~flat], gnorm[~flat]
        step = -np.sign(fa[idx])[:, None] * grad / gnorm[:, None]
        x[idx] += w_min * step
        fx = f(x[idx])
        hit[idx[fa[idx] * fx <= 0.0]] = True

    sel = np.flatnonzero(hit)
    if sel.size:
        d, found = find_roots(f, centers[sel], x[sel], cfg)
        seg = np.linalg.norm(x[sel] - centers[sel], axis=1)
        d_rel = np.clip(d * seg / dx, cfg.d_min, 1.0)
        x0_out[sel] = centers[sel] + d[:, None] * (x[sel] - centers[sel])
        direction[sel] = nearest_direction(centers[sel], x0_out[sel], dx)
        d_out[sel] = d_rel
    return direction, d_out, x0_out


def resolve_thin_boundary(spec, center, dx, w_min, cfg: RootSearchConfig = RootSearchConfig()):
    """Return ``(direction, d)`` for an unresolved nearby object, or None."""
    direction, d, _ = resolve_thin_batch(spec, np.asarray(center, float)[None], dx, w_min, cfg)
    if direction[0] < 0:
        return None
    return int(direction[0]), float(d[0])
