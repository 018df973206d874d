"""Block-structured quadtree/octree meshes.

Every level stores its blocks as one stacked array per variable, with the
block index first and one ghost layer on each side.  Blocks within a level
are sorted lexicographically by their integer block coordinates.  Level 1
is the root grid; level ``l + 1`` halves the spacing of level ``l``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import _kernels as K

REFINE = 1
KEEP = 0
COARSEN = -1


class MeshError(RuntimeError):
    pass


@dataclass(frozen=True)
class FaceBC:
    """Boundary condition on one face of the domain.

    ``value`` is a constant or a callable of points ``(n, dim)``; it is only
    used for Dirichlet faces.
    """

    kind: str = "dirichlet"
    value: Union[float, Callable] = 0.0

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")

    def evaluate(self, points):
        if callable(self.value):
            return np.asarray(self.value(points), dtype=float)
        return np.full(points.shape[0], float(self.value))


@dataclass
class Level:
    lvl: int
    dx: float
    coords: np.ndarray          # (nb, dim) block coordinates
    keys: np.ndarray            # sorted encoded coordinates
    extent: tuple               # blocks per axis at this level
    nbr: np.ndarray             # (nb, 3, ..., 3) neighbor ids
    parent: np.ndarray          # (nb,) id on level - 1, -1 on level 1
    offs: np.ndarray            # (nb, dim) child offset inside the parent
    children: np.ndarray        # (nb, 2**dim) ids on level + 1 or -1
    bc_index: np.ndarray        # (nb, 2*dim) row in bc_add or -1
    bc_add: np.ndarray          # (rows, n**(dim-1))

    @property
    def n_blocks(self) -> int:
        return self.coords.shape[0]

    @property
    def leaf(self) -> np.ndarray:
        return self.children[:, 0] < 0

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.leaf).astype(np.int64)

    @property
    def parents(self) -> np.ndarray:
        return np.flatnonzero(~self.leaf).astype(np.int64)

    def find(self, coords) -> np.ndarray:
        """Ids of blocks with the given coordinates, -1 where absent."""
        coords = np.atleast_2d(coords)
        return _lookup(self.keys, _encode(coords, self.extent))


@dataclass
class Block:
    """Read-only view of one block."""

    level: int
    index: int
    coords: tuple
    origin: np.ndarray
    dx: float
    n: int
    leaf: bool


def _encode(coords, extent):
    coords = np.asarray(coords, dtype=np.int64)
    key = coords[..., 0].copy()
    for k in range(1, coords.shape[-1]):
        key = key * extent[k] + coords[..., k]
    return key


def _lookup(keys, query):
    pos = np.searchsorted(keys, query)
    pos = np.minimum(pos, max(keys.size - 1, 0))
    hit = keys.size > 0
    ok = (keys[pos] == query) if hit else np.zeros(query.shape, bool)
    return np.where(ok, pos, -1).astype(np.int64)


def cell_center(block: Block, index) -> np.ndarray:
    """Center of cell ``index`` (interior cells start at 0, ghosts at -1)."""
    return block.origin + (np.asarray(index, dtype=float) + 0.5) * block.dx


class TreeMesh:
    """2:1 balanced tree of blocks with ``n**dim`` cells each."""

    def __init__(self, dim, n, lo, dx1, root, bc, coords_per_level, max_level=30):
        if dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if n < 4 or n & (n - 1):
            raise ValueError(f"block size {n} must be a power of two >= 4")
        self.dim = dim
        self.n = n
        self.lo = np.asarray(lo, dtype=float)
        self.dx1 = float(dx1)
        self.root = tuple(int(r) for r in root)
        if len(bc) != 2 * dim:
            raise ValueError("need one boundary condition per domain face")
        self.bc = list(bc)
        self.max_level = max_level
        if len(coords_per_level) > max_level:
            raise MeshError(f"refinement beyond max level {max_level}")
        self.levels: list[Level] = []
        for l, coords in enumerate(coords_per_level, start=1):
            self.levels.append(self._make_level(l, np.asarray(coords, dtype=np.int64)))
        self._link_children()
        self._fill_boundary_tables()
        self.fields: dict[str, list[np.ndarray]] = {}

    # construction ------------------------------------------------------
    def _make_level(self, l, coords):
        dim = self.dim
        extent = tuple(r * 2 ** (l - 1) for r in self.root)
        keys = _encode(coords, extent)
        order = np.argsort(keys, kind="stable")
        coords = coords[order].reshape(-1, dim)
        keys = keys[order]
        nb = coords.shape[0]
        nbr = np.empty((nb,) + (3,) * dim, dtype=np.int32)
        for off in itertools.product((-1, 0, 1), repeat=dim):
            c = coords + np.array(off)
            outside = np.any((c < 0) | (c >= np.array(extent)), axis=1)
            ids = _lookup(keys, _encode(np.where(outside[:, None], 0, c), extent))
            ids = np.where(outside, K.OUTSIDE, np.where(ids < 0, K.COARSE, ids))
            nbr[(slice(None),) + tuple(o + 1 for o in off)] = ids
        if l == 1:
            parent = np.full(nb, -1, dtype=np.int32)
        else:
            parent = self.levels[l - 2].find(coords // 2).astype(np.int32)
            if np.any(parent < 0):
                raise MeshError(f"level {l} has blocks without a parent")
        offs = (coords % 2).astype(np.int32)
        return Level(lvl=l, dx=self.dx1 / 2 ** (l - 1), coords=coords, keys=keys,
                     extent=extent, nbr=nbr, parent=parent, offs=offs,
                     children=np.full((nb, 2 ** self.dim), -1, dtype=np.int32),
                     bc_index=np.full((nb, 2 * dim), -1, dtype=np.int32),
                     bc_add=np.zeros((0, self.n ** (dim - 1))))

    def _link_children(self):
        for lev, fine in zip(self.levels[:-1], self.levels[1:]):
            for ci, off in enumerate(itertools.product((0, 1), repeat=self.dim)):
                lev.children[:, ci] = fine.find(2 * lev.coords + np.array(off))
            partial = (lev.children >= 0).any(axis=1) & (lev.children < 0).any(axis=1)
            if partial.any():
                raise MeshError(f"level {lev.lvl} has partially refined blocks")

    def _fill_boundary_tables(self):
        self.bc_scale = np.array([-1.0 if b.kind == "dirichlet" else 1.0 for b in self.bc])
        for lev in self.levels:
            self._level_bc(lev)

    def _level_bc(self, lev):
        dim, n = self.dim, self.n
        rows = []
        for f in range(2 * dim):
            ax, sd = divmod(f, 2)
            off = [0] * dim
            off[ax] = 2 * sd - 1
            ids = np.flatnonzero(lev.nbr[(slice(None),) + tuple(o + 1 for o in off)] == K.OUTSIDE)
            if not ids.size:
                continue
            lev.bc_index[ids, f] = len(rows) + np.arange(ids.size)
            # face-cell positions, transverse axes in increasing order
            t = (np.arange(n) + 0.5) * lev.dx
            grids = np.meshgrid(*([t] * (dim - 1)), indexing="ij")
            pts = np.empty((ids.size, n ** (dim - 1), dim))
            origin = self.lo + lev.coords[ids] * n * lev.dx
            tax = [k for k in range(dim) if k != ax]
            for m, k in enumerate(tax):
                pts[:, :, k] = origin[:, k, None] + grids[m].ravel()[None]
            pts[:, :, ax] = self.lo[ax] + sd * self.root[ax] * n * self.dx1
            bc = self.bc[f]
            if bc.kind == "dirichlet":
                vals = 2.0 * bc.evaluate(pts.reshape(-1, dim)).reshape(ids.size, -1)
            else:
                vals = np.zeros((ids.size, n ** (dim - 1)))
            rows.extend(vals)
        lev.bc_add = np.array(rows) if rows else np.zeros((0, n ** (dim - 1)))

    def set_bc(self, bc):
        """Replace the domain boundary conditions (topology unchanged)."""
        self.bc = list(bc)
        self._fill_boundary_tables()

    # geometry ----------------------------------------------------------
    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + np.array(self.root) * self.n * self.dx1

    def level(self, l) -> Level:
        return self.levels[l - 1]

    def dx(self, l) -> float:
        return self.levels[l - 1].dx

    def block(self, l, index) -> Block:
        lev = self.levels[l - 1]
        c = lev.coords[index]
        return Block(level=l, index=int(index), coords=tuple(int(v) for v in c),
                     origin=self.lo + c * self.n * lev.dx, dx=lev.dx, n=self.n,
                     leaf=bool(lev.leaf[index]))

    def origins(self, l, ids=None) -> np.ndarray:
        lev = self.levels[l - 1]
        c = lev.coords if ids is None else lev.coords[ids]
        return self.lo + c * self.n * lev.dx

    def cell_centers(self, l, ids=None, ghost=0) -> np.ndarray:
        """Cell centers ``(nb, m, ..., m, dim)`` with ``ghost`` extra rings."""
        lev = self.levels[l - 1]
        org = self.origins(l, ids)
        t = (np.arange(-ghost, self.n + ghost) + 0.5) * lev.dx
        grids = np.meshgrid(*([t] * self.dim), indexing="ij")
        rel = np.stack(grids, axis=-1)
        shape = (org.shape[0],) + (1,) * self.dim + (self.dim,)
        return org.reshape(shape) + rel[None]

    def n_cells(self, leaves_only=True) -> int:
        nb = sum((lev.leaf.sum() if leaves_only else lev.n_blocks) for lev in self.levels)
        return int(nb) * self.n ** self.dim

    # fields ------------------------------------------------------------
    def shape(self, l) -> tuple:
        return (self.levels[l - 1].n_blocks,) + (self.n + 2,) * self.dim

    def add_field(self, name, fill=0.0):
        self.fields[name] = [np.full(self.shape(l), fill) for l in range(1, self.n_levels + 1)]
        return self.fields[name]

    def interior(self, a):
        """View of the interior cells of a stacked level array."""
        return a[(slice(None),) + (slice(1, self.n + 1),) * self.dim]


def fill_ghosts(mesh: TreeMesh, l: int, var, homogeneous=False):
    """Fill the ghost layer of level ``l`` for a variable.

    ``var`` is a field name or a list of per-level arrays.  Same-level
    neighbors are copied, refinement faces use the flux-matching coarse
    interpolation (the coarse level's ghosts must be current), physical faces
    use the boundary conditions, and edges/corners are copied from diagonal
    neighbors or extrapolated.
    """
    arrs = mesh.fields[var] if isinstance(var, str) else var
    lev = mesh.levels[l - 1]
    a = arrs[l - 1]
    if mesh.dim == 2:
        faces, coarse, diag = K.ghost_faces_2d, K.ghost_coarse_2d, K.ghost_diag_2d
    else:
        faces, coarse, diag = K.ghost_faces_3d, K.ghost_coarse_3d, K.ghost_diag_3d
    faces(a, lev.nbr, lev.bc_index, lev.bc_add, mesh.bc_scale, homogeneous)
    if l > 1:
        coarse(a, arrs[l - 2], lev.nbr, lev.parent, lev.offs, mesh.levels[l - 2].nbr)
    diag(a, lev.nbr)


def restrict_level(mesh: TreeMesh, l: int, var):
    """Average level ``l`` into the covered cells of level ``l - 1``."""
    arrs = mesh.fields[var] if isinstance(var, str) else var
    lev = mesh.levels[l - 1]
    fn = K.restrict_2d if mesh.dim == 2 else K.restrict_3d
    fn(arrs[l - 1], arrs[l - 2], lev.parent, lev.offs)


def restrict_tree(mesh: TreeMesh, var):
    for l in range(mesh.n_levels, 1, -1):
        restrict_level(mesh, l, var)


def build_uniform(domain, n=8, levels=1, dim=None, bc=None, max_level=30) -> TreeMesh:
    """Fully refined tree whose level ``l`` holds ``(2**(l-1))**dim`` blocks
    per root block.

    ``domain`` is ``(lo, hi)``; every extent must be a whole number of root
    blocks of the smallest extent.
    """
    lo = np.asarray(domain[0], dtype=float)
    hi = np.asarray(domain[1], dtype=float)
    dim = dim or lo.size
    if lo.size != dim or hi.size != dim:
        raise ValueError("domain bounds do not match dim")
    if levels < 1:
        raise ValueError("need at least one level")
    if n < 4 or n & (n - 1):
        raise ValueError(f"block size {n} must be a power of two >= 4")
    ext = hi - lo
    side = ext.min()
    root = np.rint(ext / side).astype(int)
    if not np.allclose(root * side, ext):
        raise ValueError("domain extents must be integer multiples of the smallest one")
    if bc is None:
        bc = [FaceBC()] * (2 * dim)
    coords = []
    for l in range(1, levels + 1):
        axes = [np.arange(r * 2 ** (l - 1)) for r in root]
        coords.append(np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, dim))
    return TreeMesh(dim, n, lo, side / n, root, bc, coords, max_level=max_level)


# --------------------------------------------------------------------------
# refinement

def _balance(sets, dim, root):
    """Add blocks until every block's parent has all its neighbors."""
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=dim) if any(o)]

    def ensure(l, key):
        if key in sets[l]:
            return
        pkey = tuple(k // 2 for k in key)
        ensure(l - 1, pkey)
        for o in itertools.product((0, 1), repeat=dim):
            sets[l].add(tuple(2 * p + oo for p, oo in zip(pkey, o)))

    changed = True
    while changed:
        changed = False
        # sets[l] holds level l + 1; parents live on sets[l - 1]
        for l in range(len(sets) - 1, 0, -1):
            ext = [r * 2 ** (l - 1) for r in root]
            for key in list(sets[l]):
                pkey = tuple(k // 2 for k in key)
                for o in offsets:
                    nk = tuple(p + oo for p, oo in zip(pkey, o))
                    if any(c < 0 or c >= e for c, e in zip(nk, ext)):
                        continue
                    if nk not in sets[l - 1]:
                        ensure(l - 1, nk)
                        changed = True
    return sets


def is_balanced(mesh: TreeMesh) -> bool:
    for lev in mesh.levels[1:]:
        parent_nbr = mesh.levels[lev.lvl - 2].nbr[lev.parent]
        if np.any(parent_nbr == K.COARSE):
            return False
    return True


def adapt(mesh: TreeMesh, flags, rhs: Optional[Callable] = None,
          prolong=("phi",)) -> TreeMesh:
    """Apply refinement flags and restore 2:1 balance.

    ``flags`` maps a level number to an int array over that level's blocks
    (``REFINE``, ``KEEP`` or ``COARSEN``; only leaves are considered).
    Fields carry over; new cells of fields in ``prolong`` are interpolated
    from the parent, ``rhs`` (if given) is sampled at new cell centers of
    the field ``"rhs"``, and other fields start at zero.
    """
    dim = mesh.dim
    sets = [set(map(tuple, lev.coords.tolist())) for lev in mesh.levels]
    sets.append(set())
    for l, fl in flags.items():
        lev = mesh.levels[l - 1]
        fl = np.asarray(fl)
        for b in np.flatnonzero((fl == REFINE) & lev.leaf):
            if l + 1 > mesh.max_level:
                raise MeshError(f"refinement beyond max level {mesh.max_level}")
            c = lev.coords[b]
            for o in itertools.product((0, 1), repeat=dim):
                sets[l].add(tuple(2 * c + np.array(o)))
    _balance(sets, dim, mesh.root)

    # coarsening: whole sibling groups of leaves, kept only if still balanced
    for l, fl in flags.items():
        if l < 2:
            continue
        lev = mesh.levels[l - 1]
        fl = np.asarray(fl)
        groups = {}
        for b in np.flatnonzero(fl == COARSEN):
            groups.setdefault(int(lev.parent[b]), []).append(b)
        for p, members in groups.items():
            if len(members) != 2 ** dim:
                continue
            keys = [tuple(lev.coords[b]) for b in members]
            if not all(lev.leaf[b] for b in members):
                continue
            if any(k not in sets[l - 1] for k in keys):
                continue
            if any(tuple(2 * np.array(k) + np.array(o)) in sets[l]
                   for k in keys for o in itertools.product((0, 1), repeat=dim)):
                continue
            trial = [set(s) for s in sets]
            for k in keys:
                trial[l - 1].discard(k)
            if _balanced_sets(trial, dim, mesh.root):
                sets = trial

    while sets and not sets[-1]:
        sets.pop()
    coords = [np.array(sorted(s), dtype=np.int64).reshape(-1, dim) for s in sets]
    new = TreeMesh(dim, mesh.n, mesh.lo, mesh.dx1, mesh.root, mesh.bc, coords,
                   max_level=mesh.max_level)
    _transfer_fields(mesh, new, rhs, prolong)
    return new


def _balanced_sets(sets, dim, root):
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=dim) if any(o)]
    for l in range(1, len(sets)):
        ext = [r * 2 ** (l - 1) for r in root]
        for key in sets[l]:
            pkey = tuple(k // 2 for k in key)
            if pkey not in sets[l - 1]:
                return False
            for o in offsets:
                nk = tuple(p + oo for p, oo in zip(pkey, o))
                if all(0 <= c < e for c, e in zip(nk, ext)) and nk not in sets[l - 1]:
                    return False
    return True


def _transfer_fields(old: TreeMesh, new: TreeMesh, rhs, prolong):
    for name, arrs in old.fields.items():
        out = new.add_field(name)
        for l in range(1, new.n_levels + 1):
            lev = new.levels[l - 1]
            if l <= old.n_levels:
                src = old.levels[l - 1].find(lev.coords)
            else:
                src = np.full(lev.n_blocks, -1)
            have = src >= 0
            if have.any():
                out[l - 1][have] = arrs[l - 1][src[have]]
            fresh = np.flatnonzero(~have)
            if not fresh.size:
                continue
            if name == "rhs" and rhs is not None:
                x = new.cell_centers(l, fresh)
                new.interior(out[l - 1])[fresh] = rhs(x)
            elif name in prolong and l > 1:
                fill_ghosts(new, l - 1, out)
                fn = K.prolong_2d if new.dim == 2 else K.prolong_3d
                empty = np.zeros((0,) + (new.n,) * new.dim, dtype=np.uint8)
                fn(out[l - 2], out[l - 2], out[l - 1], fresh.astype(np.int64), lev.parent,
                   lev.offs, 0, np.full(lev.n_blocks, -1, dtype=np.int32), empty)


def refine_until(mesh: TreeMesh, criterion: Callable, max_passes=64) -> TreeMesh:
    """Refine leaves while ``criterion(mesh, level, ids)`` flags them."""
    for _ in range(max_passes):
        flags = {}
        any_flag = False
        for lev in mesh.levels:
            ids = lev.leaves
            fl = np.zeros(lev.n_blocks, dtype=np.int64)
            if ids.size:
                want = np.asarray(criterion(mesh, lev.lvl, ids), dtype=bool)
                fl[ids[want]] = REFINE
                any_flag |= bool(want.any())
            flags[lev.lvl] = fl
        if not any_flag:
            return mesh
        mesh = adapt(mesh, flags)
    raise MeshError("refinement did not settle")


# --------------------------------------------------------------------------
# solution dumps

def write_dump(mesh: TreeMesh, values, path) -> tuple:
    """Write ``<path>.txt`` (metadata) and ``<path>.bin`` (little-endian f8).

    Block interiors are stored level-major, lexicographic within a level;
    each record gives level, block coordinates, leaf flag and the offset in
    values into the binary file.
    """
    path = Path(path)
    arrs = mesh.fields[values] if isinstance(values, str) else values
    ncell = mesh.n ** mesh.dim
    lines = [
        "# octmg solution dump",
        f"dim = {mesh.dim}",
        f"block_size = {mesh.n}",
        "lo = " + " ".join(repr(float(v)) for v in mesh.lo),
        "hi = " + " ".join(repr(float(v)) for v in mesh.hi),
        f"levels = {mesh.n_levels}",
        f"blocks = {sum(lev.n_blocks for lev in mesh.levels)}",
        "# level leaf coords... offset",
    ]
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for l, lev in enumerate(mesh.levels, start=1):
            data = np.ascontiguousarray(mesh.interior(arrs[l - 1]), dtype="<f8")
            fh.write(data.tobytes())
            for b in range(lev.n_blocks):
                c = " ".join(str(int(v)) for v in lev.coords[b])
                lines.append(f"{l} {int(lev.leaf[b])} {c} {offset}")
                offset += ncell
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n")
    return path.with_suffix(".txt"), path.with_suffix(".bin")


def read_dump(path):
    """Return ``(meta, records, data)`` from :func:`write_dump` output."""
    path = Path(path)
    meta = {}
    records = []
    for line in path.with_suffix(".txt").read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = v
        else:
            records.append(tuple(int(v) for v in line.split()))
    data = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    n = int(meta["block_size"])
    dim = int(meta["dim"])
    return meta, records, data.reshape((-1,) + (n,) * dim)
