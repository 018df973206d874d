import numpy as np
import pytest

from octmg import mesh as M
from octmg import _kernels as K


def corner_refined(levels=2, dim=2, deeper=2, n=8):
    """Uniform mesh with the block at the origin refined ``deeper`` times."""
    mesh = M.build_uniform(([0.0] * dim, [1.0] * dim), n, levels)
    for _ in range(deeper):
        lev = mesh.levels[-1]
        fl = np.zeros(lev.n_blocks, dtype=int)
        at0 = np.flatnonzero(np.all(lev.coords == 0, axis=1) & lev.leaf)
        fl[at0] = M.REFINE
        mesh = M.adapt(mesh, {lev.lvl: fl})
    return mesh


def set_field(mesh, name, func):
    arrs = mesh.add_field(name)
    for l in range(1, mesh.n_levels + 1):
        mesh.interior(arrs[l - 1])[:] = func(mesh.cell_centers(l))
    return arrs


# ---------------------------------------------------------------- construction

def test_build_uniform_sizes():
    m = M.build_uniform(([0, 0], [1, 1]), 8, 8)
    assert m.n_cells() == 1024 ** 2
    assert m.dx(8) == pytest.approx(1 / 1024)
    m3 = M.build_uniform(([0, 0, 0], [1, 1, 1]), 8, 6)
    assert m3.n_cells() == 256 ** 3
    one = M.build_uniform(([0, 0], [1, 1]), 8, 1)
    assert one.n_levels == 1 and one.level(1).n_blocks == 1


@pytest.mark.parametrize("n", [2, 6, 12])
def test_build_uniform_rejects_bad_block_size(n):
    with pytest.raises(ValueError):
        M.build_uniform(([0, 0], [1, 1]), n, 2)


def test_dx_halves_per_level():
    m = M.build_uniform(([0, 0], [1, 1]), 8, 4)
    for l in range(1, 4):
        assert m.dx(l + 1) == pytest.approx(m.dx(l) / 2)


def test_cell_center_examples():
    blk = M.Block(level=1, index=0, coords=(0, 0), origin=np.zeros(2), dx=1.0, n=8, leaf=True)
    np.testing.assert_allclose(M.cell_center(blk, (0, 0)), [0.5, 0.5])
    np.testing.assert_allclose(M.cell_center(blk, (-1, 0)), [-0.5, 0.5])
    np.testing.assert_allclose(M.cell_center(blk, (7, 7)), [7.5, 7.5])


def test_block_view():
    m = M.build_uniform(([0, 0], [1, 1]), 8, 2)
    b = m.block(2, 3)
    np.testing.assert_allclose(b.origin, np.array(b.coords) * 0.5)
    assert b.dx == pytest.approx(1 / 16)


# ---------------------------------------------------------------- ghosts

def test_ghosts_continue_linear_profile():
    bc = [M.FaceBC("dirichlet", lambda x: x[:, 0])] * 4
    m = M.build_uniform(([0, 0], [1, 1]), 8, 3, bc=bc)
    phi = set_field(m, "phi", lambda x: x[..., 0])
    for l in (1, 2, 3):
        M.fill_ghosts(m, l, "phi")
        exact = m.cell_centers(l, ghost=1)[..., 0]
        np.testing.assert_allclose(phi[l - 1], exact, atol=1e-13)


def test_dirichlet_zero_ghost_is_negated_interior():
    m = M.build_uniform(([0, 0], [1, 1]), 8, 1, bc=[M.FaceBC("dirichlet", 0.0)] * 4)
    rng = np.random.default_rng(0)
    phi = m.add_field("phi")
    m.interior(phi[0])[:] = rng.normal(size=(1, 8, 8))
    M.fill_ghosts(m, 1, "phi")
    a = phi[0][0]
    np.testing.assert_allclose(a[0, 1:-1], -a[1, 1:-1])
    np.testing.assert_allclose(a[-1, 1:-1], -a[-2, 1:-1])
    np.testing.assert_allclose(a[1:-1, 0], -a[1:-1, 1])


def test_neumann_ghost_mirrors():
    m = M.build_uniform(([0, 0], [1, 1]), 8, 1, bc=[M.FaceBC("neumann")] * 4)
    phi = m.add_field("phi")
    m.interior(phi[0])[:] = np.random.default_rng(1).normal(size=(1, 8, 8))
    M.fill_ghosts(m, 1, "phi")
    a = phi[0][0]
    np.testing.assert_allclose(a[0, 1:-1], a[1, 1:-1])
    np.testing.assert_allclose(a[1:-1, -1], a[1:-1, -2])


def test_fill_ghosts_leaves_interior_untouched():
    m = corner_refined()
    phi = set_field(m, "phi", lambda x: np.sin(3 * x[..., 0]) * np.cos(2 * x[..., 1]))
    M.restrict_tree(m, "phi")
    before = [m.interior(a).copy() for a in phi]
    for l in range(1, m.n_levels + 1):
        M.fill_ghosts(m, l, "phi")
    for a, b in zip(phi, before):
        np.testing.assert_array_equal(m.interior(a), b)


@pytest.mark.parametrize("dim", [2, 3])
def test_refinement_face_flux_matches_coarse_flux(dim):
    """Mean fine flux across a coarse-fine face equals the coarse flux
    computed from the restricted values."""
    m = corner_refined(levels=2, dim=dim, deeper=1, n=4)
    phi = set_field(m, "phi", lambda x: np.exp(x[..., 0]) * np.cos(2 * x[..., 1])
                    + x[..., -1] ** 2)
    M.restrict_tree(m, "phi")
    for l in range(1, m.n_levels + 1):
        M.fill_ghosts(m, l, "phi")
    n = m.n
    L = m.n_levels
    fine = m.level(L)
    coarse = m.level(L - 1)
    checked = 0
    for b in range(fine.n_blocks):
        for k in range(dim):
            for side in (0, 1):
                off = [1] * dim
                off[k] = 2 * side
                if fine.nbr[(b,) + tuple(off)] != K.COARSE:
                    continue
                p = fine.parent[b]
                # coarse cells on both sides of this face
                cc = np.array(coarse.coords[p]) * n + np.array(fine.offs[b]) * (n // 2)
                a = phi[L - 1][b]
                dxf = m.dx(L)
                dxc = m.dx(L - 1)
                for t in np.ndindex(*([n // 2] * (dim - 1))):
                    fluxes = []
                    for sub in np.ndindex(*([2] * (dim - 1))):
                        tr = [1 + 2 * ti + si for ti, si in zip(t, sub)]
                        idx_in = list(tr)
                        idx_in.insert(k, n if side else 1)
                        idx_gh = list(tr)
                        idx_gh.insert(k, n + 1 if side else 0)
                        f = (a[tuple(idx_gh)] - a[tuple(idx_in)]) / dxf
                        fluxes.append(f if side else -f)
                    # coarse cell under the fine face and its outer neighbor
                    ci = list(cc + np.insert(np.array(t), k, (n // 2 - 1) if side else 0))
                    co = list(ci)
                    co[k] += 1 if side else -1
                    cval = _coarse_value(m, L - 1, phi, ci)
                    oval = _coarse_value(m, L - 1, phi, co)
                    cflux = (oval - cval) / dxc if side else -(oval - cval) / dxc
                    assert np.mean(fluxes) == pytest.approx(cflux, abs=1e-11 * max(1, abs(cflux)))
                    checked += 1
    assert checked > 0


def _coarse_value(m, l, phi, gidx):
    """Value of level-``l`` cell with global index ``gidx``."""
    lev = m.level(l)
    n = m.n
    gidx = np.asarray(gidx)
    b = lev.find(gidx // n)[0]
    assert b >= 0
    return phi[l - 1][(b,) + tuple(gidx % n + 1)]


# ---------------------------------------------------------------- transfers

def test_restrict_constant_and_linear():
    m = M.build_uniform(([0, 0], [1, 1]), 8, 3)
    phi = set_field(m, "phi", lambda x: 2.0 + 3 * x[..., 0] - x[..., 1])
    keep = [m.interior(a).copy() for a in phi]
    for a in phi[:-1]:
        a[:] = 0.0
    M.restrict_tree(m, "phi")
    for a, b in zip(phi, keep):
        np.testing.assert_allclose(m.interior(a), b, atol=1e-13)


def test_restriction_of_prolongation_reproduces_constants():
    m = M.build_uniform(([0, 0, 0], [1, 1, 1]), 4, 2)
    phi = m.add_field("phi")
    phi[0][:] = 1.7
    fn = K.prolong_3d
    empty = np.zeros((0,) + (4,) * 3, dtype=np.uint8)
    lev = m.level(2)
    fn(phi[0], phi[0], phi[1], np.arange(lev.n_blocks, dtype=np.int64), lev.parent,
       lev.offs, 0, np.full(lev.n_blocks, -1, dtype=np.int32), empty)
    np.testing.assert_allclose(m.interior(phi[1]), 1.7)
    phi[0][:] = 0.0
    M.restrict_level(m, 2, "phi")
    np.testing.assert_allclose(m.interior(phi[0]), 1.7)


# ---------------------------------------------------------------- refinement

def refine_at(mesh, l, coords):
    lev = mesh.level(l)
    fl = np.zeros(lev.n_blocks, dtype=int)
    fl[lev.find([coords])[0]] = M.REFINE
    return M.adapt(mesh, {l: fl})


def test_corner_refinement_needs_no_balancing():
    m = corner_refined(levels=2, deeper=3)
    assert m.n_levels == 5
    assert M.is_balanced(m)
    assert m.level(5).n_blocks == 4


def test_adapt_forces_balance():
    m = M.build_uniform(([0, 0], [1, 1]), 8, 2)
    m = refine_at(m, 2, (0, 0))
    assert m.level(3).n_blocks == 4
    # the level-3 block touching unrefined level-2 neighbors
    m = refine_at(m, 3, (1, 1))
    assert M.is_balanced(m)
    assert m.level(4).n_blocks == 4
    # its level-3 neighbors had to be created inside the coarse blocks
    assert m.level(3).n_blocks == 16


def test_adapt_keep_is_identity():
    m = corner_refined()
    flags = {lev.lvl: np.zeros(lev.n_blocks, dtype=int) for lev in m.levels}
    m2 = M.adapt(m, flags)
    assert m2.n_levels == m.n_levels
    for a, b in zip(m.levels, m2.levels):
        np.testing.assert_array_equal(a.coords, b.coords)


def test_adapt_prolongs_fields_and_samples_rhs():
    bc = [M.FaceBC("dirichlet", lambda x: 1.0 + x[:, 0])] * 4
    m = M.build_uniform(([0, 0], [1, 1]), 8, 1, bc=bc)
    set_field(m, "phi", lambda x: 1.0 + x[..., 0])
    m.add_field("rhs")
    m2 = M.adapt(m, {1: np.array([M.REFINE])}, rhs=lambda x: x[..., 1] * 2)
    x = m2.cell_centers(2)
    np.testing.assert_allclose(m2.interior(m2.fields["phi"][1]), 1.0 + x[..., 0], atol=1e-12)
    np.testing.assert_allclose(m2.interior(m2.fields["rhs"][1]), 2 * x[..., 1])


def test_coarsen_undoes_refinement():
    m = corner_refined(levels=2, deeper=1)
    lev = m.levels[-1]
    fl = np.full(lev.n_blocks, M.COARSEN)
    m2 = M.adapt(m, {lev.lvl: fl})
    assert m2.n_levels == 2
    assert M.is_balanced(m2)


def test_refinement_beyond_max_level_fails():
    m = M.build_uniform(([0, 0], [1, 1]), 8, 2, max_level=2)
    lev = m.level(2)
    with pytest.raises(M.MeshError):
        M.adapt(m, {2: np.full(lev.n_blocks, M.REFINE)})


def test_sphere_criterion_grades_toward_origin():
    R = 5e-3
    lmax = 6
    dx_min = 1.0 / (8 * 2 ** (lmax - 1))

    def crit(mesh, l, ids):
        if l >= lmax:
            return np.zeros(ids.size, bool)
        lo = mesh.origins(l, ids)
        hi = lo + mesh.n * mesh.dx(l)
        r = np.linalg.norm(np.clip(0.0, lo, hi), axis=1)
        return mesh.dx(l) > dx_min * np.maximum(1.0, r / R)

    m = M.build_uniform(([-0.5] * 3, [0.5] * 3), 8, 1, max_level=lmax)
    m = M.refine_until(m, crit)
    assert m.n_levels == lmax
    assert M.is_balanced(m)
    fine = m.level(lmax)
    lo = m.origins(lmax, fine.leaves)
    hi = lo + 8 * fine.dx
    # a finest leaf contains the origin
    assert np.any(np.all((lo <= 0) & (hi >= 0), axis=1))
    # leaves get coarser away from the origin
    far = [lev for lev in m.levels[:-1] if lev.leaf.any()]
    assert far
    for lev in far:
        org = m.origins(lev.lvl, lev.leaves)
        r = np.linalg.norm(np.clip(0.0, org, org + 8 * lev.dx), axis=1)
        assert np.all(lev.dx <= dx_min * np.maximum(1.0, r / R) * 2 + 1e-15)


# ---------------------------------------------------------------- dumps

def test_dump_round_trip(tmp_path):
    m = corner_refined(levels=2, deeper=1)
    phi = set_field(m, "phi", lambda x: x[..., 0] + 10 * x[..., 1])
    txt, binf = M.write_dump(m, "phi", tmp_path / "sol")
    meta, records, data = M.read_dump(tmp_path / "sol")
    assert int(meta["dim"]) == 2 and int(meta["block_size"]) == 8
    assert len(records) == sum(lev.n_blocks for lev in m.levels)
    levels = [r[0] for r in records]
    assert levels == sorted(levels)
    for r in records:
        l, leaf, cx, cy, off = r
        b = m.level(l).find([[cx, cy]])[0]
        np.testing.assert_array_equal(data[off // 64], m.interior(phi[l - 1])[b])
    # lexicographic inside each level
    for l in range(1, m.n_levels + 1):
        c = [r[2:4] for r in records if r[0] == l]
        assert c == sorted(c)
    raw = np.fromfile(binf, dtype="<f8")
    assert raw.size == data.size
