import numpy as np
import pytest
import scipy.sparse.linalg as spla

from octmg import mesh as M
from octmg import stencil as S
from octmg.levelset import LevelSetSpec

CENTERED = ([-0.5, -0.5], [0.5, 0.5])


def disk_problem(levels=3, value=0.7, radius=0.25, n=8):
    mesh = M.build_uniform(CENTERED, n, levels)
    lsf = LevelSetSpec.sphere((0.0, 0.0), radius, value=value)
    return mesh, lsf, S.build_level_stencil(mesh, levels, lsf)


def with_ghosts(mesh, l, func):
    """Array with interior and ghost cells sampled from ``func``."""
    return func(mesh.cell_centers(l, ghost=1))


# ---------------------------------------------------------------- coefficients

def test_uniform_coefficients_2d():
    dx = 0.1
    c = S.uniform_coefficients(2, 4, dx)
    np.testing.assert_allclose(c[0], -4 / dx**2)
    np.testing.assert_allclose(c[1:], 1 / dx**2)


def test_uniform_coefficients_3d():
    c = S.uniform_coefficients(3, 2, 0.5)
    np.testing.assert_allclose(c[0], -24.0)
    np.testing.assert_allclose(c[1:], 4.0)


def test_one_sided_boundary_half_cell():
    dx = 0.2
    d = np.array([1.0, 0.5])
    cut = np.array([False, True])
    coef, bw = S.coefficients_from_distances(d, cut, dx)
    # hand substitution: w = 2 / (1.5 dx^2), toward -x w / 1, toward +x w / 0.5
    assert coef[1] == pytest.approx(4 / (3 * dx**2))
    assert coef[2] == 0.0
    assert bw[1] == pytest.approx(8 / (3 * dx**2))
    assert bw[0] == 0.0
    assert coef[0] == pytest.approx(-4 / dx**2)


def test_symmetric_half_distances():
    dx = 0.1
    coef, bw = S.coefficients_from_distances(np.array([0.5, 0.5]), np.array([True, True]), dx)
    np.testing.assert_allclose(bw, [4 / dx**2, 4 / dx**2])
    assert coef[0] == pytest.approx(-8 / dx**2)


def test_unit_distances_give_uniform_stencil():
    dx = 0.05
    d = np.ones((4, 3, 3))
    coef, bw = S.coefficients_from_distances(d, np.zeros(d.shape, bool), dx)
    np.testing.assert_allclose(coef, S.uniform_coefficients(2, 3, dx), rtol=1e-15)
    assert not bw.any()


# ---------------------------------------------------------------- built stencils

def test_far_block_is_uniform_variant():
    mesh, lsf, st = disk_problem()
    corner = int(np.flatnonzero(np.all(mesh.level(3).coords == 0, axis=1))[0])
    b = st.block(corner)
    assert b.variant == "uniform"
    np.testing.assert_allclose(b.coef[0], -4 / st.dx**2)


def test_boundary_rows_signs_and_row_sum():
    mesh, lsf, st = disk_problem()
    assert st.n_boundary > 0
    solved = st.solved.astype(bool)
    center = st.coef[:, 0][solved]
    nbr = np.moveaxis(st.coef[:, 1:], 1, -1)[solved]
    bsum = st.bw.sum(axis=1)[solved]
    assert np.all(center < 0)
    assert np.all(nbr >= 0)
    np.testing.assert_allclose(center + nbr.sum(-1) + bsum, 0.0, atol=1e-9 * st.idx2)


def test_pinned_rows_are_identity():
    mesh, lsf, st = disk_problem()
    pin = ~st.solved.astype(bool)
    assert pin.any()
    np.testing.assert_array_equal(st.coef[:, 0][pin], 1.0)
    assert not np.moveaxis(st.coef[:, 1:], 1, -1)[pin].any()
    np.testing.assert_allclose(st.pinval[pin], 0.7)


def test_uncut_cells_in_boundary_blocks_are_uniform():
    mesh, lsf, st = disk_problem()
    free = st.solved.astype(bool) & ~(st.bw > 0).any(axis=1)
    ref = S.uniform_coefficients(2, st.n, st.dx)[:, 0, 0]
    np.testing.assert_allclose(np.moveaxis(st.coef, 1, -1)[free], np.broadcast_to(
        ref, (int(free.sum()), ref.size)), rtol=1e-12)


def test_distances_in_range():
    _, _, st = disk_problem()
    assert np.all((st.d > 0) & (st.d <= 1))


def test_block_stencil_matches_level_stencil():
    mesh, lsf, st = disk_problem()
    for b in (int(st.bidx[0]), int(st.bidx[-1])):
        one = S.build_block_stencil(mesh, 3, b, lsf)
        ref = st.block(b)
        assert one.variant == ref.variant == "boundary"
        np.testing.assert_array_equal(one.coef, ref.coef)
        np.testing.assert_array_equal(one.brhs, ref.brhs)


def test_rebuild_is_bit_identical():
    mesh, lsf, st = disk_problem()
    again = S.build_level_stencil(mesh, 3, lsf)
    for name in ("bidx", "coef", "bw", "d", "solved", "brhs"):
        assert np.array_equal(getattr(st, name), getattr(again, name)), name


# ---------------------------------------------------------------- application

def test_constant_has_zero_laplacian():
    mesh, lsf, st = disk_problem()
    b = st.block(0)
    phi = np.full((10, 10), 3.0)
    np.testing.assert_allclose(S.apply(b, phi), 0.0, atol=1e-9)


def test_quadratic_second_difference_is_exact():
    mesh = M.build_uniform(CENTERED, 8, 2)
    st = S.build_level_stencil(mesh, 2, None)
    phi = with_ghosts(mesh, 2, lambda x: x[..., 0] ** 2)
    for b in range(mesh.level(2).n_blocks):
        np.testing.assert_allclose(S.apply(st.block(b), phi[b]), 2.0, rtol=1e-9)


def test_boundary_value_everywhere_gives_zero():
    mesh, lsf, st = disk_problem(value=0.7)
    for b in st.bidx:
        phi = np.full((10, 10), 0.7)
        np.testing.assert_allclose(S.apply(st.block(int(b)), phi), 0.0, atol=1e-9 * st.idx2)


def test_residual_of_zero_is_source():
    mesh = M.build_uniform(CENTERED, 8, 1)
    st = S.build_level_stencil(mesh, 1, None)
    r = S.residual(st.block(0), np.zeros((10, 10)), np.ones((8, 8)))
    np.testing.assert_array_equal(r, 1.0)


def test_kernel_matches_block_apply():
    mesh, lsf, st = disk_problem()
    rng = np.random.default_rng(0)
    phi = rng.standard_normal(mesh.shape(3))
    out = np.zeros_like(phi)
    S.apply_level(mesh, 3, phi, st, out)
    for b in range(mesh.level(3).n_blocks):
        ref = S.apply(st.block(b), phi[b])
        np.testing.assert_allclose(mesh.interior(out)[b], ref, rtol=1e-12, atol=1e-9)


def test_assembled_matrix_matches_kernel():
    mesh, lsf, st = disk_problem()
    rng = np.random.default_rng(1)
    phi = mesh.add_field("phi")
    mesh.interior(phi[2])[:] = rng.standard_normal(mesh.interior(phi[2]).shape)
    M.fill_ghosts(mesh, 3, phi)
    out = np.zeros_like(phi[2])
    S.apply_level(mesh, 3, phi[2], st, out)
    A, c, solved = S.assemble_level(mesh, 3, st)
    Ax = A @ mesh.interior(phi[2]).ravel() + c
    got = mesh.interior(out).ravel()
    np.testing.assert_allclose(Ax[solved], got[solved], rtol=1e-10, atol=1e-8)


def test_uniform_matrix_is_symmetric():
    mesh = M.build_uniform(CENTERED, 8, 2)
    A, _, _ = S.assemble_level(mesh, 2, S.build_level_stencil(mesh, 2, None))
    assert abs(A - A.T).max() == 0.0


def direct_solve(mesh, l, st, g):
    A, c, solved = S.assemble_level(mesh, l, st)
    pin = np.zeros(A.shape[0])
    if st.n_boundary:
        nc = mesh.n ** mesh.dim
        p = np.zeros((mesh.level(l).n_blocks, nc))
        p[st.bidx] = st.pinval.reshape(st.n_boundary, nc)
        pin = p.ravel()
    b = np.where(solved, np.ravel(g) - c, pin)
    return spla.spsolve(A.tocsc(), b)


def test_direct_solution_has_tiny_residual():
    mesh, lsf, st = disk_problem(levels=2, value=1.0)     # 16^2
    g = np.ones((mesh.level(2).n_blocks,) + (8, 8))
    x = direct_solve(mesh, 2, st, g)
    phi = mesh.add_field("phi")
    mesh.interior(phi[1])[:] = x.reshape(g.shape)
    M.fill_ghosts(mesh, 2, phi)
    r = np.zeros_like(phi[1])
    S.residual_level(mesh, 2, phi[1], np.pad(g, ((0, 0), (1, 1), (1, 1))), st, r)
    assert np.abs(mesh.interior(r)).max() <= 1e-9 * np.abs(g).max()


# ---------------------------------------------------------------- boundary values

def test_zero_boundary_value_contributes_nothing():
    _, _, st = disk_problem(value=0.0)
    assert not st.brhs.any()


def test_boundary_contribution_is_linear():
    _, _, st = disk_problem(value=1.0)
    one = st.brhs.copy()
    st.set_boundary_value(2.0)
    np.testing.assert_allclose(st.brhs, 2 * one)


def test_changed_value_matches_rebuild():
    mesh, lsf, st = disk_problem(levels=2, value=0.3)
    st.set_boundary_value(1.5)
    _, _, fresh = disk_problem(levels=2, value=1.5)
    np.testing.assert_array_equal(st.brhs, fresh.brhs)
    np.testing.assert_array_equal(st.pinval, fresh.pinval)
    g = np.zeros((mesh.level(2).n_blocks, 8, 8))
    np.testing.assert_allclose(direct_solve(mesh, 2, st, g),
                               direct_solve(mesh, 2, fresh, g), rtol=1e-12)


def test_boundary_value_validation():
    _, _, st = disk_problem()
    with pytest.raises(ValueError):
        st.set_boundary_value([1.0, 2.0])
    with pytest.raises(ValueError):
        st.set_boundary_value(np.nan)


def test_uniform_level_ignores_boundary_value():
    mesh = M.build_uniform(CENTERED, 8, 1)
    st = S.build_level_stencil(mesh, 1, None)
    st.set_boundary_value(5.0)
    assert st.block(0).variant == "uniform"


def test_dump_coefficients(tmp_path):
    _, _, st = disk_problem(levels=2)
    path = tmp_path / "coef.txt"
    S.dump_coefficients(st, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# dim=2")
    assert len(lines) > st.n_boundary
