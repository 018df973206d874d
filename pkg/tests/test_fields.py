import math

import numpy as np
import pytest

from octmg import fields as F
from octmg import harness as H
from octmg import mesh as M
from octmg import stencil as S
from octmg.levelset import LevelSetSpec

UNIT = ([0.0, 0.0], [1.0, 1.0])


# ---------------------------------------------------------------- analytic

@pytest.mark.parametrize("dim", [2, 3])
def test_analytic_on_boundary_is_phi_b(dim):
    sol = F.AnalyticSolution(dim, 0.25, phi_b=0.3, a=2.0)
    x = np.zeros(dim)
    x[-1] = 0.25
    assert F.analytic_eval(sol, x) == pytest.approx(0.3)


def test_analytic_3d_far_field():
    sol = F.AnalyticSolution(3, 0.25, phi_b=0.1, a=1.5)
    assert F.analytic_eval(sol, [1e12, 0.0, 0.0]) == pytest.approx(1.6)


def test_analytic_2d_at_e_times_radius():
    sol = F.AnalyticSolution(2, 0.25)
    assert F.analytic_eval(sol, [math.e * 0.25, 0.0]) == pytest.approx(1.0)
    assert sol(np.array([0.0, math.e * 0.25])) == pytest.approx(1.0)


def test_analytic_rejects_inside_and_bad_input():
    sol = F.AnalyticSolution(2, 0.25)
    with pytest.raises(ValueError):
        F.analytic_eval(sol, [0.1, 0.0])
    with pytest.raises(ValueError):
        F.analytic_eval(sol, [0.5, 0.0, 0.0])
    # the non-strict form clamps to the boundary value
    assert F.analytic_eval(sol, [0.1, 0.0], strict=False) == 0.0
    with pytest.raises(ValueError):
        F.AnalyticSolution(4, 0.25)
    with pytest.raises(ValueError):
        F.AnalyticSolution(2, 0.0)


# ---------------------------------------------------------------- error norms

def sampled(mesh, func, shift=0.0):
    arrs = [np.zeros(mesh.shape(l)) for l in range(1, mesh.n_levels + 1)]
    for l in range(1, mesh.n_levels + 1):
        mesh.interior(arrs[l - 1])[:] = func(mesh.cell_centers(l)) + shift
    return arrs


def smooth(x):
    return np.sin(x[..., 0]) * np.cos(2 * x[..., 1])


def test_error_norms_of_exact_field_vanish():
    mesh = M.build_uniform(UNIT, 8, 2)
    e = F.error_norms(mesh, sampled(mesh, smooth), smooth)
    assert (e.linf, e.l2, e.l2_volume) == (0.0, 0.0, 0.0)
    assert e.n_cells == 256


def test_error_norms_of_shifted_field():
    mesh = M.build_uniform(UNIT, 8, 2)
    e = F.error_norms(mesh, sampled(mesh, smooth, -0.125), smooth)
    assert e.linf == pytest.approx(0.125)
    assert e.l2 == pytest.approx(0.125)
    assert e.l2_volume == pytest.approx(0.125)


def test_error_norms_skip_pinned_cells():
    mesh = M.build_uniform(([-0.5, -0.5], [0.5, 0.5]), 8, 2)
    lsf = LevelSetSpec.sphere((0.0, 0.0), 0.25)
    st = S.build_stencils(mesh, lsf)
    phi = sampled(mesh, smooth)
    inside = evaluate_inside(mesh, lsf, 2)
    mesh.interior(phi[1])[inside] = 1e6
    e = F.error_norms(mesh, phi, smooth, st)
    assert e.linf == 0.0
    assert e.n_cells == 256 - int(inside.sum())


def evaluate_inside(mesh, lsf, l):
    return lsf(mesh.cell_centers(l)) <= 0


def test_volume_weighting_differs_on_refined_mesh():
    mesh = M.build_uniform(UNIT, 8, 1, max_level=3)
    flags = np.zeros(1, int)
    flags[0] = M.REFINE
    mesh = M.adapt(mesh, {1: flags})
    lev = mesh.level(2)
    fl = np.zeros(lev.n_blocks, int)
    fl[0] = M.REFINE
    mesh = M.adapt(mesh, {2: fl})
    # error 1 on the finest leaves, 0 elsewhere
    phi = sampled(mesh, smooth)
    mesh.interior(phi[2])[:] += 1.0
    e = F.error_norms(mesh, phi, smooth)
    n3 = mesh.level(3).leaf.sum() * 64
    assert e.l2 == pytest.approx(math.sqrt(n3 / e.n_cells))
    assert e.l2_volume < e.l2 <= e.linf


# ---------------------------------------------------------------- gradients

def linear_mesh(levels=2):
    bc = [M.FaceBC("dirichlet", lambda x: x[:, 0])] * 4
    mesh = M.build_uniform(UNIT, 8, levels, bc=bc)
    mesh.add_field("phi")
    mesh.interior(mesh.fields["phi"][levels - 1])[:] = mesh.cell_centers(levels)[..., 0]
    return mesh


def test_gradient_of_x_is_one():
    mesh = linear_mesh()
    st = S.build_level_stencil(mesh, 2, None)
    gx, gy = F.face_gradient(mesh, 2, "phi", st)
    assert gx.shape == (4, 9, 8) and gy.shape == (4, 8, 9)
    np.testing.assert_allclose(gx, 1.0, rtol=1e-12)
    np.testing.assert_allclose(gy, 0.0, atol=1e-12)


def wall_problem(value=1.0):
    """Object filling x >= 0.5 on an 8x8 grid: the x-face at 0.5 is half a
    cell from the last solved centers."""
    mesh = M.build_uniform(UNIT, 8, 1)
    lsf = LevelSetSpec.custom(lambda x: 0.5 - np.asarray(x)[..., 0], value=value)
    st = S.build_level_stencil(mesh, 1, lsf)
    phi = mesh.add_field("phi")
    return mesh, st, phi


def test_cut_face_uses_boundary_distance():
    mesh, st, phi = wall_problem(value=1.0)
    h = mesh.dx(1)
    inside = mesh.cell_centers(1)[..., 0] > 0.5
    mesh.interior(phi[0])[inside] = 1.0
    gx, gy = F.face_gradient(mesh, 1, "phi", st)
    # cells 0..3 solved at 0, boundary at d = 1/2 from cell 3
    np.testing.assert_allclose(st.d[0, 1, 3], 0.5)
    np.testing.assert_allclose(gx[0, 4], 2.0 / h)
    # faces between two pinned cells are zero
    np.testing.assert_array_equal(gx[0, 5:8], 0.0)


def test_constant_field_has_zero_gradient_at_cut_faces():
    bc = [M.FaceBC("dirichlet", 0.7)] * 4
    mesh = M.build_uniform(([-0.5, -0.5], [0.5, 0.5]), 8, 2, bc=bc)
    lsf = LevelSetSpec.sphere((0.0, 0.0), 0.23, value=0.7)
    st = S.build_level_stencil(mesh, 2, lsf)
    mesh.add_field("phi", fill=0.7)
    for g in F.face_gradient(mesh, 2, "phi", st):
        np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_shared_faces_agree():
    mesh = M.build_uniform(([-0.5, -0.5], [0.5, 0.5]), 8, 3)
    lsf = LevelSetSpec.sphere((0.01, -0.02), 0.23, value=1.0)
    st = S.build_level_stencil(mesh, 3, lsf)
    phi = mesh.add_field("phi")
    rng = np.random.default_rng(2)
    mesh.interior(phi[2])[:] = rng.standard_normal(mesh.interior(phi[2]).shape)
    lev = mesh.level(3)
    for k, g in enumerate(F.face_gradient(mesh, 3, "phi", st)):
        off = [1, 1]
        off[k] = 2
        nid = lev.nbr[(slice(None),) + tuple(off)]
        for a in np.flatnonzero(nid >= 0):
            ga = np.take(g[a], 8, axis=k)
            gb = np.take(g[nid[a]], 0, axis=k)
            assert np.array_equal(ga, gb)


def test_gradient_norm_zero_inside():
    mesh = M.build_uniform(([-0.5, -0.5], [0.5, 0.5]), 8, 2)
    lsf = LevelSetSpec.sphere((0.0, 0.0), 0.25, value=1.0)
    st = S.build_level_stencil(mesh, 2, lsf)
    phi = mesh.add_field("phi")
    mesh.interior(phi[1])[:] = mesh.cell_centers(2)[..., 0] ** 2
    gn = F.gradient_norm(mesh, 2, "phi", st)
    inside = lsf(mesh.cell_centers(2)) <= 0
    assert inside.any()
    np.testing.assert_array_equal(gn[inside], 0.0)
    assert np.all(gn[~inside] >= 0)


def radial_gradient_errors(level):
    cfg = H.CaseConfig(case="sphere_uniform", dim=3, max_level=level).resolved()
    prob = H.build_problem(cfg)
    mesh = prob.mesh
    st = S.build_level_stencil(mesh, level, prob.lsf)
    phi = mesh.add_field("phi")
    mesh.interior(phi[level - 1])[:] = prob.exact(mesh.cell_centers(level))
    gx = F.face_gradient(mesh, level, "phi", st)[0]
    h = mesh.dx(level)
    # x-face centers
    c = mesh.cell_centers(level)
    faces = np.concatenate([c[:, :1] - [0.5 * h, 0, 0], c + [0.5 * h, 0, 0]], axis=1)
    r = np.linalg.norm(faces, axis=-1)
    R = cfg.radius
    exact = faces[..., 0] * R / r**3           # d/dx of 1 - R/r
    err = np.abs(gx - exact)
    near = (r > R) & (r < R + 2 * h)
    # fixed region away from the sphere and from the domain faces, where the
    # Dirichlet ghost makes the face difference one-sided
    bulk = (r > 2 * R) & (np.abs(faces).max(axis=-1) < 0.5 - 1e-9)
    return err[near].max(), err[bulk].max()


def test_radial_gradient_of_3d_sphere():
    near1, bulk1 = radial_gradient_errors(3)
    near2, bulk2 = radial_gradient_errors(4)
    # first order next to the boundary, second order in the bulk
    assert near2 < 0.6 * near1
    assert bulk2 < 0.35 * bulk1
    assert bulk2 < 1e-3
