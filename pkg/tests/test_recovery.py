import numpy as np
import pytest
from support import MID, WELL_A, WELL_B

from nemrelax.convexify import LaminateTree, MatrixGrid, extract_laminate, tangential_quasiconvexify
from nemrelax.energy_models import make_double_well, make_one_constant, make_tangent_double_well, planar_tangent_wells
from nemrelax.fields import AdmissiblePair, DirectorField, nematic_energy_deformed
from nemrelax.geometry import Box, GridDeformation
from nemrelax.mesh import disk_mesh, rectangle_mesh
from nemrelax.recovery import (RecoveryConfig, RelaxedDensity, build_laminate_map, build_recovery_sequence,
                               max_layers, mesh_spacing, minimize_alternating, modify_in_ball,
                               recover_director, vitali_pass)
from nemrelax.recovery import _nem_value_grad


def identity_pair(N, director=(1.0, 0.0)):
    mesh = rectangle_mesh(0, 1, 0, 1, N, N)
    u = GridDeformation(mesh, mesh.points.copy())
    n = DirectorField.constant(director, (-1 / N, -1 / N, 1 + 1 / N, 1 + 1 / N), 1 / N)
    return AdmissiblePair(u, n)


@pytest.fixture(scope="module")
def mid_tree(dw, dw_envelope):
    return extract_laminate(dw, None, MID, dw_envelope)


# --- laminate maps -----------------------------------------------------------

def test_mesh_spacing():
    assert mesh_spacing(rectangle_mesh(0, 1, 0, 1, 8, 8)) == pytest.approx(0.125)
    with pytest.raises(ValueError):
        mesh_spacing(disk_mesh(1.0, 4))


def test_max_layers():
    box = Box((0.5, 0.5), 0.5)
    assert max_layers(box, 1 / 16, 0.5) == 8
    assert max_layers(box, 1 / 16, 0.25) == 4
    assert max_layers(box, 1 / 16, 0.5, b=(0.6, 0.8)) == 0


def test_laminate_map_core_gradients_and_boundary(dw, mid_tree):
    mesh = rectangle_mesh(0, 1, 0, 1, 32, 32)
    box = Box((0.5, 0.5), 0.5)
    prof = build_laminate_map(mid_tree, MID, mesh, box, 4, dw, relax_collar=False)
    G = mesh.gradients(prof.values)
    core = box.contains(mesh.centroids) & (np.max(np.abs(mesh.centroids - 0.5), axis=1) < 0.5 - prof.collar)
    got = {tuple(np.round(g.ravel(), 10)) for g in G[core]}
    assert got == {tuple(WELL_A.ravel()), tuple(WELL_B.ravel())}
    bnd = mesh.boundary_nodes()
    x = mesh.points[bnd] - 0.5
    np.testing.assert_allclose(prof.values[bnd], x @ MID.T, atol=1e-14)
    assert prof.min_det > 0 and prof.lam == 0.5 and prof.k == 4


def test_laminate_excess_decreases_with_layers(dw, mid_tree):
    mesh = rectangle_mesh(0, 1, 0, 1, 64, 64)
    box = Box((0.5, 0.5), 0.5)
    ex = [build_laminate_map(mid_tree, MID, mesh, box, k, dw).excess for k in (2, 4, 8, 16)]
    assert all(a > b for a, b in zip(ex, ex[1:]))
    assert ex[-1] > 0


def test_relaxed_collar_improves_energy(dw, mid_tree):
    mesh = rectangle_mesh(0, 1, 0, 1, 32, 32)
    box = Box((0.5, 0.5), 0.5)
    raw = build_laminate_map(mid_tree, MID, mesh, box, 4, dw, relax_collar=False)
    rel = build_laminate_map(mid_tree, MID, mesh, box, 4, dw)
    assert rel.mean_energy < raw.mean_energy
    np.testing.assert_array_equal(rel.values[mesh.boundary_nodes()], raw.values[mesh.boundary_nodes()])


def test_laminate_map_caps_layers(dw, mid_tree):
    mesh = rectangle_mesh(0, 1, 0, 1, 8, 8)
    prof = build_laminate_map(mid_tree, MID, mesh, Box((0.5, 0.5), 0.5), 64, dw, relax_collar=False)
    assert prof.capped and prof.k == 4


def test_leaf_tree_leaves_field_unchanged(dw):
    pair = identity_pair(8)
    leaf = LaminateTree(WELL_A, float(dw(WELL_A)))
    z, rec = modify_in_ball(pair.u, Box((0.5, 0.5), 0.25), leaf, 4, dw)
    assert z is pair.u and rec.accepted


def test_modify_in_ball_meets_bound(dw, dw_envelope, mid_tree):
    pair = identity_pair(32)
    box = Box((0.5, 0.5), 0.25)
    z, rec = modify_in_ball(pair.u, box, mid_tree, 4, dw, env=dw_envelope, eta=0.05)
    assert rec.accepted
    assert rec.energy_after < rec.energy_before
    assert rec.energy_after <= rec.bound
    outside = ~box.contains(pair.u.mesh.points, closed=True)
    np.testing.assert_array_equal(z.values[outside], pair.u.values[outside])
    assert z.admissible


def test_vitali_pass_covers_and_keeps_boundary(dw, dw_envelope):
    pair = identity_pair(16)
    z, unc, recs = vitali_pass(pair.u, dw, dw_envelope, 0.1, RecoveryConfig(), k=4)
    assert recs and all(r.accepted for r in recs)
    assert unc.sum() < pair.u.mesh.n_cells
    g = pair.u.gamma
    np.testing.assert_array_equal(z.values[g], pair.u.values[g])


# --- sequence ------------------------------------------------------------------

def test_recovery_sequence_gap_decreases(dw, dw_envelope, one_constant):
    pairs, rep = build_recovery_sequence(identity_pair(32), dw, one_constant, dw_envelope,
                                         config=RecoveryConfig(steps=4))
    gaps = rep.gaps
    assert len(pairs) == 4
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert all(r["gap"] <= r["bound"] for r in rep.rows)
    assert all(r["image_symdiff"] == 0 for r in rep.rows)
    assert [r["k"] for r in rep.rows] == [2, 4, 8, 16]
    text = rep.to_csv()
    assert text.splitlines()[0].split(",")[:5] == ["j", "eta", "k", "passes", "I"]


def test_recovery_config_validation():
    with pytest.raises(ValueError):
        RecoveryConfig(eta=1.5)
    with pytest.raises(ValueError):
        RecoveryConfig(shrink=0.0)
    c = RecoveryConfig(k_base=3)
    assert c.k_at(2) == 12 and c.eta_at(4) == 0.25


# --- director recovery ---------------------------------------------------------

@pytest.fixture(scope="module")
def tangent_setup():
    V = make_tangent_double_well(planar_tangent_wells(1.0), K=1.0, eps=0.25)
    env = tangential_quasiconvexify(V, [1.0, 0.0], MatrixGrid([-1.6] * 4, [1.6] * 4, 17, mask_det=False))
    return V, env


def test_recover_director_reaches_tangential_envelope(tangent_setup):
    V, env = tangent_setup
    mesh = rectangle_mesh(0, 1, 0, 1, 8, 8)
    u = GridDeformation(mesh, mesh.points.copy())
    n = DirectorField.constant([1.0, 0.0], (0, 0, 1, 1), 1 / 32)
    nk, info = recover_director(n, V, env, 32)
    assert info["changed"] and info["k"] == 16
    e0 = nematic_energy_deformed(AdmissiblePair(u, n), V)
    ek = nematic_energy_deformed(AdmissiblePair(u, nk), V)
    assert e0 == pytest.approx(1.0)
    assert ek == pytest.approx(0.2, abs=1e-6)


def test_recover_director_keeps_non_constant_fields(tangent_setup):
    V, env = tangent_setup
    n = DirectorField.from_function(lambda p: np.column_stack([np.cos(p[:, 1]), np.sin(p[:, 1])]),
                                    (0, 0, 1, 1), 0.1)
    nk, info = recover_director(n, V, env, 8)
    assert nk is n and not info["changed"]
    same, info = recover_director(DirectorField.constant([1.0, 0.0], (0, 0, 1, 1), 0.1),
                                  make_one_constant(1.0, dim=2), None, 8)
    assert not info["changed"]


# --- minimizer -------------------------------------------------------------------

def test_relaxed_density_below_density(dw, dw_envelope):
    R = RelaxedDensity(dw, dw_envelope)
    F = np.stack([MID, WELL_A, np.array([[1.1, 0.1], [0.05, 0.9]])])
    r = R(F)
    assert np.all(r <= dw(F) + 1e-15)
    assert r[0] == pytest.approx(2.0)
    assert R.gradient(F).shape == (3, 2, 2)


def test_nematic_raster_gradient_matches_finite_differences(one_constant):
    rng = np.random.default_rng(7)
    n = DirectorField((0.0, 0.0), 0.25, rng.normal(size=(5, 5, 2)))
    y = rng.uniform(0.05, 0.95, size=(40, 2))
    val, grad = _nem_value_grad(n, one_constant, y, 0.01)
    eps = 1e-6
    V0 = np.array(n.vectors)
    fd = np.zeros_like(V0)
    for idx in np.ndindex(V0.shape):
        for sgn in (1, -1):
            V1 = V0.copy()
            V1[idx] += sgn * eps
            m = DirectorField.__new__(DirectorField)
            m.vectors, m.origin, m.h, m.shape = V1, n.origin, n.h, n.shape
            fd[idx] += sgn * _nem_value_grad(m, one_constant, y, 0.01)[0] / (2 * eps)
    np.testing.assert_allclose(grad, fd, atol=1e-6 * max(1.0, np.abs(fd).max()))


def test_minimize_toy_reaches_known_minimum():
    # identical wells give |F - I|^2 + theta(det F); the minimum is theta(1) = 2 on the unit square
    W = make_double_well(np.eye(2), np.eye(2))
    V = make_one_constant(1.0, dim=2)
    N = 8
    pair = identity_pair(N)
    rng = np.random.default_rng(0)
    inner = ~pair.u.mesh.boundary_nodes()
    u0 = pair.u.with_values(pair.u.values + 0.03 * inner[:, None] * rng.uniform(-1, 1, pair.u.values.shape))
    ang = 0.3 * rng.uniform(-1, 1, size=pair.n.shape)
    n0 = DirectorField(pair.n.origin, pair.n.h, np.stack([np.cos(ang), np.sin(ang)], -1))
    start = AdmissiblePair(u0, n0, pair.u0)
    out, rep = minimize_alternating(start, W, V, iterations=30)
    obj = rep.objective
    assert all(b <= a + 1e-12 for a, b in zip(obj, obj[1:]))
    assert obj[-1] == pytest.approx(2.0, abs=1e-4)
    assert out.u.min_det > 1e-6
    np.testing.assert_array_equal(out.u.values[out.u.gamma], pair.u.values[pair.u.gamma])
    with pytest.raises(ValueError):
        minimize_alternating(start, W, V, selector="J")


def test_minimize_relaxed_selector_does_not_exceed_unrelaxed(dw, dw_envelope, one_constant):
    pair = identity_pair(8)
    _, rI = minimize_alternating(pair, dw, one_constant, iterations=2)
    _, rS = minimize_alternating(pair, dw, one_constant, selector="I*", envW=dw_envelope, iterations=2)
    assert rS.objective[0] < rI.objective[0]
    assert rS.objective[-1] <= rS.objective[0]
