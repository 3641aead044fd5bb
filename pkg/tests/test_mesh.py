import numpy as np
import pytest

from nemrelax.mesh import (CellLocator, Mesh, annulus_mesh, disk_mesh, quadrature_rule, rectangle_mesh,
                           refine_uniform)


def test_rectangle_mesh_counts_and_area():
    m = rectangle_mesh(0, 2, 0, 1, 4, 3)
    assert m.n_points == 20 and m.n_cells == 24
    assert m.area == pytest.approx(2.0)
    assert np.all(m.volumes > 0)
    assert m.boundary_nodes().sum() == 14
    assert len(m.boundary_loops()) == 1


def test_orientation_is_fixed_on_input():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    m = Mesh(pts, [[0, 2, 1]])
    assert m.volumes[0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), [[0, 1, 2]])


def test_disk_and_annulus():
    d = disk_mesh(1.0, 32)
    assert d.area == pytest.approx(np.pi, rel=2e-3)
    a = annulus_mesh(0.2, 1.0, 8, 64)
    loops = a.boundary_loops()
    assert len(loops) == 2
    outer = a.outer_boundary_nodes()
    assert np.allclose(np.linalg.norm(a.points[outer], axis=1), 1.0)
    assert outer.sum() == 64


def test_gradients_exact_for_affine_and_adjoint():
    rng = np.random.default_rng(0)
    m = disk_mesh(1.0, 6)
    A = rng.normal(size=(2, 2))
    G = m.gradients(m.points @ A.T + 3.0)
    np.testing.assert_allclose(G, np.broadcast_to(A, G.shape), atol=1e-12)
    v = rng.normal(size=(m.n_points, 2))
    H = rng.normal(size=(m.n_cells, 2, 2))
    lhs = np.sum(m.gradients(v) * H)
    rhs = np.sum(v * m.gradient_adjoint(H))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_interpolation_and_locator():
    m = rectangle_mesh(0, 1, 0, 1, 5, 5)
    vals = 2 * m.points[:, 0] - m.points[:, 1]
    x = np.array([[0.31, 0.77], [0.5, 0.5], [1.5, 0.5]])
    out = m.interpolate(vals, x)
    np.testing.assert_allclose(out[:2], [2 * 0.31 - 0.77, 0.5])
    assert np.isnan(out[2])
    loc = CellLocator(m.points, m.cells)
    counts = loc.containing_counts(np.array([[0.1, 0.13], [0.2, 0.2]]))
    # interiors only: a shared vertex belongs to no cell
    assert counts[0] == 1 and counts[1] == 0
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.1, 0.1]])
    folded = CellLocator(tri, np.array([[0, 1, 2], [3, 1, 2]]))
    assert folded.containing_counts(np.array([[0.3, 0.3]]))[0] == 2


@pytest.mark.parametrize("dim,order", [(2, 1), (2, 2), (2, 5), (3, 1), (3, 2)])
def test_quadrature_weights_and_exactness(dim, order):
    bary, w = quadrature_rule(dim, order)
    assert w.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(bary.sum(axis=1), 1.0)
    # mean of lambda_0^2 over the simplex is 2 / ((d + 1)(d + 2))
    if order >= 2:
        assert np.dot(w, bary[:, 0] ** 2) == pytest.approx(2 / ((dim + 1) * (dim + 2)))


def test_refine_uniform_exact_prolongation():
    m = disk_mesh(1.0, 4)
    f, prolong = refine_uniform(m)
    assert f.n_cells == 4 * m.n_cells
    assert f.area == pytest.approx(m.area)
    vals = m.points @ np.array([[1.0, 2.0], [0.5, -1.0]]).T
    fine = prolong(vals)
    np.testing.assert_allclose(fine, f.points @ np.array([[1.0, 2.0], [0.5, -1.0]]).T, atol=1e-14)


def test_three_dimensional_mesh():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    m = Mesh(pts, [[0, 2, 1, 3]])
    assert m.volumes[0] == pytest.approx(1 / 6)
    assert len(m.boundary_faces()) == 4
