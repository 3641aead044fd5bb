import io

import numpy as np
import pytest
from support import (cavitation, cavity_flux, complex_square, disk_twist, ellipse_map, image_perimeter,
                     smooth_diffeo, wavy_square)

from nemrelax.geometry import (Ball, Box, GridDeformation, compose_inner, default_test_family, degree,
                               degree_3d, geometric_image, is_ap_member, local_inverse, make_test_pair, paste,
                               read_deformation, surface_energy, topological_image, winding_number,
                               write_deformation)
from nemrelax.mesh import annulus_mesh, disk_mesh, rectangle_mesh, refine_uniform


@pytest.fixture(scope="module")
def square():
    return rectangle_mesh(0, 1, 0, 1, 16, 16)


def test_deformation_basic(square):
    u = GridDeformation.from_map(square, lambda x: 2 * x)
    np.testing.assert_allclose(u.det, 4.0)
    assert u.jacobian_integral() == pytest.approx(4.0)
    assert u.admissible
    flipped = GridDeformation.from_map(square, lambda x: x[:, ::-1])
    assert not flipped.admissible
    with pytest.raises(ValueError):
        GridDeformation(square, square.points, strict=False).with_values(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        GridDeformation.from_map(square, lambda x: x[:, ::-1], strict=True)


# --- surface energy ----------------------------------------------------------

def test_surface_energy_is_linear_in_the_test_pair(square):
    u = GridDeformation.from_map(square, smooth_diffeo)
    t1 = make_test_pair((0.5, 0.5), 0.4, "coord", (0.5, 0.5), 1.0, axis=0)
    t2 = make_test_pair((0.5, 0.5), 0.4, "radial", (0.5, 0.5), 1.0)
    from nemrelax.geometry import TestPair

    comb = TestPair(lambda x: t1.phi(x), t1.dphi,
                    lambda y: 2 * t1.g(y) - 3 * t2.g(y), lambda y: 2 * t1.dg(y) - 3 * t2.dg(y))
    assert surface_energy(u, comb) == pytest.approx(2 * surface_energy(u, t1) - 3 * surface_energy(u, t2),
                                                    abs=1e-13)


def test_identity_and_affine_maps_have_zero_surface_energy(square):
    for fn in (lambda x: x, lambda x: x @ np.array([[1.3, 0.4], [-0.2, 0.9]]).T + 0.1):
        u = GridDeformation.from_map(square, fn)
        for t in default_test_family(u):
            # quadrature error only: the bumps are polynomials of degree six
            assert abs(surface_energy(u, t)) < 1e-4
        assert is_ap_member(u).passed


def test_smooth_diffeo_surface_energy_converges():
    m = rectangle_mesh(0, 1, 0, 1, 8, 8)
    errs = []
    for _ in range(3):
        u = GridDeformation.from_map(m, smooth_diffeo)
        errs.append(max(abs(surface_energy(u, t)) for t in default_test_family(u)))
        m, _ = refine_uniform(m)
    assert errs[0] / errs[1] >= 4 and errs[1] / errs[2] >= 4


def test_cavitation_surface_energy_equals_flux():
    u = GridDeformation.from_map(annulus_mesh(1e-3, 1.0, 32, 64), cavitation)
    t = make_test_pair((0.0, 0.0), 0.9, "radial", (0.0, 0.0), 3.0)
    flux = cavity_flux(t)
    assert flux != 0
    assert surface_energy(u, t) == pytest.approx(flux, rel=1e-2)


def test_is_ap_member_flags_cavitation_not_identity():
    m = annulus_mesh(1e-3, 1.0, 32, 64)
    assert not is_ap_member(GridDeformation.from_map(m, cavitation)).passed
    rep = is_ap_member(GridDeformation.from_map(m, lambda x: x))
    assert rep.passed and rep.det_positive
    assert set(rep.as_dict()) >= {"passed", "max_normalized", "residuals", "cof_integral"}


# --- degree and images ----------------------------------------------------------

def test_winding_number_of_square():
    sq = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    np.testing.assert_allclose(winding_number(sq, [[0.5, 0.5], [2.0, 0.5]]), [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(winding_number(sq[::-1], [[0.5, 0.5]]), [-1.0], atol=1e-12)


def test_degree_of_complex_square_is_two():
    u = GridDeformation.from_map(disk_mesh(1.0, 16), complex_square)
    assert degree(u, None, np.array([0.0, 0.0])) == 2
    assert degree(u, None, np.array([0.1, 0.05])) == 2
    assert degree(u, None, np.array([3.0, 0.0])) == 0
    assert degree(u, Ball((0.0, 0.0), 0.5), np.array([0.0, 0.0])) == 2


def test_degree_raises_on_boundary_image(square):
    u = GridDeformation.from_map(square, lambda x: x)
    with pytest.raises(ValueError):
        degree(u, None, np.array([0.5, 0.0]))
    assert degree(u, Box((0.5, 0.5), 0.25), np.array([0.5, 0.5])) == 1


def test_degree_3d_of_tetrahedron():
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    T = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    assert degree_3d(P, T, [0.1, 0.1, 0.1]) == 1
    assert degree_3d(P, T, [2.0, 2.0, 2.0]) == 0


@pytest.mark.parametrize("mesh_fn,fn", [
    (lambda: disk_mesh(1.0, 16), disk_twist),
    (lambda: disk_mesh(1.0, 16), ellipse_map),
    (lambda: rectangle_mesh(0, 1, 0, 1, 32, 32), wavy_square),
])
def test_topological_image_area_matches_jacobian_integral(mesh_fn, fn):
    u = GridDeformation.from_map(mesh_fn(), fn)
    per = image_perimeter(u)
    for h in (0.05, 0.02):
        r = topological_image(u, h=h)
        assert abs(r.area - u.jacobian_integral()) <= 2 * h * per


def test_topological_and_geometric_images_agree_for_injective_map():
    u = GridDeformation.from_map(disk_mesh(1.0, 16), disk_twist)
    a = topological_image(u, h=0.05)
    b = geometric_image(u, h=0.05)
    assert a.symmetric_difference(b) <= a.boundary_cells()


def test_cavitation_topological_image_is_the_shell():
    u = GridDeformation.from_map(annulus_mesh(1e-3, 1.0, 32, 64), cavitation)
    r = topological_image(u, h=0.05)
    rad = np.linalg.norm(r.centers(), axis=-1)
    shell = (rad > 1) & (rad < 2)
    assert np.sum(shell ^ r.occupancy) <= r.boundary_cells()
    assert not r.occupancy[rad < 0.9].any()


def test_region_csv(tmp_path, square):
    r = topological_image(GridDeformation.from_map(square, lambda x: x), h=0.25)
    p = tmp_path / "img.csv"
    r.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "x,y,occupied,degree"
    assert len(lines) == 1 + r.occupancy.size


# --- local inverse, paste, compose ------------------------------------------------

def test_local_inverse_round_trip(square):
    u = GridDeformation.from_map(square, smooth_diffeo)
    inv = local_inverse(u)
    x = np.random.default_rng(3).uniform(0.05, 0.95, size=(50, 2))
    np.testing.assert_allclose(inv(u(x)), x, atol=1e-12)
    J = inv.jacobian(u(x[:1]))
    assert J.shape == (1, 2, 2)
    with pytest.raises(ValueError):
        inv(np.array([[5.0, 5.0]]))


def test_local_inverse_rejects_non_injective():
    u = GridDeformation.from_map(disk_mesh(1.0, 16), complex_square)
    with pytest.raises(ValueError):
        local_inverse(u)
    # on a small ball away from the origin it is injective
    inv = local_inverse(u, Ball((0.5, 0.0), 0.2))
    y = complex_square(np.array([[0.5, 0.05]]))
    np.testing.assert_allclose(inv(y), [[0.5, 0.05]], atol=1e-3)


def test_paste(square):
    u = GridDeformation.from_map(square, lambda x: x)
    bump_map = lambda x: x + 0.02 * np.exp(-50 * np.sum((x - 0.5) ** 2, 1))[:, None]  # noqa: E731
    v = GridDeformation.from_map(square, lambda x: np.where(
        (np.abs(x - 0.5).max(axis=1) < 0.3)[:, None], bump_map(x), x))
    w = paste(u, v, Box((0.5, 0.5), 0.35), Box((0.5, 0.5), 0.3))
    np.testing.assert_array_equal(w.values, v.values)
    far = GridDeformation.from_map(square, lambda x: x + 0.01)
    with pytest.raises(ValueError):
        paste(u, far, Box((0.5, 0.5), 0.35), Box((0.5, 0.5), 0.3))


def test_compose_inner_with_identity_and_affine_u(square):
    u = GridDeformation.from_map(square, lambda x: x @ np.array([[1.2, 0.1], [0.0, 0.9]]).T)
    box = Box((0.5, 0.5), 0.25)
    z = compose_inner(u, lambda x: x, box)
    np.testing.assert_allclose(z.values, u.values)

    def rho(x):
        d = np.abs(x - 0.5).max(axis=1)
        s = np.clip(1 - d / 0.25, 0, 1)
        return x + 0.05 * s[:, None] * np.array([1.0, 0.0])

    z = compose_inner(u, rho, box)
    R = rho(square.points)
    ins = box.contains(square.points)
    np.testing.assert_allclose(z.values[ins], R[ins] @ np.array([[1.2, 0.1], [0.0, 0.9]]).T, atol=1e-12)
    with pytest.raises(ValueError):
        compose_inner(u, lambda x: x[:, ::-1], box)


def test_compose_inner_with_nonaffine_u():
    m = rectangle_mesh(0, 1, 0, 1, 8, 8)
    box = Box((0.5, 0.5), 0.25)

    def rho(x):
        d = np.abs(x - 0.5).max(axis=1)
        return x + (d < 0.125 - 1e-12)[:, None] * np.array([1 / 16, 0.0])

    # u affine on the box and curved outside: resolved without refinement
    def curved_outside(x):
        d = np.clip(np.abs(x - 0.5).max(axis=1) - 0.4, 0, None)
        return x + 0.5 * d[:, None] ** 2 * np.array([0.0, 1.0])

    u = GridDeformation.from_map(m, curved_outside)
    z = compose_inner(u, rho, box)
    x = np.array([[0.5, 0.5]])
    np.testing.assert_allclose(z(x), u(rho(x)), atol=1e-12)
    # sheared rho-cells straddle the kinks of a generic u at every level
    with pytest.raises(ValueError, match="not resolved"):
        compose_inner(GridDeformation.from_map(m, smooth_diffeo), rho, box, max_refine=1)


# --- IO -----------------------------------------------------------------------------

def test_deformation_round_trip():
    u = GridDeformation.from_map(annulus_mesh(0.1, 1.0, 4, 12), cavitation)
    buf = io.StringIO()
    write_deformation(u, buf)
    back = read_deformation(io.StringIO(buf.getvalue()))
    np.testing.assert_array_equal(back.values, u.values)
    np.testing.assert_array_equal(back.mesh.points, u.mesh.points)
    np.testing.assert_array_equal(back.gamma, u.gamma)


def test_read_rejects_truncated_file():
    u = GridDeformation.from_map(rectangle_mesh(0, 1, 0, 1, 2, 2), lambda x: x)
    buf = io.StringIO()
    write_deformation(u, buf)
    text = buf.getvalue().splitlines()
    with pytest.raises(ValueError):
        read_deformation(io.StringIO("\n".join(text[:8])))


def test_subsampled_coverage_tracks_jacobian_integral():
    v = GridDeformation.from_map(disk_mesh(1.0, 16), ellipse_map)
    coarse = topological_image(v, h=0.02)
    fine = topological_image(v, h=0.02, subsamples=16)
    np.testing.assert_array_equal(fine.occupancy, coarse.occupancy)
    J = v.jacobian_integral()
    assert abs(fine.area - J) <= 2 * 0.02**2
    assert abs(fine.area - J) < abs(coarse.area - J)
    assert fine.coverage.min() >= 0 and fine.coverage.max() <= 1
