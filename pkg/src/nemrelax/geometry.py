"""Piecewise-affine deformations and their topological toolkit.

Covers the distributional surface-energy pairing that detects cavitation,
the topological degree, topological and geometric images on rasters, the
local inverse, and the paste and inner-composition constructions.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .mesh import CellLocator, quadrature_rule, refine_uniform
from .tensor_core import cof, det

__all__ = [
    "GridDeformation",
    "TestPair",
    "Ball",
    "Box",
    "RegionSample",
    "APReport",
    "LocalInverse",
    "bump",
    "make_test_pair",
    "default_test_family",
    "surface_energy",
    "is_ap_member",
    "winding_number",
    "degree",
    "degree_3d",
    "topological_image",
    "geometric_image",
    "local_inverse",
    "paste",
    "compose_inner",
    "write_deformation",
    "read_deformation",
]


class GridDeformation:
    """Continuous piecewise-affine deformation on a simplicial mesh.

    Parameters
    ----------
    mesh : Mesh
    values : (N, d) array
        Nodal values of u.
    gamma : (N,) bool array, optional
        Nodes carrying the boundary datum; defaults to all boundary nodes.
    strict : bool
        Raise if some cell has ``det Du <= 0`` instead of flagging it.
    """

    def __init__(self, mesh, values, gamma=None, strict=False):
        self.mesh = mesh
        self.values = np.array(values, dtype=float)
        if self.values.shape != mesh.points.shape:
            raise ValueError("values must have one vector per mesh node")
        self.values.setflags(write=False)
        self.gamma = mesh.boundary_nodes() if gamma is None else np.asarray(gamma, dtype=bool)
        self.Du = mesh.gradients(self.values)
        self.det = det(self.Du)
        self.cof = cof(self.Du)
        self.admissible = bool(np.all(self.det > 0))
        if strict and not self.admissible:
            raise ValueError(f"deformation has det Du <= 0 on {int(np.sum(self.det <= 0))} cells")

    @classmethod
    def from_map(cls, mesh, fn, **kw):
        """Nodal interpolant of a callable ``fn(points) -> values``."""
        return cls(mesh, fn(mesh.points), **kw)

    @property
    def dim(self):
        return self.mesh.dim

    @property
    def min_det(self):
        return float(self.det.min())

    def with_values(self, values):
        return GridDeformation(self.mesh, values, gamma=self.gamma)

    def __call__(self, x):
        return self.mesh.interpolate(self.values, x)

    def jacobian_integral(self, cell_mask=None):
        """Integral of det Du over the mesh or a subset of cells."""
        w = self.mesh.volumes * self.det
        return float(w.sum() if cell_mask is None else w[cell_mask].sum())

    def deformed_mesh(self, cell_mask=None):
        cells = self.mesh.cells if cell_mask is None else self.mesh.cells[cell_mask]
        return self.values, cells


@dataclass(frozen=True)
class Ball:
    """Euclidean ball."""

    center: tuple
    radius: float

    def contains(self, x, closed=False):
        r = np.linalg.norm(np.asarray(x) - np.asarray(self.center), axis=-1)
        return r <= self.radius if closed else r < self.radius

    def boundary_polygon(self, m):
        th = np.linspace(0, 2 * np.pi, m, endpoint=False)
        return np.asarray(self.center) + self.radius * np.column_stack([np.cos(th), np.sin(th)])


@dataclass(frozen=True)
class Box:
    """Sup-norm ball ``{x : max |x_i - c_i| < half}``."""

    center: tuple
    half: float

    @property
    def radius(self):
        return self.half

    def contains(self, x, closed=False):
        r = np.max(np.abs(np.asarray(x) - np.asarray(self.center)), axis=-1)
        return r <= self.half + 1e-12 if closed else r < self.half - 1e-12

    def boundary_polygon(self, m):
        k = max(1, m // 4)
        t = np.linspace(-1, 1, k, endpoint=False)
        one = np.ones(k)
        sides = [np.column_stack([t, -one]), np.column_stack([one, t]),
                 np.column_stack([-t, one]), np.column_stack([-one, -t])]
        return np.asarray(self.center) + self.half * np.concatenate(sides)


def bump(center, radius):
    """Smooth radial cutoff ``(1 - |x - c|^2 / R^2)^3`` and its gradient."""
    c = np.asarray(center, dtype=float)

    def value(x):
        s = 1 - np.sum((x - c) ** 2, axis=-1) / radius**2
        return np.where(s > 0, s, 0.0) ** 3

    def grad(x):
        s = 1 - np.sum((x - c) ** 2, axis=-1) / radius**2
        s = np.where(s > 0, s, 0.0)
        return (-6 * s**2 / radius**2)[..., None] * (x - c)

    return value, grad


@dataclass(frozen=True)
class TestPair:
    """Scalar test function phi on the reference domain and vector field g on the target.

    ``dg`` returns the Jacobian of g with ``dg(y)[..., i, j] = d g_i / d y_j``.
    """

    phi: Callable
    dphi: Callable
    g: Callable
    dg: Callable
    name: str = ""

    __test__ = False


def make_test_pair(phi_center, phi_radius, g_kind, g_center, g_radius, axis=0, name=""):
    """Test pair from bump functions.

    ``g_kind`` is ``"radial"`` for ``g(y) = (y - c) b(y)`` or ``"coord"``
    for ``g(y) = e_axis b(y)``, where b is a bump of radius ``g_radius``.
    """
    phi, dphi = bump(phi_center, phi_radius)
    b, db = bump(g_center, g_radius)
    c = np.asarray(g_center, dtype=float)

    if g_kind == "radial":
        def g(y):
            return (y - c) * b(y)[..., None]

        def dg(y):
            d = y.shape[-1]
            return b(y)[..., None, None] * np.eye(d) + (y - c)[..., :, None] * db(y)[..., None, :]
    elif g_kind == "coord":
        def g(y):
            e = np.zeros(y.shape[-1])
            e[axis] = 1.0
            return b(y)[..., None] * e

        def dg(y):
            d = y.shape[-1]
            out = np.zeros(y.shape[:-1] + (d, d))
            out[..., axis, :] = db(y)
            return out
    else:
        raise ValueError("g_kind must be 'radial' or 'coord'")
    return TestPair(phi, dphi, g, dg, name or f"{g_kind}{axis}@{tuple(np.round(phi_center, 3))}")


def default_test_family(u):
    """Twelve test pairs covering the domain and the deformed configuration.

    Four phi bumps centred on a 2 x 2 lattice at 0.4 and 0.6 of the reference
    bounding box, each shrunk to stay clear of the outer boundary, combined
    with a radial field and the two coordinate fields supported on the
    whole image. Holes of the mesh are treated as punctures, so a bump may
    cover them.
    """
    lo = u.mesh.points.min(axis=0)
    hi = u.mesh.points.max(axis=0)
    ylo = u.values.min(axis=0)
    yhi = u.values.max(axis=0)
    yc = 0.5 * (ylo + yhi)
    yr = 0.75 * np.linalg.norm(yhi - ylo) + 1e-12
    bnd = u.mesh.points[u.mesh.outer_boundary_nodes()]
    fam = []
    for fx in (0.4, 0.6):
        for fy in (0.4, 0.6):
            c = lo + np.array([fx, fy]) * (hi - lo)
            r = 0.9 * np.linalg.norm(bnd - c, axis=1).min()
            fam.append(make_test_pair(c, r, "radial", yc, yr))
            fam.append(make_test_pair(c, r, "coord", yc, yr, axis=0))
            fam.append(make_test_pair(c, r, "coord", yc, yr, axis=1))
    return fam


def _quad_points(u, order):
    bary, w = quadrature_rule(u.dim, order)
    X = np.einsum("qk,ckd->cqd", bary, u.mesh.points[u.mesh.cells])
    Y = np.einsum("qk,ckd->cqd", bary, u.values[u.mesh.cells])
    return X, Y, w


def _surface_integrand(u, t, order):
    X, Y, w = _quad_points(u, order)
    g = t.g(Y)
    divg = np.trace(t.dg(Y), axis1=-2, axis2=-1)
    phi = t.phi(X)
    dphi = t.dphi(X)
    a = np.einsum("cij,cqi,cqj->cq", u.cof, g, dphi)
    b = u.det[:, None] * phi * divg
    return a, b, w


def surface_energy(u, t, quad_order=2):
    """Surface-energy pairing of u against a test pair.

    Quadrature of ``cof Du : (g(u) (x) Dphi) + det Du phi div g(u)`` over
    the mesh. It vanishes up to quadrature error for continuous
    piecewise-affine maps without interior holes; a hole whose image
    encloses a cavity contributes ``-phi * flux of g`` through the cavity
    boundary, with the outward normal of the cavity.
    """
    a, b, w = _surface_integrand(u, t, quad_order)
    return float(np.sum(u.mesh.volumes * ((a + b) @ w)))


def _surface_scale(u, t, quad_order):
    a, b, w = _surface_integrand(u, t, quad_order)
    return float(np.sum(u.mesh.volumes * ((np.abs(a) + np.abs(b)) @ w)))


@dataclass
class APReport:
    passed: bool
    max_residual: float
    max_normalized: float
    residuals: list
    min_det: float
    det_positive: bool
    cof_integral: float
    tol: float

    def as_dict(self):
        return dict(self.__dict__)


def is_ap_member(u, family=None, tol=1e-3, q=2.0, quad_order=2):
    """Check that the surface energy vanishes on a family of test pairs.

    Each residual is normalized by the integral of the absolute integrand,
    so the tolerance is relative. The report also lists the determinant
    sign and the integral of ``|cof Du|^q``.
    """
    family = default_test_family(u) if family is None else family
    res = []
    norm = []
    for t in family:
        e = surface_energy(u, t, quad_order)
        s = _surface_scale(u, t, quad_order)
        res.append(e)
        norm.append(abs(e) / s if s > 0 else 0.0)
    cofq = float(np.sum(u.mesh.volumes * np.sqrt(np.einsum("cij,cij->c", u.cof, u.cof)) ** q))
    mx = float(max(norm)) if norm else 0.0
    return APReport(
        passed=bool(mx <= tol and u.admissible and np.isfinite(cofq)),
        max_residual=float(max(abs(r) for r in res)) if res else 0.0,
        max_normalized=mx,
        residuals=[float(r) for r in res],
        min_det=u.min_det,
        det_positive=u.admissible,
        cof_integral=cofq,
        tol=tol,
    )


def winding_number(curve, y, chunk=4096):
    """Winding numbers of a closed polygon around points y.

    Returns the real-valued turning sums divided by 2 pi; callers round.
    """
    curve = np.asarray(curve, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    nxt = np.roll(curve, -1, axis=0)
    out = np.empty(len(y))
    for s in range(0, len(y), chunk):
        yy = y[s:s + chunk, None, :]
        a = curve[None] - yy
        b = nxt[None] - yy
        cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
        dot = np.einsum("pkd,pkd->pk", a, b)
        out[s:s + chunk] = np.arctan2(cross, dot).sum(axis=1) / (2 * np.pi)
    return out


def _dist_to_polygon(curve, y, chunk=4096):
    curve = np.asarray(curve, dtype=float)
    nxt = np.roll(curve, -1, axis=0)
    e = nxt - curve
    ee = np.maximum(np.einsum("kd,kd->k", e, e), 1e-300)
    out = np.empty(len(y))
    for s in range(0, len(y), chunk):
        a = y[s:s + chunk, None, :] - curve[None]
        t = np.clip(np.einsum("pkd,kd->pk", a, e) / ee, 0, 1)
        d = a - t[..., None] * e
        out[s:s + chunk] = np.sqrt(np.einsum("pkd,pkd->pk", d, d)).min(axis=1)
    return out


def _boundary_curves(u, U, samples=512):
    """Image polygons of the boundary of U under u.

    For ``U=None`` the mesh boundary loops are used; u is affine on each
    boundary edge so the polygons are exact. Balls and boxes are sampled
    and refined until consecutive samples stay inside one cell or adjacent
    cells.
    """
    if U is None:
        return [u.values[loop] for loop in u.mesh.boundary_loops()]
    if isinstance(U, (Ball, Box)):
        h = np.sqrt(u.mesh.volumes.min())
        m = max(samples, int(np.ceil(2 * np.pi * U.radius / (0.25 * h))))
        pts = U.boundary_polygon(m)
    else:
        pts = np.asarray(U, dtype=float)
    img = u(pts)
    if np.any(np.isnan(img)):
        raise ValueError("boundary of U leaves the mesh")
    return [img]


def degree(u, U, y, tol=1e-9):
    """Topological degree of u on U at the points y.

    Parameters
    ----------
    u : GridDeformation
    U : Ball, Box, (K, 2) polygon or None
        Region; ``None`` means the whole mesh domain.
    y : (2,) or (P, 2) array

    Raises
    ------
    ValueError
        If some y lies within ``tol`` of u(boundary of U).
    """
    if u.dim == 3:
        raise ValueError("use degree_3d for three-dimensional boundaries")
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    total = np.zeros(len(Y))
    for curve in _boundary_curves(u, U):
        if np.any(_dist_to_polygon(curve, Y) <= tol):
            raise ValueError("point lies on the image of the boundary")
        total += winding_number(curve, Y)
    deg = np.rint(total).astype(int)
    if np.max(np.abs(total - deg), initial=0.0) > 1e-6:
        raise ValueError("winding sum is not close to an integer")
    return int(deg[0]) if single else deg


def degree_3d(points, triangles, y, tol=1e-9):
    """Degree from the signed solid angle of an oriented closed surface.

    ``points[triangles]`` must be oriented with outward normals.
    """
    P = np.asarray(points, dtype=float)
    T = np.asarray(triangles)
    Y = np.atleast_2d(np.asarray(y, dtype=float))
    out = np.empty(len(Y))
    for k, yy in enumerate(Y):
        a = P[T[:, 0]] - yy
        b = P[T[:, 1]] - yy
        c = P[T[:, 2]] - yy
        la, lb, lc = (np.linalg.norm(v, axis=1) for v in (a, b, c))
        if min(la.min(), lb.min(), lc.min()) <= tol:
            raise ValueError("point lies on the image of the boundary")
        num = np.einsum("ij,ij->i", a, np.cross(b, c))
        den = la * lb * lc + np.einsum("ij,ij->i", a, b) * lc + np.einsum("ij,ij->i", a, c) * lb \
            + np.einsum("ij,ij->i", b, c) * la
        out[k] = 2 * np.arctan2(num, den).sum() / (4 * np.pi)
    deg = np.rint(out).astype(int)
    if np.max(np.abs(out - deg)) > 0.1:
        raise ValueError("solid-angle sum is not close to an integer")
    return int(deg[0]) if np.ndim(y) == 1 else deg


@dataclass
class RegionSample:
    """Raster of a planar region on an axis-aligned lattice of cell centres.

    ``occupancy[i, j]`` refers to the cell centred at
    ``(x0 + (i + 1/2) h, y0 + (j + 1/2) h)``.
    """

    origin: tuple
    h: float
    occupancy: np.ndarray
    degree: Optional[np.ndarray] = None
    coverage: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.occupancy.shape

    @property
    def area(self):
        """Occupied area; uses the fractional coverage when it was sampled."""
        occ = self.occupancy if self.coverage is None else self.coverage
        return float(occ.sum() * self.h**2)

    def centers(self):
        nx, ny = self.occupancy.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.h
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.h
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([X, Y], axis=-1)

    def _aligned(self, other):
        if not np.isclose(self.h, other.h):
            raise ValueError("rasters have different resolution")
        lo = np.minimum(self.origin, other.origin)
        hi = np.maximum(np.asarray(self.origin) + np.array(self.shape) * self.h,
                        np.asarray(other.origin) + np.array(other.shape) * other.h)
        n = np.rint((hi - lo) / self.h).astype(int)

        def embed(r):
            out = np.zeros(n, dtype=bool)
            off = np.rint((np.asarray(r.origin) - lo) / self.h).astype(int)
            out[off[0]:off[0] + r.shape[0], off[1]:off[1] + r.shape[1]] = r.occupancy
            return out

        return embed(self), embed(other)

    def symmetric_difference(self, other):
        """Number of raster cells occupied in exactly one of the two samples."""
        a, b = self._aligned(other)
        return int(np.sum(a ^ b))

    def boundary_cells(self):
        """Number of occupied cells with an unoccupied 4-neighbour."""
        occ = np.pad(self.occupancy, 1)
        inner = occ[1:-1, 1:-1]
        nb = occ[:-2, 1:-1] & occ[2:, 1:-1] & occ[1:-1, :-2] & occ[1:-1, 2:]
        return int(np.sum(inner & ~nb))

    def to_csv(self, path):
        cen = self.centers().reshape(-1, 2)
        occ = self.occupancy.ravel().astype(int)
        deg = self.degree.ravel() if self.degree is not None else occ * 0
        with open(path, "w", newline="\n") as f:
            f.write("x,y,occupied,degree\n")
            for (x, y), o, d in zip(cen, occ, deg):
                f.write(f"{x:.10g},{y:.10g},{o},{int(d)}\n")


def _raster_frame(points, h, bbox=None):
    if bbox is None:
        lo = points.min(axis=0)
        hi = points.max(axis=0)
    else:
        lo = np.asarray(bbox[0], dtype=float)
        hi = np.asarray(bbox[1], dtype=float)
    lo = np.floor(lo / h) * h - h
    hi = np.ceil(hi / h) * h + h
    n = np.rint((hi - lo) / h).astype(int)
    return tuple(lo), n


def topological_image(u, U=None, h=0.05, bbox=None, subsamples=1):
    """Raster of the points of nonzero degree.

    The raster lattice is anchored at integer multiples of h, so rasters of
    different maps at the same resolution align cell by cell.

    Parameters
    ----------
    subsamples : int
        With s > 1, cells whose 3x3 neighbourhood contains both occupied and
        empty centres are resampled on an s x s sub-lattice and the
        occupied fraction is stored in ``coverage``. Occupancy itself stays
        the centre test.
    """
    curves = _boundary_curves(u, U)
    allpts = np.concatenate(curves)
    origin, n = _raster_frame(allpts, h, bbox)
    sample = RegionSample(origin, h, np.zeros(n, dtype=bool))
    cen = sample.centers().reshape(-1, 2)
    deg = np.rint(_winding_total(curves, cen)).astype(int).reshape(n)
    sample.degree = deg
    sample.occupancy = deg != 0
    if subsamples > 1:
        sample.coverage = _coverage(curves, sample, int(subsamples))
    return sample


def _winding_total(curves, y):
    total = np.zeros(len(y))
    for curve in curves:
        total += winding_number(curve, y)
    return total


def _coverage(curves, sample, s):
    occ = sample.occupancy
    pad = np.pad(occ, 1, mode="edge")
    nx, ny = occ.shape
    shifts = [pad[1 + a:1 + a + nx, 1 + b:1 + b + ny] for a in (-1, 0, 1) for b in (-1, 0, 1)]
    mixed = np.any(shifts, axis=0) & ~np.all(shifts, axis=0)
    cov = occ.astype(float)
    idx = np.argwhere(mixed)
    if len(idx) == 0:
        return cov
    off = (np.arange(s) + 0.5) / s
    sub = np.stack(np.meshgrid(off, off, indexing="ij"), -1).reshape(-1, 2)
    corners = np.asarray(sample.origin) + idx * sample.h
    pts = (corners[:, None, :] + sub[None] * sample.h).reshape(-1, 2)
    inside = np.rint(_winding_total(curves, pts)).astype(int) != 0
    cov[mixed] = inside.reshape(len(idx), -1).mean(axis=1)
    return cov


def geometric_image(u, cell_mask=None, h=0.05, bbox=None):
    """Raster of the union of the pushed-forward cells u(cell)."""
    cells = u.mesh.cells if cell_mask is None else u.mesh.cells[np.asarray(cell_mask)]
    used = u.values[np.unique(cells)]
    origin, n = _raster_frame(used, h, bbox)
    sample = RegionSample(origin, h, np.zeros(n, dtype=bool))
    loc = CellLocator(u.values, cells)
    cen = sample.centers().reshape(-1, 2)
    cell, _ = loc.locate(cen)
    sample.occupancy = (cell >= 0).reshape(n)
    return sample


class LocalInverse:
    """Inverse of an injective piecewise-affine map on a set of cells."""

    def __init__(self, u, cell_mask):
        self.u = u
        self.cell_ids = np.nonzero(cell_mask)[0]
        self.locator = CellLocator(u.values, u.mesh.cells[self.cell_ids])

    def __call__(self, y):
        """Preimages of y; raises if some y lies outside the image."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        c, bary = self.locator.locate(y)
        if np.any(c < 0):
            raise ValueError(f"{int(np.sum(c < 0))} query points outside the image")
        cells = self.u.mesh.cells[self.cell_ids[c]]
        return np.einsum("pk,pkd->pd", bary, self.u.mesh.points[cells])

    def jacobian(self, y):
        """``(Du)^-1`` at the preimage of y."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        c, _ = self.locator.locate(y)
        if np.any(c < 0):
            raise ValueError("query points outside the image")
        return np.linalg.inv(self.u.Du[self.cell_ids[c]])


def _cell_mask_for(u, U):
    if U is None:
        return np.ones(u.mesh.n_cells, dtype=bool)
    if isinstance(U, (Ball, Box)):
        return U.contains(u.mesh.centroids)
    return np.asarray(U, dtype=bool)


def _check_injective(u, mask, samples_per_cell=3, seed=0):
    """Sample points inside pushed-forward cells and count covering cells."""
    if np.any(u.det[mask] <= 0):
        raise ValueError("det Du <= 0 on U; map is not a local homeomorphism")
    rng = np.random.default_rng(seed)
    ids = np.nonzero(mask)[0]
    b = rng.dirichlet(np.ones(3), size=(len(ids), samples_per_cell))
    y = np.einsum("cqk,ckd->cqd", b, u.values[u.mesh.cells[ids]]).reshape(-1, 2)
    counts = CellLocator(u.values, u.mesh.cells[ids]).containing_counts(y, margin=1e-9)
    bad = int(np.sum(counts > 1))
    if bad:
        raise ValueError(f"map is not injective: {bad} sample points covered more than once")


def local_inverse(u, U=None):
    """Inverse of u restricted to U (a Ball, Box, cell mask or None for all).

    Injectivity is verified by sampling points inside every image cell and
    counting how many image cells contain them.
    """
    mask = _cell_mask_for(u, U)
    _check_injective(u, mask)
    return LocalInverse(u, mask)


def _region_nodes(mesh, region, closed):
    if isinstance(region, (Ball, Box)):
        return region.contains(mesh.points, closed=closed)
    return np.asarray(region, dtype=bool)


def paste(u, v, outer, inner, check_ap=True):
    """Glue v inside ``inner`` to u outside, given u = v between the two regions.

    ``u`` and ``v`` live on the same mesh; ``outer`` and ``inner`` are
    balls, boxes or node masks with inner compactly inside outer.

    Raises
    ------
    ValueError
        If u and v differ at a node of ``outer`` outside ``inner``.
    """
    if u.mesh is not v.mesh:
        raise ValueError("u and v must share their mesh")
    in_outer = _region_nodes(u.mesh, outer, closed=True)
    in_inner = _region_nodes(u.mesh, inner, closed=False)
    ring = in_outer & ~in_inner
    if not np.array_equal(u.values[ring], v.values[ring]):
        raise ValueError("u and v differ in the transition region")
    vals = np.where(in_inner[:, None], v.values, u.values)
    w = GridDeformation(u.mesh, vals, gamma=u.gamma)
    if not w.admissible:
        raise ValueError("pasted field has det Du <= 0")
    if check_ap:
        rep = is_ap_member(w)
        if not rep.passed:
            raise ValueError(f"pasted field fails the surface-energy check ({rep.max_normalized:.3g})")
    return w


def _resolved(u, rho_vals, mask, loc):
    """True when the vertex images of each rho-cell lie in cells of u sharing one gradient."""
    tri = rho_vals[u.mesh.cells[mask]]
    c, _ = loc.locate(tri.reshape(-1, 2))
    if np.any(c < 0):
        return False
    G = u.Du[c].reshape(len(tri), 3, 2, 2)
    return bool(np.all(np.abs(G - G[:, :1]).max(axis=(1, 2, 3)) <= 1e-10))


def compose_inner(u, rho, region, max_refine=2):
    """Compose u with a self-map rho of ``region`` that fixes its boundary.

    Parameters
    ----------
    u : GridDeformation
    rho : (N, 2) array or callable
        Nodal values (or a map evaluated at the nodes) of a piecewise-affine
        self-map; ignored outside ``region``.
    region : Ball, Box or node mask

    Returns
    -------
    GridDeformation
        ``z = u o rho`` inside the region and u outside. When u is not
        affine on the image of some cell of rho, the mesh is refined
        uniformly (exactly for both fields) up to ``max_refine`` times.

    Raises
    ------
    ValueError
        On ``det D rho <= 0``, ``rho`` leaving the region or moving its
        boundary, or unresolved composition after refinement.
    """
    mesh = u.mesh
    inside = _region_nodes(mesh, region, closed=False)
    closed = _region_nodes(mesh, region, closed=True)
    pts = mesh.points
    R = rho(pts) if callable(rho) else np.asarray(rho, dtype=float)
    R = np.where(inside[:, None], R, pts)
    if np.any(np.abs(R[closed & ~inside] - pts[closed & ~inside]) > 0):
        raise ValueError("rho must fix the boundary of the region")
    if isinstance(region, (Ball, Box)) and not np.all(region.contains(R[inside], closed=True)):
        raise ValueError("rho must map the region into its closure")
    cmask = closed[mesh.cells].all(axis=1)
    rho_def = GridDeformation(mesh, R)
    if np.any(rho_def.det[cmask] <= 0):
        raise ValueError("det D rho <= 0 on some cell")
    uu, RR, mm, gamma = u, R, mesh, u.gamma
    for level in range(max_refine + 1):
        cm = _region_nodes(mm, region, closed=True)[mm.cells].all(axis=1)
        if _resolved(uu, RR, cm, mm.locator()):
            ins = _region_nodes(mm, region, closed=False)
            vals = uu.values.copy()
            vals[ins] = uu(RR[ins])
            z = GridDeformation(mm, vals, gamma=gamma)
            if np.any(z.det[cm] <= 0):
                raise ValueError("composition has det Dz <= 0")
            return z
        if level == max_refine:
            break
        mm, prolong = refine_uniform(mm)
        uu = GridDeformation(mm, prolong(uu.values))
        RR = prolong(RR)
        gamma = mm.boundary_nodes() & (prolong(gamma.astype(float)) == 1.0)
    raise ValueError("composition not resolved by the mesh after refinement")


def _fmt_rows(a, fmt):
    return "".join(" ".join(fmt % x for x in row) + "\n" for row in np.atleast_2d(a))


def write_deformation(u, stream):
    """Write a deformation in the plain-text mesh format.

    The format is line based: a ``dim d`` line, then ``vertices N`` followed
    by N coordinate rows, ``cells M`` followed by M index rows, ``values N``
    followed by N nodal rows and ``gamma N`` followed by one 0/1 per line.
    Lines starting with ``#`` are comments. Floats use 17 significant
    digits so a round trip is exact.
    """
    m = u.mesh
    stream.write("# nemrelax mesh v1\n")
    stream.write(f"dim {m.dim}\n")
    stream.write(f"vertices {m.n_points}\n")
    stream.write(_fmt_rows(m.points, "%.17g"))
    stream.write(f"cells {m.n_cells}\n")
    stream.write(_fmt_rows(m.cells, "%d"))
    stream.write(f"values {m.n_points}\n")
    stream.write(_fmt_rows(u.values, "%.17g"))
    stream.write(f"gamma {m.n_points}\n")
    stream.write("".join(f"{int(g)}\n" for g in u.gamma))


def _read_blocks(lines):
    """Split ``key count`` headed blocks; other keyed lines become scalars."""
    blocks, scalars, i = {}, {}, 0
    lines = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    while i < len(lines):
        head = lines[i].split()
        key = head[0]
        if key in ("vertices", "cells", "values", "gamma", "vectors"):
            cnt = int(head[1])
            rows = lines[i + 1:i + 1 + cnt]
            if len(rows) != cnt:
                raise ValueError(f"block {key!r} truncated")
            blocks[key] = [r.split() for r in rows]
            i += 1 + cnt
        else:
            scalars[key] = head[1:]
            i += 1
    return blocks, scalars


def read_deformation(stream):
    """Inverse of :func:`write_deformation`.

    Raises
    ------
    ValueError
        On a malformed or incomplete file.
    """
    from .mesh import Mesh

    blocks, _ = _read_blocks(stream.read().splitlines())
    for key in ("vertices", "cells", "values"):
        if key not in blocks:
            raise ValueError(f"mesh file lacks a {key!r} block")
    pts = np.array(blocks["vertices"], dtype=float)
    cells = np.array(blocks["cells"], dtype=np.int64)
    vals = np.array(blocks["values"], dtype=float)
    gamma = None
    if "gamma" in blocks:
        gamma = np.array([int(r[0]) for r in blocks["gamma"]], dtype=bool)
    return GridDeformation(Mesh(pts, cells), vals, gamma=gamma)
