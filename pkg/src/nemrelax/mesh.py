"""Simplicial meshes, point location and quadrature on simplices."""

import numpy as np

__all__ = [
    "Mesh",
    "CellLocator",
    "quadrature_rule",
    "rectangle_mesh",
    "disk_mesh",
    "annulus_mesh",
    "refine_uniform",
]


def _orient_positive(points, cells):
    X = points[cells[:, 1:]] - points[cells[:, :1]]
    vol = np.linalg.det(np.swapaxes(X, 1, 2))
    cells = cells.copy()
    flip = vol < 0
    cells[flip, 0], cells[flip, 1] = cells[flip, 1].copy(), cells[flip, 0].copy()
    return cells


class Mesh:
    """Conforming simplicial mesh with positively oriented cells.

    Parameters
    ----------
    points : (N, d) array
        Vertex coordinates, d in (2, 3).
    cells : (M, d + 1) int array
        Vertex indices of each simplex. Orientation is fixed on input.
    """

    def __init__(self, points, cells):
        self.points = np.ascontiguousarray(points, dtype=float)
        self.cells = _orient_positive(self.points, np.asarray(cells, dtype=np.int64))
        self.dim = self.points.shape[1]
        if self.cells.shape[1] != self.dim + 1:
            raise ValueError("cells must be simplices of the ambient dimension")
        X = self.points[self.cells[:, 1:]] - self.points[self.cells[:, :1]]
        # edge matrices have edge vectors as columns
        self.edge_matrices = np.swapaxes(X, 1, 2)
        fact = 2.0 if self.dim == 2 else 6.0
        self.volumes = np.linalg.det(self.edge_matrices) / fact
        if np.any(self.volumes <= 0):
            raise ValueError("degenerate cell in mesh")
        self.inv_edge_matrices = np.linalg.inv(self.edge_matrices)
        self._boundary_faces = None
        self._locator = None

    @property
    def n_points(self):
        return len(self.points)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def centroids(self):
        return self.points[self.cells].mean(axis=1)

    @property
    def area(self):
        return float(self.volumes.sum())

    def boundary_faces(self):
        """Boundary facets, oriented consistently with their cell."""
        if self._boundary_faces is None:
            d = self.dim
            if d == 2:
                local = [(0, 1), (1, 2), (2, 0)]
            else:
                local = [(1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1)]
            faces = np.concatenate([self.cells[:, list(f)] for f in local])
            key = np.sort(faces, axis=1)
            _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
            self._boundary_faces = faces[counts[inv.ravel()] == 1]
        return self._boundary_faces

    def boundary_nodes(self):
        mask = np.zeros(self.n_points, dtype=bool)
        mask[self.boundary_faces().ravel()] = True
        return mask

    def outer_boundary_nodes(self):
        """Nodes on the counter-clockwise boundary loops (2-D); all boundary nodes in 3-D."""
        if self.dim != 2:
            return self.boundary_nodes()
        mask = np.zeros(self.n_points, dtype=bool)
        for loop in self.boundary_loops():
            x, y = self.points[loop, 0], self.points[loop, 1]
            if np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y) > 0:
                mask[loop] = True
        return mask

    def boundary_loops(self):
        """Closed boundary polygons in 2-D as lists of vertex indices.

        Outer loops run counter-clockwise, hole boundaries clockwise, so the
        domain always lies to the left.
        """
        if self.dim != 2:
            raise ValueError("boundary loops are defined for 2-D meshes")
        nxt = {int(a): int(b) for a, b in self.boundary_faces()}
        loops = []
        seen = set()
        for start in sorted(nxt):
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            cur = nxt[start]
            while cur != start:
                loop.append(cur)
                seen.add(cur)
                cur = nxt[cur]
            loops.append(np.array(loop))
        return loops

    def gradients(self, values):
        """Per-cell gradient of a piecewise-affine field given by nodal values.

        ``values`` is ``(N,)`` for scalars or ``(N, m)`` for vector fields;
        the result is ``(M, d)`` or ``(M, m, d)``.
        """
        values = np.asarray(values, dtype=float)
        V = values[self.cells[:, 1:]] - values[self.cells[:, :1]]
        if values.ndim == 1:
            return np.einsum("ck,ckj->cj", V, self.inv_edge_matrices)
        return np.einsum("cki,ckj->cij", V, self.inv_edge_matrices)

    def gradient_adjoint(self, G):
        """Transpose of ``gradients`` for vector fields: per-cell ``(M, m, d)`` to nodal ``(N, m)``."""
        gk = np.einsum("cij,ckj->cki", G, self.inv_edge_matrices)
        out = np.zeros((self.n_points, G.shape[1]))
        for k in range(self.dim):
            np.add.at(out, self.cells[:, k + 1], gk[:, k])
            np.add.at(out, self.cells[:, 0], -gk[:, k])
        return out

    def locator(self):
        if self._locator is None:
            self._locator = CellLocator(self.points, self.cells)
        return self._locator

    def interpolate(self, values, x):
        """Evaluate the piecewise-affine interpolant at points x.

        Points outside the mesh give NaN.
        """
        values = np.asarray(values, dtype=float)
        cell, bary = self.locator().locate(x)
        out_shape = (len(cell),) + values.shape[1:]
        out = np.full(out_shape, np.nan)
        ok = cell >= 0
        vv = values[self.cells[cell[ok]]]
        out[ok] = np.einsum("ck,ck...->c...", bary[ok], vv)
        return out

    def cells_in(self, predicate):
        """Mask of cells whose vertices all satisfy ``predicate(points) -> bool``."""
        inside = predicate(self.points)
        return inside[self.cells].all(axis=1)


class CellLocator:
    """Bucket-grid point location for simplicial meshes.

    Each query point is tested against the cells whose bounding boxes
    overlap its bucket, using barycentric coordinates with a small
    tolerance so that points on shared faces are found.
    """

    def __init__(self, points, cells, buckets_per_axis=None, tol=1e-12):
        self.points = np.asarray(points, dtype=float)
        self.cells = np.asarray(cells)
        self.tol = tol
        d = self.points.shape[1]
        self.dim = d
        P = self.points[self.cells]
        lo = P.min(axis=1)
        hi = P.max(axis=1)
        self.lo = self.points.min(axis=0)
        span = self.points.max(axis=0) - self.lo
        span[span == 0] = 1.0
        if buckets_per_axis is None:
            buckets_per_axis = max(1, int(round(len(self.cells) ** (1.0 / d))))
        self.nb = buckets_per_axis
        self.bs = span / self.nb * (1 + 1e-12)
        X = P[:, 1:] - P[:, :1]
        self.origin = P[:, 0]
        self.inv = np.linalg.inv(np.swapaxes(X, 1, 2))
        blo = np.clip(((lo - self.lo) / self.bs).astype(int), 0, self.nb - 1)
        bhi = np.clip(((hi - self.lo) / self.bs).astype(int), 0, self.nb - 1)
        lists = {}
        for c in range(len(self.cells)):
            ranges = [range(blo[c, k], bhi[c, k] + 1) for k in range(d)]
            for idx in np.stack(np.meshgrid(*ranges, indexing="ij"), -1).reshape(-1, d):
                lists.setdefault(self._flat(idx), []).append(c)
        nbt = self.nb**d
        counts = np.zeros(nbt, dtype=np.int64)
        for k, v in lists.items():
            counts[k] = len(v)
        self.start = np.concatenate([[0], np.cumsum(counts)])
        self.members = np.empty(self.start[-1], dtype=np.int64)
        for k, v in lists.items():
            self.members[self.start[k]:self.start[k + 1]] = v

    def _flat(self, idx):
        out = 0
        for k in range(self.dim):
            out = out * self.nb + int(idx[k])
        return out

    def _buckets(self, x):
        b = np.floor((x - self.lo) / self.bs).astype(np.int64)
        outside = np.any((b < 0) | (b >= self.nb), axis=1)
        b = np.clip(b, 0, self.nb - 1)
        flat = np.zeros(len(x), dtype=np.int64)
        for k in range(self.dim):
            flat = flat * self.nb + b[:, k]
        return flat, outside

    def _bary(self, cells, x):
        lam = np.einsum("cij,cj->ci", self.inv[cells], x - self.origin[cells])
        return np.concatenate([1 - lam.sum(axis=1, keepdims=True), lam], axis=1)

    def locate(self, x):
        """Return (cell index, barycentric coordinates); -1 when outside."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = len(x)
        flat, outside = self._buckets(x)
        cell = np.full(m, -1, dtype=np.int64)
        bary = np.zeros((m, self.dim + 1))
        best = np.full(m, -np.inf)
        s = self.start[flat]
        cnt = self.start[flat + 1] - s
        cnt[outside] = 0
        for k in range(int(cnt.max()) if m else 0):
            act = np.nonzero(cnt > k)[0]
            c = self.members[s[act] + k]
            b = self._bary(c, x[act])
            score = b.min(axis=1)
            better = score > best[act]
            upd = act[better]
            best[upd] = score[better]
            cell[upd] = c[better]
            bary[upd] = b[better]
        miss = best < -self.tol * 1e3 - 1e-10
        cell[miss] = -1
        return cell, bary

    def containing_counts(self, x, margin=1e-9):
        """Number of cells whose interior (shrunk by ``margin``) contains each point."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        flat, outside = self._buckets(x)
        s = self.start[flat]
        cnt = self.start[flat + 1] - s
        cnt[outside] = 0
        out = np.zeros(len(x), dtype=np.int64)
        for k in range(int(cnt.max()) if len(x) else 0):
            act = np.nonzero(cnt > k)[0]
            c = self.members[s[act] + k]
            b = self._bary(c, x[act])
            out[act] += b.min(axis=1) > margin
        return out


def quadrature_rule(dim, order):
    """Barycentric points and weights (summing to one) on the reference simplex.

    Triangles support orders 1, 2 and 5; tetrahedra orders 1 and 2.
    """
    if dim == 2:
        if order <= 1:
            return np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])
        if order == 2:
            a, b = 2 / 3, 1 / 6
            return np.array([[a, b, b], [b, a, b], [b, b, a]]), np.full(3, 1 / 3)
        s15 = np.sqrt(15.0)
        a1 = (6 - s15) / 21
        a2 = (6 + s15) / 21
        w1 = (155 - s15) / 1200
        w2 = (155 + s15) / 1200
        pts = [[1 / 3, 1 / 3, 1 / 3]]
        wts = [9 / 40]
        for a, w in ((a1, w1), (a2, w2)):
            b = 1 - 2 * a
            pts += [[b, a, a], [a, b, a], [a, a, b]]
            wts += [w, w, w]
        return np.array(pts), np.array(wts)
    if order <= 1:
        return np.full((1, 4), 0.25), np.array([1.0])
    a = (5 + 3 * np.sqrt(5)) / 20
    b = (5 - np.sqrt(5)) / 20
    pts = np.full((4, 4), b)
    np.fill_diagonal(pts, a)
    return pts, np.full(4, 0.25)


def rectangle_mesh(x0, x1, y0, y1, nx, ny):
    """Structured triangulation of a rectangle with ``nx * ny`` squares.

    Each square is split along its rising diagonal.
    """
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    cells = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return Mesh(pts, cells)


def _polar_mesh(radii, n_theta, center_node):
    th = np.linspace(0, 2 * np.pi, n_theta, endpoint=False)
    rings = [np.column_stack([r * np.cos(th), r * np.sin(th)]) for r in radii]
    pts = np.concatenate(rings)
    if center_node:
        pts = np.vstack([[0.0, 0.0], pts])
    off = 1 if center_node else 0
    cells = []
    j = np.arange(n_theta)
    jn = (j + 1) % n_theta
    if center_node:
        cells.append(np.column_stack([np.zeros(n_theta, dtype=int), off + j, off + jn]))
    for k in range(len(radii) - 1):
        i0 = off + k * n_theta
        i1 = off + (k + 1) * n_theta
        cells.append(np.column_stack([i0 + j, i0 + jn, i1 + jn]))
        cells.append(np.column_stack([i0 + j, i1 + jn, i1 + j]))
    return Mesh(pts, np.concatenate(cells))


def disk_mesh(radius=1.0, n_rings=8, n_theta=None):
    """Polar triangulation of a disk centred at the origin."""
    if n_theta is None:
        n_theta = 6 * n_rings
    radii = radius * np.arange(1, n_rings + 1) / n_rings
    return _polar_mesh(radii, n_theta, center_node=True)


def annulus_mesh(r_in, r_out=1.0, n_rings=32, n_theta=64, graded=True):
    """Polar triangulation of an annulus, geometrically graded towards the hole."""
    if graded:
        radii = np.geomspace(r_in, r_out, n_rings + 1)
    else:
        radii = np.linspace(r_in, r_out, n_rings + 1)
    return _polar_mesh(radii, n_theta, center_node=False)


def refine_uniform(mesh):
    """Split every triangle into four by edge midpoints.

    Returns
    -------
    fine : Mesh
    prolong : callable
        Maps nodal values on ``mesh`` to the fine mesh exactly for
        piecewise-affine fields.
    """
    if mesh.dim != 2:
        raise ValueError("uniform refinement is implemented for triangles")
    cells = mesh.cells
    edges = np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    n0 = mesh.n_points
    mid = n0 + inv.reshape(3, -1).T
    pts = np.concatenate([mesh.points, mesh.points[uniq].mean(axis=1)])
    a, b, c = cells.T
    m01, m12, m20 = mid.T
    new = np.concatenate([
        np.column_stack([a, m01, m20]),
        np.column_stack([m01, b, m12]),
        np.column_stack([m20, m12, c]),
        np.column_stack([m01, m12, m20]),
    ])

    def prolong(values):
        values = np.asarray(values, dtype=float)
        return np.concatenate([values, values[uniq].mean(axis=1)])

    return Mesh(pts, new), prolong
