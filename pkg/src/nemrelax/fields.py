"""Coupled mechanical and nematic energies of discrete admissible pairs.

The mechanical part integrates ``W(Du, n(u(x)))`` over the reference
mesh. The nematic part integrates ``V(n, Dn)`` over a raster of the
topological image, or alternatively over the reference mesh by change of
variables when u is injective.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .energy_models import INF
from .geometry import GridDeformation, local_inverse, topological_image
from .mesh import quadrature_rule

__all__ = [
    "DirectorField",
    "AdmissiblePair",
    "FunctionalReport",
    "EnvelopeFamily",
    "mech_energy",
    "nematic_energy_deformed",
    "nematic_energy_pullback",
    "evaluate",
    "relaxed_energies",
    "lsc_inequality_probe",
    "write_pair",
    "read_pair",
]

UNIT_TOL = 1e-12


class DirectorField:
    """Unit vector field on a regular node lattice in the deformed configuration.

    Values between nodes are bilinear interpolants renormalized to the unit
    circle; the gradient is that of the renormalized interpolant.

    Parameters
    ----------
    origin : (2,) array
        Position of node ``(0, 0)``.
    h : float
        Node spacing.
    vectors : (nx, ny, 2) array
        Nodal directors; renormalized on construction.
    """

    def __init__(self, origin, h, vectors):
        v = np.array(vectors, dtype=float)
        if v.ndim != 3 or v.shape[-1] != 2:
            raise ValueError("vectors must have shape (nx, ny, 2)")
        nrm = np.linalg.norm(v, axis=-1, keepdims=True)
        if np.any(nrm < 1e-8):
            raise ValueError("nodal director of (near) zero length")
        self.vectors = v / nrm
        self.vectors.setflags(write=False)
        self.origin = np.asarray(origin, dtype=float)
        self.h = float(h)
        self.shape = v.shape[:2]

    @classmethod
    def from_function(cls, fn, bbox, h):
        """Sample ``fn(points) -> vectors`` on a lattice covering ``bbox = (x0, y0, x1, y1)``."""
        x0, y0, x1, y1 = bbox
        nx = int(math.ceil((x1 - x0) / h - 1e-9)) + 1
        ny = int(math.ceil((y1 - y0) / h - 1e-9)) + 1
        X, Y = np.meshgrid(x0 + h * np.arange(nx), y0 + h * np.arange(ny), indexing="ij")
        pts = np.stack([X, Y], axis=-1)
        return cls((x0, y0), h, fn(pts.reshape(-1, 2)).reshape(nx, ny, 2))

    @classmethod
    def constant(cls, m, bbox, h):
        m = np.asarray(m, dtype=float)
        return cls.from_function(lambda p: np.broadcast_to(m, p.shape), bbox, h)

    @property
    def bbox(self):
        x1 = self.origin + self.h * (np.array(self.shape) - 1)
        return (self.origin[0], self.origin[1], x1[0], x1[1])

    def max_unit_defect(self):
        return float(np.abs(np.linalg.norm(self.vectors, axis=-1) - 1).max())

    def covers(self, y, margin=0.0):
        y = np.atleast_2d(y)
        lo = self.origin - margin
        hi = self.origin + self.h * (np.array(self.shape) - 1) + margin
        return np.all((y >= lo - 1e-12) & (y <= hi + 1e-12), axis=-1)

    def _locate(self, y, skin):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        ok = self.covers(y, margin=skin)
        if not np.all(ok):
            bad = y[~ok]
            raise ValueError(f"{len(bad)} points outside the director carrier, e.g. {bad[:3].tolist()}")
        s = (y - self.origin) / self.h
        n = np.array(self.shape)
        s = np.clip(s, 0, n - 1)
        i = np.minimum(np.floor(s).astype(int), n - 2)
        return i, s - i

    def _bilinear(self, y, skin):
        i, f = self._locate(y, skin)
        V = self.vectors
        v00 = V[i[:, 0], i[:, 1]]
        v10 = V[i[:, 0] + 1, i[:, 1]]
        v01 = V[i[:, 0], i[:, 1] + 1]
        v11 = V[i[:, 0] + 1, i[:, 1] + 1]
        fx, fy = f[:, :1], f[:, 1:]
        v = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10 + (1 - fx) * fy * v01 + fx * fy * v11
        dx = ((1 - fy) * (v10 - v00) + fy * (v11 - v01)) / self.h
        dy = ((1 - fx) * (v01 - v00) + fx * (v11 - v10)) / self.h
        return v, np.stack([dx, dy], axis=-1)

    def __call__(self, y, skin=None):
        """Directors at points y (shape ``(k, 2)``).

        Points up to ``skin`` (default one spacing) outside the carrier take
        the value at the nearest carrier point.
        """
        v, _ = self._bilinear(y, self.h if skin is None else skin)
        nrm = np.linalg.norm(v, axis=-1, keepdims=True)
        if np.any(nrm < 1e-10):
            raise ValueError("interpolated director vanishes; lattice too coarse for the field")
        return v / nrm

    def gradient(self, y, skin=None):
        """``Dn`` of the renormalized interpolant, shape ``(k, 2, 2)``."""
        v, Dv = self._bilinear(y, self.h if skin is None else skin)
        nrm = np.linalg.norm(v, axis=-1)
        n = v / nrm[:, None]
        P = np.eye(2) - n[:, :, None] * n[:, None, :]
        return np.einsum("kij,kjl->kil", P, Dv) / nrm[:, None, None]


@dataclass
class AdmissiblePair:
    """Deformation and director with the boundary datum they must respect.

    Parameters
    ----------
    u : GridDeformation
    n : DirectorField
    u0 : (N, 2) array, optional
        Boundary datum; checked at the nodes ``u.gamma``. Defaults to the
        current values, i.e. the pair defines its own datum.
    """

    u: GridDeformation
    n: DirectorField
    u0: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.u0 is None:
            self.u0 = np.array(self.u.values)

    def violations(self):
        """List of admissibility failures (empty when admissible)."""
        out = []
        g = self.u.gamma
        if not np.array_equal(self.u.values[g], np.asarray(self.u0)[g]):
            out.append("boundary datum not matched on gamma nodes")
        if not self.u.admissible:
            out.append(f"det Du <= 0 on {int(np.sum(self.u.det <= 0))} cells")
        if self.n.max_unit_defect() > UNIT_TOL:
            out.append("nodal directors are not unit vectors")
        return out

    def check(self):
        bad = self.violations()
        if bad:
            raise ValueError("; ".join(bad))
        return self

    def with_u(self, u):
        return AdmissiblePair(u, self.n, self.u0)

    def with_n(self, n):
        return AdmissiblePair(self.u, n, self.u0)


@dataclass
class FunctionalReport:
    """Energies of one pair and diagnostics."""

    I_mec: float
    I_nem: float
    I: float
    I_mec_relaxed: float = math.nan
    I_nem_relaxed: float = math.nan
    I_relaxed: float = math.nan
    min_det: float = math.nan
    image_area: float = math.nan
    e_residual: float = math.nan
    quad_order: int = 1
    penalty_mu: Optional[float] = None
    notes: list = field(default_factory=list)

    def as_dict(self):
        return asdict(self)

    def to_json(self):
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return str(x)
            return x
        return json.dumps({k: clean(v) for k, v in self.as_dict().items()}, indent=2, sort_keys=True)


def _quad_points(u, order):
    """Quadrature points in the reference cells, their images and weights."""
    bary, w = quadrature_rule(u.dim, order)
    cells = u.mesh.cells
    x = np.einsum("qk,ckd->cqd", bary, u.mesh.points[cells])
    y = np.einsum("qk,ckd->cqd", bary, u.values[cells])
    wt = u.mesh.volumes[:, None] * w[None, :]
    return x, y, wt


def _incompressible_density(W, F, n, mu):
    """Density on SL(2) extended by the det-normalized value plus ``mu (det - 1)^2``."""
    d = np.linalg.det(F)
    Fn = F / np.sqrt(np.maximum(d, 1e-300))[..., None, None]
    return np.where(d > 0, W(Fn, n) + mu * (d - 1) ** 2, INF)


def _mech_integrand(pair, W, order, density=None, penalty_mu=1e3):
    u = pair.u
    if not u.admissible:
        return None, None
    x, y, wt = _quad_points(u, order)
    nq = wt.shape[1]
    F = np.repeat(u.Du[:, None], nq, axis=1).reshape(-1, 2, 2)
    dirs = None
    if getattr(W, "depends_on_director", True):
        dirs = pair.n(y.reshape(-1, 2))
    f = density if density is not None else W
    if getattr(W, "incompressible", False) and density is None:
        vals = _incompressible_density(W, F, dirs, penalty_mu)
    else:
        vals = np.asarray(f(F, dirs), dtype=float)
    return vals.reshape(wt.shape), wt


def mech_energy(pair, W, quad_order=1, penalty_mu=1e3):
    """Integral of ``W(Du(x), n(u(x)))`` over the reference domain.

    Returns ``inf`` when some cell has ``det Du <= 0``. Incompressible
    densities are evaluated on the det-normalized gradient with the penalty
    ``penalty_mu (det Du - 1)^2`` added.
    """
    vals, wt = _mech_integrand(pair, W, quad_order, penalty_mu=penalty_mu)
    if vals is None:
        return INF
    return float(np.sum(vals * wt))


def _image_raster(pair, h):
    img = topological_image(pair.u, h=h)
    y = img.centers().reshape(-1, 2)[img.occupancy.ravel()]
    return img, y


def nematic_energy_deformed(pair, V, raster_h=None):
    """Midpoint-rule integral of ``V(n, Dn)`` over the topological image raster.

    Only raster cells of nonzero degree contribute, which realizes the zero
    extension of n outside the image.
    """
    h = pair.n.h if raster_h is None else raster_h
    img, y = _image_raster(pair, h)
    if len(y) == 0:
        return 0.0
    n = pair.n(y)
    Dn = pair.n.gradient(y)
    return float(np.sum(V(n, Dn)) * h * h)


def nematic_energy_pullback(pair, V, quad_order=2):
    """Integral of ``V(n(u), Dn(u)) det Du`` over the reference domain.

    Refuses non-injective u, where the two nematic integrals differ.
    """
    local_inverse(pair.u)
    _, y, wt = _quad_points(pair.u, quad_order)
    yy = y.reshape(-1, 2)
    vals = np.asarray(V(pair.n(yy), pair.n.gradient(yy)), dtype=float).reshape(wt.shape)
    return float(np.sum(vals * wt * pair.u.det[:, None]))


class EnvelopeFamily:
    """Envelope tables at several directors, interpolated linearly in the director angle.

    Directors are identified with their negatives, so angles live in
    ``[0, pi)``. With a single table the director argument is ignored.

    Parameters
    ----------
    envelopes : sequence of EnvelopeApprox
        Each with its ``director`` set.
    modulus : callable, optional
        Modulus h(t) bounding ``|W(F, n) - W(F, m)| <= h(|n - m|) W(F, n)``,
        used for the reported interpolation error bound.
    """

    def __init__(self, envelopes, modulus=None):
        envs = list(envelopes)
        if not envs:
            raise ValueError("empty envelope family")
        ang = np.array([_angle(e.director.components) if e.director is not None else 0.0 for e in envs])
        order = np.argsort(ang)
        self.angles = ang[order]
        self.envelopes = [envs[i] for i in order]
        self.modulus = modulus
        self.last_error_bound = 0.0

    def value(self, F, n=None):
        F = np.asarray(F, dtype=float).reshape(-1, 2, 2)
        if len(self.envelopes) == 1 or n is None:
            return np.atleast_1d(self.envelopes[0].value(F))
        n = np.asarray(n, dtype=float).reshape(-1, 2)
        th = _angle(n)
        k = len(self.angles)
        ext = np.concatenate([self.angles, [self.angles[0] + np.pi]])
        th = np.where(th < self.angles[0], th + np.pi, th)
        j = np.clip(np.searchsorted(ext, th, side="right") - 1, 0, k - 1)
        t = (th - ext[j]) / (ext[j + 1] - ext[j])
        out = np.empty(len(F))
        bound = 0.0
        for a in range(k):
            sel = j == a
            if not sel.any():
                continue
            v0 = np.atleast_1d(self.envelopes[a].value(F[sel]))
            v1 = np.atleast_1d(self.envelopes[(a + 1) % k].value(F[sel]))
            out[sel] = (1 - t[sel]) * v0 + t[sel] * v1
            if self.modulus is not None:
                dist = 2 * np.sin(0.5 * np.minimum(t[sel], 1 - t[sel]) * (ext[a + 1] - ext[a]))
                bound = max(bound, float(np.max(self.modulus(dist) * (out[sel] + 1))))
        self.last_error_bound = bound
        return out


def _angle(v):
    v = np.asarray(v, dtype=float)
    return np.mod(np.arctan2(v[..., 1], v[..., 0]), np.pi)


def _as_family(env):
    if env is None or isinstance(env, EnvelopeFamily):
        return env
    if isinstance(env, (list, tuple)):
        return EnvelopeFamily(env)
    return EnvelopeFamily([env])


def evaluate(pair, W, V, quad_order=1, raster_h=None, penalty_mu=1e3):
    """Unrelaxed energies and diagnostics of a pair."""
    I_mec = mech_energy(pair, W, quad_order, penalty_mu)
    I_nem = nematic_energy_deformed(pair, V, raster_h)
    h = pair.n.h if raster_h is None else raster_h
    img = topological_image(pair.u, h=h)
    return FunctionalReport(I_mec, I_nem, I_mec + I_nem, min_det=pair.u.min_det, image_area=img.area,
                            quad_order=quad_order,
                            penalty_mu=penalty_mu if getattr(W, "incompressible", False) else None)


def relaxed_energies(pair, W, V, envW=None, envV=None, quad_order=1, raster_h=None, tol=1e-9,
                     penalty_mu=1e3, e_residual=False):
    """Energies with W and V replaced by their tabulated envelopes.

    Parameters
    ----------
    envW : EnvelopeApprox, list of them, EnvelopeFamily or None
        Mechanical envelope tables; None means W is its own envelope.
    envV : same, for the tangential envelope of V
        Each table is queried with the projection of its own director.

    The relaxed integrands are capped by the unrelaxed ones, which keeps
    the invariant ``I* <= I`` exact despite interpolation between nodes.

    Raises
    ------
    ValueError
        On queries outside an envelope grid.
    """
    rep = evaluate(pair, W, V, quad_order, raster_h, penalty_mu)
    fW, fV = _as_family(envW), _as_family(envV)
    u = pair.u
    if not u.admissible:
        Is_mec = INF
    elif fW is None:
        Is_mec = rep.I_mec
    else:
        x, y, wt = _quad_points(u, quad_order)
        nq = wt.shape[1]
        F = np.repeat(u.Du[:, None], nq, axis=1).reshape(-1, 2, 2)
        dirs = pair.n(y.reshape(-1, 2)) if getattr(W, "depends_on_director", True) else None
        env = fW.value(F, dirs)
        w = np.asarray(W(F, dirs), dtype=float)
        Is_mec = float(np.sum(np.minimum(env, w).reshape(wt.shape) * wt))
        if fW.last_error_bound:
            rep.notes.append(f"director interpolation bound {fW.last_error_bound:.3e}")
    h = pair.n.h if raster_h is None else raster_h
    if fV is None:
        Is_nem = rep.I_nem
    else:
        _, yy = _image_raster(pair, h)
        if len(yy) == 0:
            Is_nem = 0.0
        else:
            n = pair.n(yy)
            Dn = pair.n.gradient(yy)
            env = fV.value(Dn, n)
            Is_nem = float(np.sum(np.minimum(env, V(n, Dn))) * h * h)
    rep.I_mec_relaxed = Is_mec
    rep.I_nem_relaxed = Is_nem
    rep.I_relaxed = Is_mec + Is_nem
    if e_residual:
        from .geometry import is_ap_member
        rep.e_residual = is_ap_member(u).max_residual
    if not rep.I_relaxed <= rep.I + tol:
        raise AssertionError(f"relaxed energy {rep.I_relaxed} exceeds energy {rep.I}")
    return rep


def lsc_inequality_probe(pairs, limit, W, V, envW=None, envV=None, tol=1e-9, quad_order=1,
                         raster_h=None):
    """Compare the relaxed energy of the limit pair with energies along a sequence.

    Returns
    -------
    dict
        ``relaxed_limit``, per-pair ``energies`` and ``relaxed``, and
        ``holds`` for ``I*(limit) <= min_j I(pair_j) + tol``.
    """
    pairs = list(pairs)
    ref = limit.u.values[limit.u.gamma]
    for p in pairs:
        if not np.array_equal(p.u.values[p.u.gamma], ref):
            raise ValueError("sequence pairs do not share the boundary datum of the limit")
    lim = relaxed_energies(limit, W, V, envW, envV, quad_order, raster_h, tol)
    reps = [relaxed_energies(p, W, V, envW, envV, quad_order, raster_h, tol) for p in pairs]
    energies = [r.I for r in reps]
    return {
        "relaxed_limit": lim.I_relaxed,
        "energies": energies,
        "relaxed": [r.I_relaxed for r in reps],
        "min_energy": min(energies) if energies else math.nan,
        "holds": bool(not energies or lim.I_relaxed <= min(energies) + tol),
    }


def write_pair(pair, stream):
    """Write an admissible pair: the deformation block then a director block.

    The director block is a ``director x0 y0 h nx ny`` line followed by
    ``vectors nx*ny`` and one row per lattice node, first index slowest.
    """
    from .geometry import write_deformation

    write_deformation(pair.u, stream)
    n = pair.n
    nx, ny = n.shape
    stream.write("director %.17g %.17g %.17g %d %d\n" % (n.origin[0], n.origin[1], n.h, nx, ny))
    stream.write(f"vectors {nx * ny}\n")
    stream.write("".join("%.17g %.17g\n" % tuple(v) for v in n.vectors.reshape(-1, 2)))


def read_pair(stream):
    """Inverse of :func:`write_pair`."""
    import io

    from .geometry import _read_blocks, read_deformation

    text = stream.read()
    u = read_deformation(io.StringIO(text))
    blocks, scalars = _read_blocks(text.splitlines())
    if "director" not in scalars or "vectors" not in blocks:
        raise ValueError("pair file lacks a director block")
    x0, y0, h, nx, ny = scalars["director"]
    vec = np.array(blocks["vectors"], dtype=float).reshape(int(nx), int(ny), 2)
    return AdmissiblePair(u, DirectorField((float(x0), float(y0)), float(h), vec))
