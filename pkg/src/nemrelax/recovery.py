"""Recovery sequences realizing relaxed energies, and an alternating minimizer.

Laminates are built as sawtooth perturbations of an affine map whose kinks
follow mesh lines, confined to mesh-aligned boxes by a linear collar.
Boxes are selected greedily over the region not yet modified, the
deformation is replaced inside each by its composition with the laminate
map, and the director is recovered by rotating a constant director along
a sawtooth angle profile.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import qmc

from .convexify import LaminateTree, extract_laminate
from .energy_models import INF
from .fields import (
    AdmissiblePair,
    DirectorField,
    FunctionalReport,
    _as_family,
    evaluate,
    relaxed_energies,
)
from .geometry import Box, GridDeformation, compose_inner, topological_image
from .tensor_core import det

__all__ = [
    "LaminateProfile",
    "RecoveryConfig",
    "BallRecord",
    "SequenceReport",
    "MinimizeReport",
    "RelaxedDensity",
    "mesh_spacing",
    "build_laminate_map",
    "modify_in_ball",
    "vitali_pass",
    "recover_director",
    "build_recovery_sequence",
    "minimize_alternating",
]

log = logging.getLogger("nemrelax")


def mesh_spacing(mesh):
    """Spacing of a structured square-cell mesh (squares split along rising diagonals).

    Raises
    ------
    ValueError
        If cell edges are not axis-parallel or rising diagonals of one size.
    """
    P = mesh.points[mesh.cells]
    E = np.concatenate([P[:, 1] - P[:, 0], P[:, 2] - P[:, 1], P[:, 0] - P[:, 2]])
    h = float(np.min(np.abs(E[np.abs(E) > 1e-12])))
    ok = np.isclose(np.abs(E), h, atol=1e-9 * h) | (np.abs(E) < 1e-12)
    rising = np.sign(E[:, 0]) * np.sign(E[:, 1]) >= 0
    if not (np.all(ok) and np.all(rising)):
        raise ValueError("recovery needs a structured square mesh split along rising diagonals")
    return h


def _lattice_normal(b, h):
    """Snap b to a layer normal whose level lines are mesh lines; returns (normal, node spacing)."""
    b = np.asarray(b, dtype=float)
    b = b / np.linalg.norm(b)
    cands = [(np.array([1.0, 0.0]), h), (np.array([0.0, 1.0]), h),
             (np.array([1.0, -1.0]) / math.sqrt(2), h / math.sqrt(2))]
    for c, s in cands:
        if abs(abs(b @ c) - 1) < 1e-8:
            return c * np.sign(b @ c), s
    return None, None


def _box_cells(mesh, box):
    return box.contains(mesh.points, closed=True)[mesh.cells].all(axis=1)


@dataclass
class LaminateProfile:
    """Piecewise-affine first-order laminate on a box with affine boundary values.

    ``values`` holds ``phi(x - center)`` at every mesh node in the closed
    box (other rows are meaningless); ``phi(x) = F x`` on the box boundary.
    """

    tree: LaminateTree
    F: np.ndarray
    box: Box
    k: int
    values: np.ndarray
    node_mask: np.ndarray
    cell_mask: np.ndarray
    collar: float
    lam: float
    mean_energy: float
    tree_value: float
    min_det: float
    capped: bool = False

    @property
    def excess(self):
        return self.mean_energy - self.tree_value

    @property
    def C(self):
        """Recorded constant of the ``C / k`` excess bound."""
        return max(self.excess, 0.0) * max(self.k, 1)


def max_layers(box, h, lam, b=(0.0, 1.0)):
    """Largest layer count whose kinks sit on mesh lines inside the box."""
    bn, s = _lattice_normal(b, h)
    if bn is None:
        return 0
    cells = int(round(2 * box.half * np.abs(bn).sum() / s))
    need = max(2, int(math.ceil(1.0 / min(lam, 1 - lam) - 1e-9)) if 0 < lam < 1 else 1)
    return max([q for q in range(1, cells + 1) if cells % q == 0 and cells // q >= need] or [0])


def build_laminate_map(tree, F, mesh, box, k, W=None, m=None, relax_collar=True):
    """Sawtooth laminate of a depth-one tree on a mesh-aligned box.

    Interior cells carry the gradients ``F + (1 - lam) D`` and
    ``F - lam D`` with ``D = F_plus - F_minus``; a collar of width half a
    period (at least one cell) blends the oscillation to zero so that
    ``phi = F x`` on the boundary. With ``relax_collar`` the nodes strictly
    inside the collar band (plus one layer) are then moved to minimize the
    energy of the box, keeping the box boundary and the laminate core
    fixed. Deeper trees use their first split only.

    Parameters
    ----------
    tree : LaminateTree
    F : (2, 2) array
        Affine part; normally ``tree.F``.
    mesh : Mesh
        Structured mesh with the box on its node lattice.
    box : Box
    k : int
        Requested number of periods across the box; capped at the largest
        count the mesh resolves.
    W, m : density and director used for the energy bookkeeping.

    Raises
    ------
    ValueError
        If the layer normal is not a mesh-line normal or some cell gets
        ``det D phi <= 0``.
    """
    F = np.asarray(F, dtype=float)
    h = mesh_spacing(mesh)
    node_mask = box.contains(mesh.points, closed=True)
    cell_mask = node_mask[mesh.cells].all(axis=1)
    x = mesh.points - np.asarray(box.center)
    phi = x @ F.T
    lam_used, collar, capped, kk = 1.0, 0.0, False, 0
    if not tree.is_leaf:
        a = np.asarray(tree.a, dtype=float)
        D = tree.plus.F - tree.minus.F
        bn, s = _lattice_normal(tree.b, h)
        if bn is None:
            raise ValueError("layer normal does not follow mesh lines")
        alpha = float(a @ D @ bn)
        cells_b = int(round(2 * box.half * np.abs(bn).sum() / s))
        need = max(2, int(math.ceil(1.0 / min(tree.lam, 1 - tree.lam) - 1e-9)))
        valid = [q for q in range(1, cells_b + 1) if cells_b % q == 0 and cells_b // q >= need]
        if not valid:
            raise ValueError("box too small for a laminate at this volume fraction")
        capped = k > valid[-1]
        kk = max([q for q in valid if q <= k] or [valid[0]])
        xi = x @ bn
        xi0 = xi[node_mask].min()
        period_cells = int(round((xi[node_mask].max() - xi0) / s)) // kk
        j = min(max(int(round(tree.lam * period_cells)), 1), period_cells - 1)
        lam_used = j / period_cells
        sc = np.rint((xi - xi0) / s).astype(int) % period_cells
        H = np.where(sc <= j, (1 - lam_used) * sc, (1 - lam_used) * j - lam_used * (sc - j)) * s
        H = H - 0.5 * (1 - lam_used) * j * s
        collar = max(h, 0.5 * period_cells * s)
        dist = box.half - np.max(np.abs(x), axis=1)
        psi = np.clip(dist / collar, 0.0, 1.0)
        phi = phi + (alpha * psi * H)[:, None] * a[None, :]
        if relax_collar and W is not None:
            band = node_mask & (dist > 1e-9 * h) & (dist < collar + h * (1 - 1e-9))
            phi = _relax_nodes(mesh, phi, band, cell_mask, W, m)
    phi = np.where(node_mask[:, None], phi, 0.0)
    G = mesh.gradients(phi)[cell_mask]
    dets = det(G)
    if np.any(dets <= 0):
        raise ValueError("laminate map has det <= 0; increase k or the box size")
    vol = mesh.volumes[cell_mask]
    if W is not None:
        e = np.asarray(W(G, m), dtype=float)
        mean = float(np.dot(vol, e) / vol.sum())
    else:
        mean = math.nan
    return LaminateProfile(tree, F, box, kk, phi, node_mask, cell_mask, collar, lam_used, mean,
                           tree.tree_value(), float(dets.min()), capped)


def _relax_nodes(mesh, phi, free, cell_mask, W, m, maxiter=2000):
    """Minimize the energy of the masked cells over the free nodal values."""
    from scipy.optimize import minimize

    cells_touch = free[mesh.cells].any(axis=1) & cell_mask
    vol = np.where(cells_touch, mesh.volumes, 0.0)

    def energy(v):
        p = phi.copy()
        p[free] = v.reshape(-1, 2)
        G = mesh.gradients(p)
        e = np.asarray(W(G[cells_touch], m), dtype=float)
        val = float(np.dot(vol[cells_touch], e))
        if not np.isfinite(val):
            return 1e10, np.zeros_like(v)
        Gw = np.zeros_like(G)
        Gw[cells_touch] = np.asarray(W.gradient(G[cells_touch], m)) * vol[cells_touch, None, None]
        return val, mesh.gradient_adjoint(Gw)[free].ravel()

    x0 = phi[free].ravel()
    e0, _ = energy(x0)
    res = minimize(energy, x0, jac=True, method="L-BFGS-B", options={"maxiter": maxiter})
    if not res.fun < e0:
        return phi
    out = phi.copy()
    out[free] = res.x.reshape(-1, 2)
    if np.any(det(mesh.gradients(out)[cell_mask]) <= 0):
        return phi
    return out


@dataclass
class RecoveryConfig:
    """Parameters of the recovery construction.

    Attributes
    ----------
    eta : float or None
        Fixed slack in (0, 1); None uses ``1 / j`` at step j.
    steps : int
        Number of sequence members.
    max_passes : int or None
        Cap on Vitali passes per member (default j at step j).
    a0_samples : int
        Low-discrepancy translation candidates per box.
    k_base : int
        Layer schedule ``k_j = k_base * 2**j``, capped by the mesh.
    shrink : float
        Modified box half-width relative to the selected box. The value 1
        modifies whole boxes; 0.5 is the half-ball variant.
    min_box_cells : int
        Smallest box side in cells.
    oscillation_tol : float
        Boxes qualify when the gradient oscillation statistic is below it.
    director_k_base : int
        Period schedule base for the director sawtooth.
    seed : int
    """

    eta: Optional[float] = None
    steps: int = 5
    max_passes: Optional[int] = None
    a0_samples: int = 16
    k_base: int = 1
    shrink: float = 1.0
    min_box_cells: int = 4
    oscillation_tol: float = 1e-8
    director_k_base: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.eta is not None and not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if not 0 < self.shrink <= 1:
            raise ValueError("shrink must lie in (0, 1]")

    def eta_at(self, j):
        return self.eta if self.eta is not None else 1.0 / j

    def k_at(self, j):
        return self.k_base * 2**j


@dataclass
class BallRecord:
    """Ledger entry for one modified box."""

    center: tuple
    half: float
    a0: tuple
    inner_half: float
    energy_before: float
    energy_after: float
    bound: float
    k: int
    C: float
    accepted: bool
    capped: bool = False
    exact_composition: bool = True
    note: str = ""


def _director_at(n, y):
    if n is None:
        return None
    return n(y)


def _cell_energy(u, W, n):
    """Per-cell energies at the cell centroid images."""
    F = u.Du
    dirs = None
    if getattr(W, "depends_on_director", True) and n is not None:
        dirs = n(u.values[u.mesh.cells].mean(axis=1))
    return np.asarray(W(F, dirs), dtype=float)


def _env_cell_values(u, W, fam, n):
    F = u.Du
    dirs = None
    if getattr(W, "depends_on_director", True) and n is not None:
        dirs = n(u.values[u.mesh.cells].mean(axis=1))
    w = np.asarray(W(F, dirs), dtype=float)
    if fam is None:
        return w
    return np.minimum(fam.value(F, dirs), w)


def _nearest_envelope(fam, m):
    if len(fam.envelopes) == 1 or m is None:
        return fam.envelopes[0]
    th = np.mod(np.arctan2(m[1], m[0]), np.pi)
    d = np.abs(fam.angles - th)
    d = np.minimum(d, np.pi - d)
    return fam.envelopes[int(np.argmin(d))]


def _a0_candidates(center, room, h, origin, count, seed):
    c = np.asarray(center, dtype=float)
    out = [c]
    if room >= h and count > 1:
        pts = qmc.Halton(d=2, scramble=True, seed=seed).random(count - 1)
        pts = c + (2 * pts - 1) * room
        pts = origin + np.rint((pts - origin) / h) * h
        for p in pts:
            if np.max(np.abs(p - c)) <= room + 1e-12 and not any(np.allclose(p, q) for q in out):
                out.append(p)
    return out


def modify_in_ball(u, box, tree, k, W, n=None, env=None, eta=0.1, shrink=1.0, a0_samples=16, seed=0):
    """Replace u on a sub-box by its composition with a laminate map.

    For each translation a0 the map ``v(x) = F^-1 phi(x - a0) + a0`` on
    ``Box(a0, shrink * half)`` is composed with u; the candidate with the
    smallest mechanical energy on the sub-box wins. The ledger bound is
    the envelope integral of the sub-box plus ``eta`` times its area plus
    the laminate excess.

    Returns
    -------
    (GridDeformation, BallRecord)
        u itself when no candidate meets the bound.
    """
    mesh = u.mesh
    h = mesh_spacing(mesh)
    origin = mesh.points.min(axis=0)
    outer_cells = _box_cells(mesh, box)
    vol = mesh.volumes
    F = np.einsum("c,cij->ij", vol[outer_cells], u.Du[outer_cells]) / vol[outer_cells].sum()
    inner_half = max(h, round(shrink * box.half / h) * h)
    room = box.half - inner_half
    fam = _as_family(env)
    w_cells = _cell_energy(u, W, n)
    env_cells = _env_cell_values(u, W, fam, n)
    best = None
    record_note = ""
    cands = _a0_candidates(box.center, room, h, origin, a0_samples, seed)
    m_box = None
    if n is not None:
        m_box = n(np.atleast_2d(u(np.atleast_2d(box.center))))[0]
    for a0 in cands:
        inner = Box(tuple(a0), inner_half)
        cmask = _box_cells(mesh, inner)
        before = float(np.dot(vol[cmask], w_cells[cmask]))
        if tree.is_leaf:
            rec = BallRecord(tuple(box.center), box.half, tuple(a0), inner_half, before, before,
                             before, 0, 0.0, True)
            return u, rec
        try:
            prof = build_laminate_map(tree, F, mesh, inner, k, W, m_box)
        except ValueError as exc:
            record_note = str(exc)
            continue
        Finv = np.linalg.inv(F)
        v = prof.values @ Finv.T + np.asarray(a0)
        v = np.where(prof.node_mask[:, None], v, mesh.points)
        exact = True
        try:
            z = compose_inner(u, v, inner, max_refine=0)
        except ValueError as exc:
            if "not resolved" not in str(exc):
                record_note = str(exc)
                continue
            exact = False
            ins = inner.contains(mesh.points, closed=False)
            vals = np.array(u.values)
            vals[ins] = u(v[ins])
            z = GridDeformation(mesh, vals, gamma=u.gamma)
            if not z.admissible:
                record_note = "nodal composition lost det > 0"
                continue
        after_cells = _cell_energy(z, W, n)
        after = float(np.dot(vol[cmask], after_cells[cmask]))
        area = float(vol[cmask].sum())
        bound = float(np.dot(vol[cmask], env_cells[cmask])) + eta * area + prof.C / max(prof.k, 1) * area
        if best is None or after < best[1]:
            best = (z, after, before, bound, prof, a0, exact)
    if best is None:
        rec = BallRecord(tuple(box.center), box.half, tuple(box.center), inner_half, math.nan, math.nan,
                         math.nan, k, 0.0, False, note=record_note or "no admissible translation")
        return u, rec
    z, after, before, bound, prof, a0, exact = best
    ok = after <= bound + 1e-12
    rec = BallRecord(tuple(box.center), box.half, tuple(a0), inner_half, before, after, bound, prof.k,
                     prof.C, ok, prof.capped, exact)
    return (z if ok else u), rec


def _square_index(mesh, h):
    origin = mesh.points.min(axis=0)
    ext = mesh.points.max(axis=0) - origin
    nx, ny = (int(round(e / h)) for e in ext)
    ij = np.floor((mesh.centroids - origin) / h).astype(int)
    return origin, nx, ny, ij[:, 0], ij[:, 1]


def vitali_pass(u, W, envW, eta, config, uncovered=None, n=None, k=8, seed=0):
    """One pass of box selection and modification over the uncovered cells.

    Boxes are mesh-aligned squares, tried from the largest size down, that
    contain only uncovered cells on which the gradient and the director
    are nearly constant. Selected boxes are pairwise disjoint. Boxes may
    touch the domain boundary; the modification keeps boundary nodes fixed.

    Returns
    -------
    (GridDeformation, ndarray of bool, list of BallRecord)
        Updated field, updated uncovered cell mask, and the ledger.
    """
    mesh = u.mesh
    h = mesh_spacing(mesh)
    origin, nx, ny, ci, cj = _square_index(mesh, h)
    if uncovered is None:
        uncovered = np.ones(mesh.n_cells, dtype=bool)
    sq_free = np.ones((nx, ny), dtype=bool)
    np.logical_and.at(sq_free, (ci, cj), uncovered)
    fam = _as_family(envW)
    records = []
    taken = np.zeros((nx, ny), dtype=bool)
    z = u
    step = 4 if config.shrink < 1 else 2
    sizes = [s for s in range(min(nx, ny), config.min_box_cells - 1, -1) if s % step == 0]
    theta = getattr(getattr(W, "conditions", None), "theta", None)
    for s in sizes:
        stride = max(1, s // 4)
        for i0 in range(0, nx - s + 1, stride):
            for j0 in range(0, ny - s + 1, stride):
                blk = (slice(i0, i0 + s), slice(j0, j0 + s))
                if taken[blk].any() or not sq_free[blk].all():
                    continue
                center = origin + h * np.array([i0 + s / 2, j0 + s / 2])
                box = Box(tuple(center), s * h / 2)
                cm = _box_cells(mesh, box)
                G = z.Du[cm]
                Fm = G.mean(axis=0)
                osc = np.max(np.sum((G - Fm) ** 2, axis=(1, 2)))
                if theta is not None:
                    osc = max(osc, float(np.max(np.abs(theta(det(G)) - theta(det(Fm))))))
                if n is not None:
                    dirs = n(z.values[mesh.cells[cm]].mean(axis=1))
                    osc = max(osc, float(np.max(1 - np.abs(dirs @ dirs[0]))))
                if osc > config.oscillation_tol:
                    continue
                taken[blk] = True
                m = None if n is None else n(np.atleast_2d(z(np.atleast_2d(center))))[0]
                if fam is None:
                    tree = LaminateTree(Fm, float(np.asarray(W(Fm, m))))
                else:
                    env = _nearest_envelope(fam, m)
                    if not env.grid.contains(Fm[None])[0]:
                        records.append(BallRecord(tuple(center), box.half, tuple(center), 0.0, math.nan,
                                                  math.nan, math.nan, k, 0.0, False,
                                                  note="mean gradient outside envelope grid"))
                        continue
                    tree = extract_laminate(W, m, Fm, env, max_depth=1)
                z, rec = modify_in_ball(z, box, tree, k, W, n, envW, eta, config.shrink,
                                        config.a0_samples, seed + len(records))
                records.append(rec)
                if rec.accepted:
                    inner = Box(rec.a0, rec.inner_half)
                    uncovered = uncovered & ~_box_cells(mesh, inner)
    if not records:
        log.warning("vitali pass found no qualifying boxes")
    return z, uncovered, records


def recover_director(n, V, envV, k):
    """Oscillating director field whose energy approaches the tangential envelope.

    Applies to a constant director m: the tangential laminate at zero
    gradient gives slopes ``c_plus, c_minus`` of an angle profile psi along
    a lattice axis b, and ``n_k(y) = R(psi(y)) m``. Non-constant fields
    and leaf laminates are returned unchanged.

    Returns
    -------
    (DirectorField, dict)
    """
    info = {"k": 0, "changed": False, "note": ""}
    fam = _as_family(envV)
    V0 = n.vectors.reshape(-1, 2)
    if fam is None:
        info["note"] = "no tangential envelope"
        return n, info
    if np.abs(V0 - V0[0]).max() > 1e-12:
        info["note"] = "director not constant; kept"
        return n, info
    m = V0[0]
    env = _nearest_envelope(fam, m)

    class _Lift:
        depends_on_director = False

        def __call__(self, zeta, _m=None):
            return V.lifted(m, zeta)

    tree = extract_laminate(_Lift(), None, np.zeros((2, 2)), env, max_depth=1)
    if tree.is_leaf:
        info["note"] = "tangential envelope equals V at zero gradient"
        return n, info
    mp = np.array([-m[1], m[0]])
    b = np.asarray(tree.b, dtype=float)
    bn, _ = _lattice_normal(b, n.h)
    if bn is None or abs(bn[0] * bn[1]) > 0:
        info["note"] = "layer normal not a lattice axis; kept"
        return n, info
    cp = float(mp @ tree.plus.F @ bn)
    cm = float(mp @ tree.minus.F @ bn)
    axis = 0 if abs(bn[0]) > 0 else 1
    nodes = n.shape[axis] - 1
    need = int(math.ceil(1.0 / min(tree.lam, 1 - tree.lam) - 1e-9))
    cands = [q for q in range(1, nodes + 1) if nodes % q == 0 and nodes // q >= max(2, need) and q <= max(k, 1)]
    if not cands:
        info["note"] = "lattice too coarse"
        return n, info

    def frac_err(q):
        p = nodes // q
        return abs(min(max(round(tree.lam * p), 1), p - 1) / p - tree.lam)

    # prefer periods realizing the volume fraction, then the most layers
    kk = min(cands, key=lambda q: (round(frac_err(q), 12), -q))
    if kk == 0:
        info["note"] = "lattice too coarse"
        return n, info
    period = nodes // kk
    j = min(max(int(round(tree.lam * period)), 1), period - 1)
    lam = j / period
    # slopes chosen so the mean slope vanishes with the realized fraction
    sp = cp
    sm = -lam * sp / (1 - lam)
    idx = np.arange(n.shape[axis]) % period
    psi = np.where(idx <= j, sp * idx, sp * j + sm * (idx - j)) * n.h
    psi = psi - psi[:period].mean() if period > 1 else psi
    ang = psi[:, None] if axis == 0 else psi[None, :]
    ang = np.broadcast_to(ang, n.shape) * np.sign(bn[axis])
    c, s = np.cos(ang), np.sin(ang)
    vec = np.stack([c * m[0] - s * m[1], s * m[0] + c * m[1]], axis=-1)
    info.update(k=kk, changed=True, lam=lam, slopes=(sp, sm), slope_minus_tree=cm)
    return DirectorField(n.origin, n.h, vec), info


@dataclass
class SequenceReport:
    """Per-step energies and bookkeeping of a recovery sequence."""

    rows: list = field(default_factory=list)
    I_limit: float = math.nan
    I_relaxed_limit: float = math.nan
    area: float = math.nan
    balls: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    COLUMNS = ("j", "eta", "k", "passes", "I", "I_mec", "I_nem", "gap", "bound", "C", "l1_distance",
               "image_symdiff", "uncovered", "uncovered_bound", "min_det", "capped")

    @property
    def gaps(self):
        return [r["gap"] for r in self.rows]

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in self.COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _l1_distance(u, v):
    diff = np.linalg.norm(u.values - v.values, axis=1)
    return float(np.dot(u.mesh.volumes, diff[u.mesh.cells].mean(axis=1)))


def build_recovery_sequence(pair, W, V, envW=None, envV=None, config=None, raster_h=None,
                            dump=None):
    """Recovery sequence ``(u_j, n_j)``, j = 1..steps, for a pair.

    Member j applies up to j Vitali passes with slack ``eta_j`` and layer
    count ``k_j`` to u, and oscillates the director with ``k_j`` periods.
    Boundary values and the topological image are checked at every step.

    Parameters
    ----------
    dump : callable, optional
        Called as ``dump(j, pair_j)`` after each member is built.

    Returns
    -------
    (list of AdmissiblePair, SequenceReport)
    """
    cfg = config or RecoveryConfig()
    u, n = pair.u, pair.n
    h = raster_h or n.h
    limit = relaxed_energies(pair, W, V, envW, envV, raster_h=h)
    rep = SequenceReport(I_limit=limit.I, I_relaxed_limit=limit.I_relaxed, area=u.mesh.area)
    img0 = topological_image(u, h=h)
    pairs = []
    for j in range(1, cfg.steps + 1):
        eta = cfg.eta_at(j)
        k = cfg.k_at(j)
        uj = u
        unc = np.ones(u.mesh.n_cells, dtype=bool)
        passes = cfg.max_passes if cfg.max_passes is not None else j
        balls = []
        uncovered_hist = []
        for p in range(passes):
            if not unc.any():
                break
            uj, unc, recs = vitali_pass(uj, W, envW, eta, cfg, unc, n, k, seed=cfg.seed + 1000 * j + 100 * p)
            balls.extend(recs)
            uncovered_hist.append(float(u.mesh.volumes[unc].sum()))
            if not any(r.accepted for r in recs):
                break
        if not np.array_equal(uj.values[u.gamma], u.values[u.gamma]):
            raise AssertionError("recovery moved boundary nodes")
        nj, dinfo = recover_director(n, V, envV, cfg.director_k_base * 2**j)
        pj = AdmissiblePair(uj, nj, pair.u0)
        ev = evaluate(pj, W, V, raster_h=h)
        img = topological_image(uj, h=h)
        symd = img0.symmetric_difference(img)
        Cs = [b.C for b in balls if b.accepted]
        C = max(Cs) if Cs else 0.0
        kk = max([b.k for b in balls if b.accepted] + [dinfo.get("k", 0)] + [1])
        unc_area = float(u.mesh.volumes[unc].sum())
        row = {
            "j": j, "eta": eta, "k": kk, "passes": len(uncovered_hist), "I": ev.I, "I_mec": ev.I_mec,
            "I_nem": ev.I_nem, "gap": ev.I - limit.I_relaxed, "bound": eta * u.mesh.area + C / kk,
            "C": C, "l1_distance": _l1_distance(uj, u), "image_symdiff": symd,
            "uncovered": unc_area,
            "uncovered_bound": (1 - 2.0 ** (-u.dim - 1)) ** len(uncovered_hist) * u.mesh.area,
            "min_det": uj.min_det,
            "capped": any(b.capped for b in balls) or (dinfo.get("changed") and dinfo["k"] < cfg.director_k_base * 2**j),
        }
        rep.rows.append(row)
        rep.balls.append(balls)
        if dinfo.get("note"):
            rep.notes.append(f"step {j}: {dinfo['note']}")
        pairs.append(pj)
        if dump is not None:
            dump(j, pj)
        log.info("recovery step %d: I=%.6g gap=%.3e k=%d", j, ev.I, row["gap"], kk)
    return pairs, rep


class RelaxedDensity:
    """Density given by ``min(envelope, W)`` with a finite-difference gradient."""

    def __init__(self, W, env, fd_step=1e-7):
        self.W = W
        self.fam = _as_family(env)
        self.depends_on_director = getattr(W, "depends_on_director", True)
        self.incompressible = False
        self.conditions = getattr(W, "conditions", None)
        self.fd_step = fd_step

    def __call__(self, F, n=None):
        F = np.asarray(F, dtype=float)
        flat = F.reshape(-1, 2, 2)
        nn = None if n is None else np.asarray(n).reshape(-1, 2)
        w = np.asarray(self.W(flat, nn), dtype=float).reshape(-1)
        ok = np.isfinite(w)
        out = np.array(w)
        if ok.any():
            out[ok] = np.minimum(self.fam.value(flat[ok], None if nn is None else nn[ok]), w[ok])
        return out.reshape(F.shape[:-2]) if F.ndim > 2 else float(out[0])

    def gradient(self, F, n=None):
        F = np.asarray(F, dtype=float).reshape(-1, 2, 2)
        g = np.zeros_like(F)
        for i in range(2):
            for jx in range(2):
                E = np.zeros((2, 2))
                E[i, jx] = self.fd_step
                g[:, i, jx] = (self(F + E, n) - self(F - E, n)) / (2 * self.fd_step)
        return g


@dataclass
class MinimizeReport:
    """Objective ledger of the alternating minimizer."""

    objective: list = field(default_factory=list)
    stagnated: bool = False
    final: Optional[FunctionalReport] = None
    u_steps: int = 0
    n_steps: int = 0


def _mech_value_grad(u, vals, W, dirs, free):
    uu = u.with_values(vals)
    if not uu.admissible:
        return INF, None, uu
    e = np.asarray(W(uu.Du, dirs), dtype=float)
    val = float(np.dot(u.mesh.volumes, e))
    if not np.isfinite(val):
        return INF, None, uu
    G = np.asarray(W.gradient(uu.Du, dirs)) * u.mesh.volumes[:, None, None]
    g = u.mesh.gradient_adjoint(G)
    g[~free] = 0.0
    return val, g, uu


def _nem_value_grad(n, V, y, w):
    """Raster energy of the director field and its gradient in the nodal vectors."""
    i, f = n._locate(y, n.h)
    Vn = n.vectors
    fx, fy = f[:, 0], f[:, 1]
    idx = [(i[:, 0], i[:, 1]), (i[:, 0] + 1, i[:, 1]), (i[:, 0], i[:, 1] + 1), (i[:, 0] + 1, i[:, 1] + 1)]
    wts = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    gx = [-(1 - fy), (1 - fy), -fy, fy]
    gy = [-(1 - fx), -fx, (1 - fx), fx]
    v = sum(wk[:, None] * Vn[ix] for wk, ix in zip(wts, idx))
    Dv = np.stack([sum(g[:, None] * Vn[ix] for g, ix in zip(gx, idx)),
                   sum(g[:, None] * Vn[ix] for g, ix in zip(gy, idx))], axis=-1) / n.h
    r = np.linalg.norm(v, axis=1)
    nn = v / r[:, None]
    P = np.eye(2) - nn[:, :, None] * nn[:, None, :]
    Dn = np.einsum("kij,kjl->kil", P, Dv) / r[:, None, None]
    val = np.asarray(V(nn, Dn), dtype=float)
    G = np.asarray(V.gradient(nn, Dn), dtype=float)
    dz = 1e-7
    gz = np.stack([(V(_unit(nn + dz * e), Dn) - V(_unit(nn - dz * e), Dn)) / (2 * dz)
                   for e in np.eye(2)], axis=-1)
    gz = np.einsum("kij,kj->ki", P, gz)
    GDt = np.einsum("kij,klj->kil", G, Dv)
    DGt = np.einsum("kij,klj->kil", Dv, G)
    c_n = gz - (np.einsum("kij,kj->ki", GDt, nn) + np.einsum("kij,kj->ki", DGt, nn)) / r[:, None]
    q = np.einsum("kij,kj->ki", P, c_n) / r[:, None] \
        - (np.einsum("kij,kij->k", G, Dv) / r**2)[:, None] * nn
    PG = np.einsum("kij,kjl->kil", P, G) / r[:, None, None]
    grad = np.zeros_like(Vn)
    for wk, g1, g2, ix in zip(wts, gx, gy, idx):
        contrib = wk[:, None] * q + (PG[:, :, 0] * g1[:, None] + PG[:, :, 1] * g2[:, None]) / n.h
        np.add.at(grad, ix, w * contrib)
    return float(w * val.sum()), grad


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def minimize_alternating(pair0, W, V, selector="I", iterations=20, envW=None, envV=None,
                         det_floor=1e-6, inner_steps=25, raster_h=None, tol=1e-13):
    """Alternate quasi-Newton steps on u and projected gradient steps on n.

    The u step uses limited-memory BFGS directions with a backtracking
    line search that rejects any trial with ``min det Du <= det_floor``;
    the director step moves nodal vectors along the tangential gradient
    and renormalizes. Every accepted step decreases the objective.

    Parameters
    ----------
    selector : {"I", "I*"}
        Minimize the energy or its relaxation (envelopes required).

    Returns
    -------
    (AdmissiblePair, MinimizeReport)
    """
    if selector not in ("I", "I*"):
        raise ValueError("selector must be 'I' or 'I*'")
    Wd = RelaxedDensity(W, envW) if selector == "I*" and envW is not None else W
    Vd = V
    if selector == "I*" and envV is not None:
        Vd = _RelaxedNematic(V, envV)
    u, n = pair0.u, pair0.n
    h = raster_h or n.h
    free = ~u.gamma
    img = topological_image(u, h=h)
    y = img.centers().reshape(-1, 2)[img.occupancy.ravel()]
    w = h * h
    depends = getattr(W, "depends_on_director", True)

    def dirs_for(uu, nn):
        if not depends:
            return None
        return nn(uu.values[uu.mesh.cells].mean(axis=1))

    def objective(uu, nn):
        em = float(np.dot(uu.mesh.volumes, np.asarray(Wd(uu.Du, dirs_for(uu, nn)), dtype=float)))
        en, _ = _nem_value_grad(nn, Vd, y, w) if len(y) else (0.0, None)
        return em + en

    rep = MinimizeReport()
    cur = objective(u, n)
    rep.objective.append(cur)
    for it in range(iterations):
        start = cur
        # deformation: L-BFGS with backtracking and determinant floor
        dirs = dirs_for(u, n)
        x = np.array(u.values)
        fx, g, _ = _mech_value_grad(u, x, Wd, dirs, free)
        S, Y = [], []
        for _ in range(inner_steps):
            if g is None or not np.any(g):
                break
            q = g.ravel().copy()
            al = []
            for s_, y_ in reversed(list(zip(S, Y))):
                a_ = (s_ @ q) / (y_ @ s_)
                al.append(a_)
                q -= a_ * y_
            if S:
                q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
            for (s_, y_), a_ in zip(zip(S, Y), reversed(al)):
                b_ = (y_ @ q) / (y_ @ s_)
                q += (a_ - b_) * s_
            d = -q.reshape(x.shape)
            d[~free] = 0.0
            slope = float(np.sum(d * g))
            if slope >= 0:
                d = -g
                slope = -float(np.sum(g * g))
                S, Y = [], []
            t = 1.0
            accepted = False
            for _ in range(40):
                xn = x + t * d
                trial = u.with_values(xn)
                if trial.admissible and trial.min_det > det_floor:
                    fn, gn, _ = _mech_value_grad(u, xn, Wd, dirs, free)
                    if fn <= fx + 1e-4 * t * slope:
                        accepted = True
                        break
                t *= 0.5
            if not accepted:
                break
            s_ = (xn - x).ravel()
            y_ = (gn - g).ravel()
            if s_ @ y_ > 1e-16:
                S.append(s_)
                Y.append(y_)
                if len(S) > 10:
                    S.pop(0)
                    Y.pop(0)
            if fx - fn < tol:
                x, fx, g = xn, fn, gn
                break
            x, fx, g = xn, fn, gn
            rep.u_steps += 1
        u_new = u.with_values(x)
        obj = objective(u_new, n)
        if obj <= cur:
            u, cur = u_new, obj
        # director: projected gradient with backtracking
        if len(y):
            for _ in range(inner_steps):
                en, gd = _nem_value_grad(n, Vd, y, w)
                Vn = n.vectors
                gt = gd - np.sum(gd * Vn, axis=-1, keepdims=True) * Vn
                gn2 = float(np.sum(gt * gt))
                if gn2 < 1e-30:
                    break
                t = 1.0 / max(1.0, math.sqrt(gn2))
                moved = False
                for _ in range(40):
                    cand = DirectorField(n.origin, n.h, Vn - t * gt)
                    val = objective(u, cand)
                    if val <= cur - 1e-4 * t * gn2:
                        n, cur, moved = cand, val, True
                        rep.n_steps += 1
                        break
                    t *= 0.5
                if not moved:
                    break
        rep.objective.append(cur)
        if start - cur < tol:
            # no progress although the deformation gradient is not small
            gn = 0.0 if g is None else float(np.linalg.norm(g))
            rep.stagnated = gn > 1e-6 * max(1.0, abs(cur))
            break
    pair = AdmissiblePair(u, n, pair0.u0)
    rep.final = evaluate(pair, W, V, raster_h=h)
    return pair, rep


class _RelaxedNematic:
    """``min(tangential envelope, V)`` with finite-difference gradients."""

    def __init__(self, V, env, fd_step=1e-7):
        self.V = V
        self.fam = _as_family(env)
        self.fd_step = fd_step

    def __call__(self, z, zeta):
        zeta = np.asarray(zeta, dtype=float).reshape(-1, 2, 2)
        z = np.asarray(z, dtype=float).reshape(-1, 2)
        return np.minimum(self.fam.value(zeta, z), self.V(z, zeta))

    def gradient(self, z, zeta):
        zeta = np.asarray(zeta, dtype=float).reshape(-1, 2, 2)
        g = np.zeros_like(zeta)
        for i in range(2):
            for j in range(2):
                E = np.zeros((2, 2))
                E[i, j] = self.fd_step
                g[:, i, j] = (self(z, zeta + E) - self(z, zeta - E)) / (2 * self.fd_step)
        return g
