"""Numerical envelopes of 2x2 matrix densities.

Upper bounds come from iterated lamination on a regular grid of matrices,
lower bounds from the convex hull of the lifted graph in minors
coordinates, and an independent value from a discretized cell problem.
"""

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog, minimize

from .energy_models import INF
from .mesh import disk_mesh
from .tensor_core import Director, det, minors, projection

__all__ = [
    "MatrixGrid",
    "EnvelopeApprox",
    "LaminateTree",
    "CellResult",
    "direction_set",
    "laminate_envelope",
    "rank_one_convexify",
    "tangential_quasiconvexify",
    "polyconvexify_lower",
    "cell_problem_qc",
    "extract_laminate",
    "best_split",
    "tree_seeds",
    "direction_steps",
    "lattice_directions",
]

ZERO_WEIGHT = 1e-14


@dataclass(frozen=True)
class MatrixGrid:
    """Regular grid over the entries ``(F11, F12, F21, F22)`` of 2x2 matrices.

    Parameters
    ----------
    lo, hi : sequence of 4 floats
        Per-axis ranges, in row-major entry order.
    n : int or sequence of 4 ints
        Nodes per axis.
    mask_det : bool
        Exclude nodes with ``det F <= 0``.
    """

    lo: tuple
    hi: tuple
    n: tuple
    mask_det: bool = True

    def __post_init__(self):
        n = (self.n,) * 4 if np.isscalar(self.n) else tuple(int(k) for k in self.n)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "lo", tuple(float(x) for x in self.lo))
        object.__setattr__(self, "hi", tuple(float(x) for x in self.hi))
        if len(self.lo) != 4 or len(self.hi) != 4 or len(n) != 4:
            raise ValueError("a 2x2 matrix grid has four axes")
        if any(k < 2 for k in n) or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("each axis needs at least two nodes and a positive range")

    @classmethod
    def around(cls, center, half_width, n, mask_det=True):
        """Grid ``center +- half_width`` on every entry."""
        c = np.asarray(center, dtype=float).ravel()
        hw = np.broadcast_to(np.asarray(half_width, dtype=float), (4,))
        return cls(tuple(c - hw), tuple(c + hw), n, mask_det)

    @classmethod
    def covering(cls, matrices, margin, n, mask_det=True):
        """Smallest grid containing the matrices with a margin on every axis."""
        M = np.asarray(matrices, dtype=float).reshape(-1, 4)
        return cls(tuple(M.min(0) - margin), tuple(M.max(0) + margin), n, mask_det)

    @property
    def shape(self):
        return self.n

    @property
    def steps(self):
        return np.array([(h - l) / (k - 1) for l, h, k in zip(self.lo, self.hi, self.n)])

    def axes(self):
        return [np.linspace(l, h, k) for l, h, k in zip(self.lo, self.hi, self.n)]

    def nodes(self):
        """All nodes as an array of shape ``n + (2, 2)``."""
        A = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(A, axis=-1).reshape(self.n + (2, 2))

    def mask(self):
        """Boolean array of usable nodes."""
        if not self.mask_det:
            return np.ones(self.n, dtype=bool)
        return det(self.nodes()) > 0

    def index_of(self, F):
        """Fractional grid coordinates of matrices F (shape ``(..., 2, 2)``)."""
        F = np.asarray(F, dtype=float).reshape(np.shape(F)[:-2] + (4,))
        return (F - np.array(self.lo)) / self.steps

    def contains(self, F, tol=1e-9):
        idx = self.index_of(F)
        return np.all((idx >= -tol) & (idx <= np.array(self.n) - 1 + tol), axis=-1)

    def interpolate(self, values, F):
        """Multilinear interpolation of node values at matrices F.

        Raises
        ------
        ValueError
            If some F lies outside the grid.
        """
        F = np.asarray(F, dtype=float)
        idx = np.atleast_2d(self.index_of(F).reshape(-1, 4))
        n = np.array(self.n)
        if np.any(idx < -1e-9) or np.any(idx > n - 1 + 1e-9):
            raise ValueError("query outside the envelope grid")
        idx = np.clip(idx, 0, n - 1)
        base = np.minimum(np.floor(idx).astype(int), n - 2)
        fr = idx - base
        out = np.zeros(len(idx))
        for corner in itertools.product((0, 1), repeat=4):
            c = np.array(corner)
            w = np.prod(np.where(c, fr, 1 - fr), axis=1)
            v = values[tuple((base + c).T)]
            out += np.where(w > ZERO_WEIGHT, w * np.where(w > ZERO_WEIGHT, v, 0.0), 0.0)
        return out.reshape(np.shape(F)[:-2]) if np.ndim(F) > 2 else out[0]

    def spec(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "n": list(self.n), "mask_det": self.mask_det}


@dataclass
class EnvelopeApprox:
    """Tabulated envelope bracket on a matrix grid.

    Attributes
    ----------
    grid : MatrixGrid
    W : ndarray
        Density at the nodes (``inf`` on masked nodes).
    upper : ndarray
        Lamination values, an upper bound of the rank-one convex envelope.
    lower : ndarray or None
        Polyconvex lower bound where computed, NaN elsewhere.
    director : Director or None
        Director at which W was frozen.
    projector : ndarray or None
        For tangential envelopes, the projection applied to queries.
    """

    grid: MatrixGrid
    W: np.ndarray
    upper: np.ndarray
    lower: Optional[np.ndarray] = None
    director: Optional[Director] = None
    iterations: int = 0
    converged: bool = False
    history: list = field(default_factory=list)
    n_angles: int = 0
    projector: Optional[np.ndarray] = None
    lattice_order: int = 0

    def _prep(self, F):
        F = np.asarray(F, dtype=float)
        if self.projector is not None:
            F = self.projector @ F
        return F

    def value(self, F):
        """Upper envelope at arbitrary matrices inside the grid."""
        return self.grid.interpolate(self.upper, self._prep(F))

    def lower_value(self, F):
        if self.lower is None:
            raise ValueError("no lower bound computed")
        return self.grid.interpolate(self.lower, self._prep(F))

    def gap(self):
        """Largest ``upper - lower`` over nodes with a finite lower bound."""
        if self.lower is None:
            return math.nan
        ok = np.isfinite(self.lower) & np.isfinite(self.upper)
        return float(np.max(self.upper[ok] - self.lower[ok])) if ok.any() else math.nan

    def to_csv(self, path):
        """Write the table with a commented grid header."""
        g = self.grid
        lower = self.lower if self.lower is not None else np.full(g.n, np.nan)
        with open(path, "w", newline="\n") as f:
            f.write(f"# lo={','.join(repr(x) for x in g.lo)}\n")
            f.write(f"# hi={','.join(repr(x) for x in g.hi)}\n")
            f.write(f"# n={','.join(str(k) for k in g.n)}\n")
            f.write(f"# mask_det={int(g.mask_det)}\n")
            if self.director is not None:
                f.write(f"# director={','.join(repr(float(x)) for x in self.director.components)}\n")
            if self.projector is not None:
                f.write("# tangential=1\n")
            f.write(f"# iterations={self.iterations} converged={int(self.converged)}\n")
            f.write("i1,i2,i3,i4,F11,F12,F21,F22,W,upper,lower\n")
            nodes = g.nodes().reshape(-1, 4)
            for k, idx in enumerate(np.ndindex(*g.n)):
                F = nodes[k]
                f.write(",".join(str(i) for i in idx) + ","
                        + ",".join(_fmt(x) for x in F) + ","
                        + f"{_fmt(self.W[idx])},{_fmt(self.upper[idx])},{_fmt(lower[idx])}\n")

    @classmethod
    def from_csv(cls, path):
        meta = {}
        rows = []
        with open(path) as f:
            for line in f:
                if line.startswith("#"):
                    for tok in line[1:].split():
                        k, _, v = tok.partition("=")
                        meta[k] = v
                elif line[0].isdigit():
                    rows.append(line.strip().split(","))
        grid = MatrixGrid([float(x) for x in meta["lo"].split(",")],
                          [float(x) for x in meta["hi"].split(",")],
                          [int(x) for x in meta["n"].split(",")],
                          bool(int(meta.get("mask_det", "1"))))
        data = np.array([[float(x) for x in r[8:]] for r in rows])
        shp = grid.n
        director = Director([float(x) for x in meta["director"].split(",")]) if "director" in meta else None
        lower = data[:, 2].reshape(shp)
        proj = None
        if meta.get("tangential") == "1" and director is not None:
            proj = projection(director.components)
        return cls(grid, data[:, 0].reshape(shp), data[:, 1].reshape(shp),
                   None if np.all(np.isnan(lower)) else lower, director,
                   int(meta.get("iterations", 0)), bool(int(meta.get("converged", 0))), projector=proj)


def _fmt(x):
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def direction_set(n_angles):
    """Rank-one directions ``a (x) b`` with a, b on a uniform half-circle grid."""
    ang = np.arange(n_angles) * np.pi / n_angles
    vecs = np.column_stack([np.cos(ang), np.sin(ang)])
    vecs[np.abs(vecs) < 1e-15] = 0.0
    return [(a, b) for a in vecs for b in vecs]


def _shifted(W, off):
    """Multilinear interpolation of W at ``index + off``; ``inf`` outside the grid."""
    N = W.shape
    fl = np.floor(off).astype(int)
    fr = off - fl
    out = np.zeros(N)
    for corner in itertools.product((0, 1), repeat=4):
        w = 1.0
        for ax in range(4):
            w *= fr[ax] if corner[ax] else 1 - fr[ax]
        if w <= ZERO_WEIGHT:
            continue
        s = fl + np.array(corner)
        src, dst = [], []
        for ax in range(4):
            lo = max(0, -s[ax])
            hi = min(N[ax], N[ax] - s[ax])
            if lo >= hi:
                return np.full(N, INF)
            dst.append(slice(lo, hi))
            src.append(slice(lo + s[ax], hi + s[ax]))
        tmp = np.full(N, INF)
        tmp[tuple(dst)] = W[tuple(src)]
        out += w * tmp
    return out


def _line_step(d, steps):
    """Step along direction d so that the largest index shift is one."""
    return 1.0 / np.max(np.abs(d) / steps)


def _direction_update(W, shift, max_shift):
    """Best chord value through every node along one line direction.

    ``shift`` is the index offset of one sample step; only ratios of the
    step counts enter the chord weights.
    """
    fm, fp = [], []
    for j in range(1, max_shift + 1):
        fm.append(_shifted(W, -j * shift))
        fp.append(_shifted(W, j * shift))
    best = np.full(W.shape, INF)
    live_m = [np.isfinite(a).any() for a in fm]
    live_p = [np.isfinite(b).any() for b in fp]
    for j in range(max_shift):
        if not live_m[j]:
            continue
        for k in range(max_shift):
            if not live_p[k]:
                continue
            tj, tk = j + 1.0, k + 1.0
            np.minimum(best, (tk * fm[j] + tj * fp[k]) / (tj + tk), out=best)
    return best


def lattice_directions(order):
    """Rank-one directions ``a (x) b`` with primitive integer a, b and entries up to ``order``.

    On an isotropic grid their lines pass through nodes, so sampling needs
    no interpolation.
    """
    vecs = []
    for p in range(0, order + 1):
        for q in range(-order, order + 1):
            if (p, q) == (0, 0) or math.gcd(p, abs(q)) != 1 or (p == 0 and q < 0):
                continue
            vecs.append(np.array([p, q], dtype=float))
    return [(a, b) for a in vecs for b in vecs]


def direction_steps(grid, n_angles, lattice_order=0):
    """Deduplicated rank-one line directions with their index shift per sample.

    Returns
    -------
    list of (a, b, shift)
        Unit vectors a, b and the per-step index offset along ``a (x) b``.
        Lines appearing in both families keep the finer sampling.
    """
    steps = grid.steps
    items = [(a, b, _shift_of(a, b, steps, False)) for a, b in direction_set(n_angles)]
    if lattice_order:
        if not np.allclose(steps, steps[0]):
            raise ValueError("lattice directions need equal grid steps")
        items += [(a, b, _shift_of(a, b, steps, True)) for a, b in lattice_directions(lattice_order)]
    uniq = {}
    for a, b, sh in items:
        key = tuple(np.round(sh / np.abs(sh).max(), 12))
        if key[np.flatnonzero(key)[0]] < 0:
            key = tuple(-x for x in key)
        key = tuple(x + 0.0 for x in key)
        if key not in uniq or np.abs(sh).max() < np.abs(uniq[key][2]).max():
            uniq[key] = (a / np.linalg.norm(a), b / np.linalg.norm(b), sh)
    return [uniq[k] for k in sorted(uniq)]


def _shift_of(a, b, steps, lattice):
    d = np.outer(a, b).ravel()
    if lattice:
        return d
    return _line_step(d, steps) * d / steps


def laminate_envelope(W0, grid, n_angles=8, max_iters=50, tol=1e-9, threads=1, lattice_order=0,
                      log=None):
    """Iterated lamination of tabulated node values.

    Each sweep replaces every node value by the smallest chord value over
    rank-one segments through the node, with endpoint values interpolated
    from the previous iterate. Directions come from ``n_angles`` uniform
    angles for a and b, sampled so the largest index offset per step is
    one, and from integer lattice directions of order ``lattice_order``,
    sampled at their integer offset so no interpolation is needed. Values
    never increase.

    Returns
    -------
    values : ndarray
    history : list of float
        Largest decrease per sweep.
    converged : bool
    """
    W = np.array(W0, dtype=float)
    shifts = [sh for _, _, sh in direction_steps(grid, n_angles, lattice_order)]
    max_shift = max(grid.n) - 1
    history = []
    converged = False
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for it in range(max_iters):
            if pool is None:
                cands = (_direction_update(W, sh, max_shift) for sh in shifts)
            else:
                cands = pool.map(lambda sh: _direction_update(W, sh, max_shift), shifts)
            new = W.copy()
            for c in cands:
                np.minimum(new, c, out=new)
            fin = np.isfinite(W)
            dec = float(np.max(W[fin] - new[fin])) if fin.any() else 0.0
            W = new
            history.append(dec)
            if log is not None:
                log(f"lamination sweep {it}: max decrease {dec:.3e}")
            if dec < tol:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return W, history, converged


def _lattice_for(grid, order):
    """Lattice directions only make sense on grids with equal steps."""
    return order if np.allclose(grid.steps, grid.steps[0]) else 0


def _director_array(m):
    if m is None:
        return None
    return m.components if isinstance(m, Director) else np.asarray(m, dtype=float)


def _node_values(W, m, nodes, penalty_mu):
    """Density at grid nodes; incompressible densities are rescaled onto det = 1 and penalized."""
    mv = _director_array(m)
    if not getattr(W, "incompressible", False):
        return np.asarray(W(nodes, mv), dtype=float)
    d = det(nodes)
    pos = d > 0
    scale = np.where(pos, np.abs(d), 1.0) ** -0.5
    vals = np.asarray(W(nodes * scale[..., None, None], mv), dtype=float) + penalty_mu * (d - 1) ** 2
    return np.where(pos, vals, INF)


def rank_one_convexify(W, m, grid, max_iters=50, n_angles=4, tol=1e-9, threads=1, lattice_order=2,
                       log=None, penalty_mu=1e3):
    """Lamination upper bound of the quasiconvex envelope of ``W(., m)``.

    Parameters
    ----------
    W : MechanicalDensity or callable
        Density; called as ``W(F, m)`` on the stacked grid nodes.
    m : Director or None
    grid : MatrixGrid
    penalty_mu : float
        For incompressible densities each node F is replaced by
        ``det(F)^(-1/2) F`` and ``penalty_mu (det F - 1)^2`` is added, so
        laminates between near-unimodular endpoints stay admissible.

    Returns
    -------
    EnvelopeApprox
        ``upper`` holds the lamination values; ``lower`` is left empty.
    """
    nodes = grid.nodes()
    vals = _node_values(W, m, nodes, penalty_mu)
    vals = np.where(grid.mask(), vals, INF)
    up, hist, conv = laminate_envelope(vals, grid, n_angles, max_iters, tol, threads,
                                       _lattice_for(grid, lattice_order), log=log)
    return EnvelopeApprox(grid, vals, up, None, m if isinstance(m, Director) or m is None else Director(m),
                          len(hist), conv, hist, n_angles, lattice_order=_lattice_for(grid, lattice_order))


def tangential_quasiconvexify(V, z, grid, max_iters=50, n_angles=4, tol=1e-9, threads=1, lattice_order=2,
                              log=None):
    """Lamination envelope of the projected lift ``V(z, P_z zeta)``.

    The grid runs over all 2x2 matrices zeta (no determinant mask).
    Queries on the returned envelope are projected with ``P_z`` first, so
    values at zeta and at ``P_z zeta`` coincide.
    """
    if grid.mask_det:
        grid = MatrixGrid(grid.lo, grid.hi, grid.n, mask_det=False)
    zv = _director_array(z)
    P = projection(zv)
    nodes = grid.nodes()
    vals = np.asarray(V(zv, P @ nodes), dtype=float)
    up, hist, conv = laminate_envelope(vals, grid, n_angles, max_iters, tol, threads,
                                       _lattice_for(grid, lattice_order), log=log)
    return EnvelopeApprox(grid, vals, up, None, Director(zv), len(hist), conv, hist, n_angles, projector=P,
                          lattice_order=_lattice_for(grid, lattice_order))


def _lp_hull(Mc, Wc, Mq):
    """Lower convex hull of points (Mc, Wc) at Mq with its supporting affine function."""
    m = len(Wc)
    A_eq = np.vstack([np.ones(m), Mc.T])
    b_eq = np.concatenate([[1.0], Mq])
    res = linprog(Wc, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        return None, None
    duals = res.eqlin.marginals
    return float(res.fun), duals


def polyconvexify_lower(W, m, grid, nodes=None, certify=True, starts=4, seed=0, rounds=8, cut_tol=1e-7):
    """Polyconvex lower bound at selected grid nodes.

    For each query node an LP finds the lower convex hull of the lifted
    points ``(M(F_i), W(F_i, m))`` over all usable grid nodes, together
    with a supporting affine function l of the minors. When ``certify`` is
    set the largest violation of ``l(M(G)) <= W(G, m)`` over all matrices G
    is searched by local minimization from the tightest nodes and
    subtracted, so the result is below every polyconvex minorant found.
    The maximizing G is then added to the point set and the LP re-solved
    (a cutting-plane loop); the best certified value over the rounds is
    kept. Added points are shared between query nodes.

    Parameters
    ----------
    nodes : array of int indices, shape (k, 4), optional
        Query nodes; all usable nodes when omitted.
    rounds : int
        Maximal number of LP solves per node when certifying.
    cut_tol : float
        Violation below which the loop stops.

    Returns
    -------
    ndarray
        Grid-shaped array with the bound at the query nodes, NaN elsewhere
        and ``-inf`` where the LP failed.
    """
    mv = _director_array(m)
    F = grid.nodes()
    Wn = np.where(grid.mask(), np.asarray(W(F, mv), dtype=float), INF)
    fin = np.isfinite(Wn)
    Fc = F[fin]
    Mc = minors(Fc)
    Wc = Wn[fin]
    out = np.full(grid.n, np.nan)
    if nodes is None:
        nodes = np.argwhere(fin)
    rng = np.random.default_rng(seed)
    for idx in np.asarray(nodes).reshape(-1, 4):
        idx = tuple(int(i) for i in idx)
        if not fin[idx]:
            out[idx] = np.nan
            continue
        Mq = minors(F[idx])
        best = -INF
        for _ in range(rounds if certify else 1):
            val, duals = _lp_hull(Mc, Wc, Mq)
            if val is None:
                break
            if not certify:
                best = val
                break
            c0, c = duals[0], duals[1:]
            slack = Wc - (c0 + Mc @ c)
            viol = max(0.0, -float(slack.min()))
            arg = None
            for k in np.argsort(slack)[:starts]:
                x0 = Fc[k % len(Fc)].ravel() + 1e-3 * rng.normal(size=4) if k < len(Fc) else None
                if x0 is None:
                    continue
                v, G = _max_violation(W, mv, c0, c, x0)
                if v > viol:
                    viol, arg = v, G
            best = max(best, val - viol)
            if viol <= cut_tol or arg is None:
                break
            wg = float(W(arg, mv))
            Mc = np.vstack([Mc, minors(arg)])
            Wc = np.append(Wc, wg)
        out[idx] = best
    return out


def _max_violation(W, mv, c0, c, x0):
    """Local maximum of ``l(M(G)) - W(G)`` started at x0; returns (value, G)."""
    def f(x):
        G = x.reshape(2, 2)
        w = W(G, mv)
        if not np.isfinite(w):
            return 1e30, np.zeros(4)
        lm = c0 + minors(G) @ c
        g = np.asarray(W.gradient(G, mv)).ravel() if hasattr(W, "gradient") else None
        dl = c[:4] + c[4] * np.array([G[1, 1], -G[1, 0], -G[0, 1], G[0, 0]])
        return float(w - lm), (g - dl if g is not None else None)

    try:
        res = minimize(f, x0, jac=True, method="L-BFGS-B", options={"maxiter": 200})
    except (ValueError, FloatingPointError):
        return 0.0, None
    if not np.isfinite(res.fun) or res.fun >= 0:
        return 0.0, None
    return -float(res.fun), res.x.reshape(2, 2)


@dataclass
class CellResult:
    """Best value of the cell problem and its diagnostics."""

    value: float
    flagged: bool
    values: list
    domain: str
    resolution: int


class _PeriodicCell:
    """P1 fields on the periodic unit square with ``N x N`` squares split along rising diagonals."""

    def __init__(self, N):
        self.N = N

    def grads(self, phi):
        """phi (2, N, N) -> gradients of the two triangle families, each (N, N, 2, 2)."""
        N = self.N
        p = phi
        px = np.roll(p, -1, axis=1)
        pxy = np.roll(px, -1, axis=2)
        py = np.roll(p, -1, axis=2)
        g1 = np.stack([(px - p) * N, (pxy - px) * N], axis=-1)
        g2 = np.stack([(pxy - py) * N, (py - p) * N], axis=-1)
        return np.moveaxis(g1, 0, -2), np.moveaxis(g2, 0, -2)

    def adjoint(self, G1, G2):
        """Transpose of ``grads`` applied to per-cell matrices."""
        N = self.N
        a1 = np.moveaxis(G1, -2, 0)
        a2 = np.moveaxis(G2, -2, 0)
        out = np.zeros((2, N, N))
        # g1x = (px - p) N, g1y = (pxy - px) N
        out -= a1[..., 0] * N
        out += _unroll(a1[..., 0] * N, (1,))
        out -= _unroll(a1[..., 1] * N, (1,))
        out += _unroll(a1[..., 1] * N, (1, 2))
        # g2x = (pxy - py) N, g2y = (py - p) N
        out += _unroll(a2[..., 0] * N, (1, 2))
        out -= _unroll(a2[..., 0] * N, (2,))
        out += _unroll(a2[..., 1] * N, (2,))
        out -= a2[..., 1] * N
        return out


def _unroll(a, axes):
    for ax in axes:
        a = np.roll(a, 1, axis=ax)
    return a


def _lattice_profile(N, b, lam):
    """Periodic sawtooth H(x . b/|b|) with slopes ``1 - lam`` and ``-lam`` for an integer vector b."""
    b = np.rint(np.asarray(b, dtype=float)).astype(int)
    i, j = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    s = (b[0] * i + b[1] * j) % N
    k = int(round(lam * N))
    k = min(max(k, 1), N - 1)
    frac = k / N
    # h rises with slope (1 - frac) for k steps, falls with slope -frac for N - k steps
    h = np.where(s <= k, (1 - frac) * s, (1 - frac) * k - frac * (s - k)) / (N * np.hypot(*b))
    return h, frac


_CELL_NORMALS = {(1, 0): (1, 0), (0, 1): (0, 1), (1, -1): (1, -1), (-1, 1): (1, -1)}


def tree_seeds(tree):
    """Periodic-cell seeds ``(a, b_integer, lam, amplitude)`` from the first split of a tree.

    Only layer normals along cell-mesh lines (axes and the falling
    diagonal) are usable; other splits give no seed.
    """
    if tree is None or tree.is_leaf:
        return []
    b = np.asarray(tree.b, dtype=float)
    b = b / np.linalg.norm(b)
    for key in _CELL_NORMALS:
        v = np.array(key, dtype=float)
        if abs(abs(b @ v) / np.linalg.norm(v) - 1) < 1e-8:
            sign = np.sign(b @ v)
            D = tree.plus.F - tree.minus.F
            amp = float(np.asarray(tree.a) @ D @ (sign * v / np.linalg.norm(v)))
            return [(np.asarray(tree.a, dtype=float), sign * v, tree.lam, amp)]
    return []


def cell_problem_qc(W, m, F, mesh_resolution=16, restarts=4, seed=0, domain="periodic",
                    laminates=(), maxiter=500, tree=None):
    """Discrete cell problem for the quasiconvex envelope at F.

    Minimizes the average of ``W(F + D phi, m)`` over continuous
    piecewise-affine phi, either periodic on the unit square
    (``domain="periodic"``) or vanishing on the boundary of a triangulated
    unit disk (``domain="ball"``). Both have the quasiconvex envelope as
    infimum; on the periodic square, laminates whose layers follow mesh
    lines are represented exactly.

    Parameters
    ----------
    laminates : sequence of (a, b, lam, amplitude)
        Seeds ``phi = amplitude * a * sawtooth(b . x)`` with integer
        lattice vector b and volume fraction lam. Ignored for the disk.
    tree : LaminateTree, optional
        Adds the seed of its first split.
    """
    F = np.asarray(F, dtype=float)
    mv = _director_array(m)
    w0 = float(W(F, mv))
    rng = np.random.default_rng(seed)
    if domain == "periodic":
        N = mesh_resolution
        cell = _PeriodicCell(N)

        def energy(x):
            phi = x.reshape(2, N, N)
            G1, G2 = cell.grads(phi)
            A1 = F + G1
            A2 = F + G2
            e1 = np.asarray(W(A1, mv))
            e2 = np.asarray(W(A2, mv))
            val = 0.5 * (e1.mean() + e2.mean())
            if not np.isfinite(val):
                return INF, np.zeros_like(x)
            g1 = np.asarray(W.gradient(A1, mv)) / (2 * N * N)
            g2 = np.asarray(W.gradient(A2, mv)) / (2 * N * N)
            return float(val), cell.adjoint(g1, g2).ravel()

        starts = [np.zeros(2 * N * N)]
        for a, b, lam, amp in list(laminates) + tree_seeds(tree):
            h, _ = _lattice_profile(N, b, lam)
            starts.append((amp * np.asarray(a, dtype=float)[:, None, None] * h[None]).ravel())
        for _ in range(restarts):
            starts.append(0.05 / N * rng.normal(size=2 * N * N))
    elif domain == "ball":
        mesh = disk_mesh(1.0, mesh_resolution)
        free = ~mesh.boundary_nodes()
        nf = int(free.sum())
        vol = mesh.volumes / mesh.area

        def full(x):
            phi = np.zeros((mesh.n_points, 2))
            phi[free] = x.reshape(nf, 2)
            return phi

        def energy(x):
            phi = full(x)
            A = F + mesh.gradients(phi)
            e = np.asarray(W(A, mv))
            val = float(np.dot(vol, e))
            if not np.isfinite(val):
                return INF, np.zeros_like(x)
            g = np.asarray(W.gradient(A, mv)) * vol[:, None, None]
            out = mesh.gradient_adjoint(g)
            return val, out[free].ravel()

        starts = [np.zeros(2 * nf)]
        for _ in range(restarts):
            starts.append(0.05 / mesh_resolution * rng.normal(size=2 * nf))
    else:
        raise ValueError("domain must be 'periodic' or 'ball'")

    values = []
    for x0 in starts:
        v0, _ = energy(x0)
        if not np.isfinite(v0):
            values.append(INF)
            continue
        try:
            res = minimize(energy, x0, jac=True, method="L-BFGS-B",
                           options={"maxiter": maxiter, "ftol": 1e-15, "gtol": 1e-12})
            values.append(float(min(res.fun, v0)))
        except (ValueError, FloatingPointError):
            values.append(float(v0))
    finite = [v for v in values if np.isfinite(v)]
    if not finite:
        return CellResult(w0, True, values, domain, mesh_resolution)
    return CellResult(float(min(min(finite), w0)), False, values, domain, mesh_resolution)


@dataclass
class LaminateTree:
    """Hierarchical rank-one splitting ``F = lam F_plus + (1 - lam) F_minus``.

    Leaves carry ``value = W(F, m)``; splits carry the direction ``a (x) b``
    with ``F_plus - F_minus`` parallel to it.
    """

    F: np.ndarray
    value: float
    lam: Optional[float] = None
    plus: Optional["LaminateTree"] = None
    minus: Optional["LaminateTree"] = None
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    flagged: bool = False

    @property
    def is_leaf(self):
        return self.plus is None

    def depth(self):
        return 0 if self.is_leaf else 1 + max(self.plus.depth(), self.minus.depth())

    def tree_value(self):
        if self.is_leaf:
            return self.value
        return self.lam * self.plus.tree_value() + (1 - self.lam) * self.minus.tree_value()

    def identity_residual(self):
        """Largest violation of the convex-combination and rank-one identities."""
        if self.is_leaf:
            return 0.0
        r = np.abs(self.lam * self.plus.F + (1 - self.lam) * self.minus.F - self.F).max()
        D = self.plus.F - self.minus.F
        r1 = abs(det(D))
        return float(max(r, r1, self.plus.identity_residual(), self.minus.identity_residual()))

    def leaves(self, weight=1.0):
        """List of ``(volume fraction, F, value)`` over the leaves."""
        if self.is_leaf:
            return [(weight, self.F, self.value)]
        return self.plus.leaves(weight * self.lam) + self.minus.leaves(weight * (1 - self.lam))


def best_split(values_fn, F, grid, n_angles, lattice_order=0, tj_max=None, projector=None):
    """Smallest chord value through F over sampled rank-one segments.

    ``values_fn`` evaluates the envelope at stacks of matrices and may
    return ``inf`` outside the grid. Among (near) ties the longest segment
    wins, which favours endpoints where the envelope meets the density.
    With a ``projector`` P, directions with ``P a (x) b = 0`` are skipped:
    the envelope is constant along them.

    Returns
    -------
    (value, a, b, t_minus, t_plus)
        Endpoints are ``F - t_minus a (x) b`` and ``F + t_plus a (x) b``.
    """
    F = np.asarray(F, dtype=float)
    steps = grid.steps
    best = (INF, None, None, 0.0, 0.0, 0.0)
    T = tj_max or (max(grid.n) - 1)
    for a, b, sh in direction_steps(grid, n_angles, lattice_order):
        d = np.outer(a, b)
        if projector is not None and np.abs(projector @ d).max() < 1e-12:
            continue
        dt = float(np.linalg.norm(sh * steps))
        ts = dt * np.arange(1, T + 1)
        Fm = F - ts[:, None, None] * d
        Fp = F + ts[:, None, None] * d
        fm = values_fn(Fm)
        fp = values_fn(Fp)
        tj = ts[:, None]
        tk = ts[None, :]
        ch = (tk * fm[:, None] + tj * fp[None, :]) / (tj + tk)
        ch = np.where(np.isnan(ch), INF, ch)
        span = np.broadcast_to(tj + tk, ch.shape)
        flat = np.lexsort((-span.ravel(), np.round(ch.ravel(), 10)))[0]
        j, k = np.unravel_index(flat, ch.shape)
        cand = (float(ch[j, k]), a, b, float(ts[j]), float(ts[k]), float(span[j, k]))
        if cand[0] < best[0] - 1e-10 or (abs(cand[0] - best[0]) <= 1e-10 and cand[5] > best[5]):
            best = cand
    return best[:5]


def extract_laminate(W, m, F, envelope, max_depth=3, tol=1e-6):
    """Recover a laminate realizing the envelope value at F.

    Re-solves the split problem on the tabulated upper envelope and
    recurses on the endpoints until the density itself is within ``tol`` of
    the envelope. Leaves carry the exact density values.
    """
    mv = _director_array(m)
    grid = envelope.grid

    def env(G):
        G = np.asarray(G, dtype=float)
        ok = grid.contains(G)
        out = np.full(G.shape[:-2], INF)
        if ok.any():
            out[ok] = envelope.value(G[ok])
        return out

    def build(G, depth):
        w = float(W(G, mv))
        e = float(env(G[None])[0])
        if not np.isfinite(w) or w <= e + tol:
            return LaminateTree(G.copy(), w)
        if depth == max_depth:
            return LaminateTree(G.copy(), w, flagged=True)
        val, a, b, tm, tp = best_split(env, G, grid, envelope.n_angles, envelope.lattice_order,
                                       projector=envelope.projector)
        if a is None or val >= w - tol:
            return LaminateTree(G.copy(), w)
        d = np.outer(a, b)
        Fp = G + tp * d
        Fm = G - tm * d
        lam = tm / (tm + tp)
        plus = build(Fp, depth + 1)
        minus = build(Fm, depth + 1)
        node = LaminateTree(G.copy(), lam * plus.tree_value() + (1 - lam) * minus.tree_value(),
                            lam, plus, minus, np.asarray(a), np.asarray(b))
        node.flagged = plus.flagged or minus.flagged
        return node

    return build(np.asarray(F, dtype=float), 0)
