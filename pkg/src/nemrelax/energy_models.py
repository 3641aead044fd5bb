"""Mechanical densities W(F, n) and nematic densities V(z, zeta).

Every density is a plain callable object that accepts a single matrix or a
stack of matrices in the last two axes. Inadmissible deformation gradients
(non-positive determinant, or off the unimodular set for incompressible
models) evaluate to ``math.inf``, which saturates under addition and never
wins a minimum.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor_core import Director, cof, det, projection, skew, step_tensor

__all__ = [
    "INF",
    "ModelConditions",
    "MechanicalDensity",
    "NematicDensity",
    "Theta",
    "make_w0_compressible",
    "make_nematic_mechanical",
    "make_incompressible",
    "make_double_well",
    "make_oseen_frank",
    "make_one_constant",
    "make_tangent_double_well",
    "planar_tangent_wells",
    "check_conditions",
    "density_from_config",
    "ClauseResult",
    "ConditionReport",
]

INF = math.inf
INCOMPRESSIBLE_TOL = 1e-8


def _vec(n):
    if n is None:
        return None
    if isinstance(n, Director):
        return n.components
    return np.asarray(n, dtype=float)


def _fro(F):
    return np.sqrt(np.einsum("...ij,...ij->...", F, F))


def _power_grad(F, p):
    """Gradient of ``|F|**p``; zero at F = 0."""
    nrm = _fro(F)
    safe = np.where(nrm > 0, nrm, 1.0)
    scale = np.where(nrm > 0, p * safe ** (p - 2), 0.0)
    return scale[..., None, None] * F


def _scalar_out(x, shape_ref):
    return float(x) if np.ndim(shape_ref) == 2 and np.ndim(x) == 0 else x


@dataclass(frozen=True)
class Theta:
    """Convex volumetric penalty ``theta(t) = t**a + t**-b`` for t > 0.

    Returns ``inf`` for ``t <= 0``.
    """

    a: float = 2.0
    b: float = 2.0
    convex: bool = True

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        pos = t > 0
        ts = np.where(pos, t, 1.0)
        val = np.where(pos, ts**self.a + ts ** (-self.b), INF)
        return val[()] if val.ndim == 0 else val

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        pos = t > 0
        ts = np.where(pos, t, 1.0)
        val = np.where(pos, self.a * ts ** (self.a - 1) - self.b * ts ** (-self.b - 1), np.nan)
        return val[()] if val.ndim == 0 else val


@dataclass(frozen=True)
class ModelConditions:
    """Exponents and constants of the growth and continuity hypotheses.

    Attributes
    ----------
    dim : int
        Space dimension.
    p, q, s : float
        Gradient, cofactor and director-gradient exponents; the bound on p
        is only enforced for mechanical densities (``theta`` set).
    c : float
        Declared constant of the two-sided growth bounds.
    theta : Theta or None
        Volumetric penalty; ``None`` for nematic densities.
    h : callable or None
        Declared modulus of continuity in the director, ``None`` when
        unknown (``check_conditions`` then fits one).
    """

    dim: int
    p: float = 2.0
    q: float = 2.0
    s: float = 2.0
    c: float = 1.0
    theta: Optional[Theta] = None
    h: Optional[Callable] = None

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.theta is not None and not self.p > self.dim - 1:
            raise ValueError(f"p must exceed n - 1 = {self.dim - 1}")
        if not self.q > 1 or not self.s > 1:
            raise ValueError("q and s must exceed 1")
        if not self.c > 0:
            raise ValueError("c must be positive")

    @property
    def p_conj(self):
        return self.p / (self.p - 1)

    @property
    def q_conj(self):
        return self.q / (self.q - 1)


class MechanicalDensity:
    """Mechanical energy density ``W(F, n)`` extended by infinity.

    Parameters
    ----------
    energy : callable
        ``energy(F, n)`` for stacks of matrices with positive determinant;
        may assume admissibility. Inadmissible entries are masked here.
    gradient : callable
        ``gradient(F, n)`` returning dW/dF with the shape of ``F``.
    conditions : ModelConditions
    incompressible : bool
        If set, W is finite only where ``|det F - 1| <= det_tol``.
    depends_on_director : bool
        False for director-independent densities such as W0.
    """

    def __init__(self, energy, gradient, conditions, *, name="W", incompressible=False,
                 det_tol=INCOMPRESSIBLE_TOL, depends_on_director=True, params=None):
        self._energy = energy
        self._gradient = gradient
        self.conditions = conditions
        self.name = name
        self.incompressible = incompressible
        self.det_tol = det_tol
        self.depends_on_director = depends_on_director
        self.params = dict(params or {})

    @property
    def dim(self):
        return self.conditions.dim

    def admissible(self, F):
        d = det(F)
        if self.incompressible:
            return np.abs(d - 1.0) <= self.det_tol
        return d > 0

    def __call__(self, F, n=None):
        F = np.asarray(F, dtype=float)
        ok = self.admissible(F)
        n = _vec(n)
        if np.all(ok):
            out = self._energy(F, n)
        else:
            Fs = np.where(ok[..., None, None], F, np.eye(self.dim))
            nsafe = n
            out = np.where(ok, self._energy(Fs, nsafe), INF)
        return _scalar_out(out, F)

    def gradient(self, F, n=None):
        """Analytic gradient in F; NaN where W is infinite."""
        F = np.asarray(F, dtype=float)
        ok = self.admissible(F)
        Fs = np.where(ok[..., None, None], F, np.eye(self.dim))
        g = self._gradient(Fs, _vec(n))
        return np.where(ok[..., None, None], g, np.nan)

    def __repr__(self):
        return f"MechanicalDensity({self.name}, {self.params})"


class NematicDensity:
    """Nematic energy density ``V(z, zeta)`` with ``zeta`` the director gradient.

    ``zeta[i, j]`` is the derivative of the i-th director component in the
    j-th spatial direction.
    """

    def __init__(self, energy, gradient, conditions, *, name="V", tangential=True, params=None):
        self._energy = energy
        self._gradient = gradient
        self.conditions = conditions
        self.name = name
        self.tangential = tangential
        self.params = dict(params or {})

    @property
    def dim(self):
        return self.conditions.dim

    def __call__(self, z, zeta):
        zeta = np.asarray(zeta, dtype=float)
        return _scalar_out(self._energy(_vec(z), zeta), zeta)

    def gradient(self, z, zeta):
        """Analytic gradient in zeta."""
        return self._gradient(_vec(z), np.asarray(zeta, dtype=float))

    def lifted(self, z, zeta):
        """``V(z, (I - z z^T) zeta)``, defined for arbitrary matrices zeta."""
        P = projection(_vec(z))
        return self(z, P @ np.asarray(zeta, dtype=float))

    def __repr__(self):
        return f"NematicDensity({self.name}, {self.params})"


def make_w0_compressible(p=2.0, a=2.0, b=2.0, dim=2, q=None):
    """Isotropic compressible density ``|F|**p + theta(det F)``.

    Parameters
    ----------
    p : float
        Growth exponent, must exceed ``dim - 1``.
    a, b : float
        Exponents of ``theta(t) = t**a + t**-b``; ``a >= 2`` and
        ``b >= q' - 1``.
    q : float, optional
        Cofactor exponent. Defaults to ``p`` in 2-D and ``p / 2`` in 3-D,
        the largest value for which ``|cof F|**q <= |F|**p`` at all F.
    """
    if q is None:
        q = p if dim == 2 else p / 2
    if a < 2:
        raise ValueError("a must be at least 2")
    q_conj = q / (q - 1) if q > 1 else INF
    if b < q_conj - 1:
        raise ValueError(f"b must be at least q' - 1 = {q_conj - 1}")
    theta = Theta(a, b)
    cond = ModelConditions(dim=dim, p=p, q=q, c=2.0, theta=theta, h=lambda t: 0.0 * np.asarray(t))

    def energy(F, n):
        return _fro(F) ** p + theta(det(F))

    def gradient(F, n):
        return _power_grad(F, p) + theta.derivative(det(F))[..., None, None] * cof(F)

    return MechanicalDensity(energy, gradient, cond, name="W0", depends_on_director=False,
                             params={"p": p, "a": a, "b": b, "q": q, "dim": dim})


def make_nematic_mechanical(w0, alpha):
    """Nematic elastomer density ``W(F, n) = W0(L_n F)`` with the step tensor L_n.

    The declared growth constant is derived from the singular values of L_n
    and the submultiplicativity of theta; the director modulus is left to
    ``check_conditions`` to fit.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    dim = w0.dim
    c0 = w0.conditions
    theta = c0.theta
    s_min, s_max = min(1 / alpha, math.sqrt(alpha)), max(1 / alpha, math.sqrt(alpha))
    dL = (1 / alpha) * math.sqrt(alpha) ** (dim - 1)
    c = max(c0.c, 2 * c0.c / s_min**c0.p, c0.c * s_max**c0.p,
            c0.c * (1 + float(theta(1 / dL))), c0.c * (1 + float(theta(dL))))
    cond = ModelConditions(dim=dim, p=c0.p, q=c0.q, c=c, theta=theta, h=None)

    def energy(F, n):
        L = step_tensor(n, alpha)
        return w0._energy(L @ F, None)

    def gradient(F, n):
        L = step_tensor(n, alpha)
        return L @ w0._gradient(L @ F, None)

    return MechanicalDensity(energy, gradient, cond, name="W_nematic",
                            incompressible=w0.incompressible, det_tol=w0.det_tol,
                             params={"alpha": alpha, **w0.params})


def make_incompressible(w, det_tol=INCOMPRESSIBLE_TOL):
    """Restrict a density to ``|det F - 1| <= det_tol``; infinite elsewhere."""
    return MechanicalDensity(w._energy, w._gradient, w.conditions, name=w.name + "_incompressible",
                             incompressible=True, det_tol=det_tol,
                             depends_on_director=w.depends_on_director, params=w.params)


def make_double_well(A, B, theta=(2.0, 2.0), *, kappa=0.0, n0=None, eps=0.0, p=2.0):
    """Two-well density with rank-one connected wells.

    ``W(F, n) = min(|F - A|^2, |F - B|^2) (1 + kappa (1 - (n . n0)^2))
    + theta(det F) + eps |F|^p``.

    The director weight ``1 - (n . n0)^2`` vanishes at ``n = +-n0`` and is
    even in n.

    Parameters
    ----------
    A, B : array_like
        Well matrices with positive determinant.
    theta : Theta or (a, b)
        Volumetric penalty.
    kappa : float
        Strength of the director coupling.
    n0 : array_like, optional
        Preferred director, defaults to the first basis vector.
    eps : float
        Weight of the extra ``|F|^p`` growth term.
    """
    import warnings

    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    dim = A.shape[0]
    if det(A) <= 0 or det(B) <= 0:
        raise ValueError("wells must have positive determinant")
    if np.linalg.matrix_rank(B - A, tol=1e-12) > 1:
        warnings.warn("wells are not rank-one connected", stacklevel=2)
    if not isinstance(theta, Theta):
        theta = Theta(*theta)
    n0 = np.eye(dim)[0] if n0 is None else _vec(Director(n0))
    M2 = max(float(_fro(A)) ** 2, float(_fro(B)) ** 2)
    c = max(4.0, M2 + 1.0, 2 * (1 + kappa) * (1 + M2) + eps + 1.0)
    cond = ModelConditions(dim=dim, p=2.0 if eps == 0 else max(2.0, p), q=2.0 if dim == 2 else 1.0 + 1e-9,
                           c=c, theta=theta, h=lambda t: np.minimum(2 * kappa * np.asarray(t), 1e300))

    def weight(n):
        if n is None:
            return 1.0
        return 1.0 + kappa * (1.0 - np.einsum("...i,i->...", n, n0) ** 2)

    def parts(F):
        dA = F - A
        dB = F - B
        eA = np.einsum("...ij,...ij->...", dA, dA)
        eB = np.einsum("...ij,...ij->...", dB, dB)
        useA = eA <= eB
        return np.where(useA, eA, eB), np.where(useA[..., None, None], dA, dB)

    def energy(F, n):
        well, _ = parts(F)
        val = well * weight(n) + theta(det(F))
        if eps:
            val = val + eps * _fro(F) ** p
        return val

    def gradient(F, n):
        _, dW = parts(F)
        g = 2 * np.asarray(weight(n))[..., None, None] * dW
        g = g + theta.derivative(det(F))[..., None, None] * cof(F)
        if eps:
            g = g + eps * _power_grad(F, p)
        return g

    return MechanicalDensity(energy, gradient, cond, name="double_well",
                             depends_on_director=kappa != 0,
                             params={"A": A.tolist(), "B": B.tolist(), "kappa": kappa,
                                     "n0": n0.tolist(), "eps": eps, "p": p,
                                     "a": theta.a, "b": theta.b})


def _tangential_spectrum(V, dim):
    """Extreme eigenvalues of a quadratic nematic density on tangent matrices at e_n."""
    z = np.eye(dim)[-1]
    basis = []
    for i in range(dim - 1):
        for j in range(dim):
            E = np.zeros((dim, dim))
            E[i, j] = 1.0
            basis.append(E)
    m = len(basis)
    Q = np.empty((m, m))
    for a in range(m):
        for b in range(m):
            Q[a, b] = 0.25 * (V(z, basis[a] + basis[b]) - V(z, basis[a] - basis[b]))
    ev = np.linalg.eigvalsh(Q)
    return ev[0], ev[-1]


def make_oseen_frank(K1, K2, K3, K4, check_samples=2000, seed=0):
    """Oseen-Frank density in three dimensions.

    ``K1 (div n)^2 + K2 (n . curl n)^2 + K3 |n x curl n|^2
    + (K2 + K4) (tr(Dn^2) - (div n)^2)``.

    Raises
    ------
    ValueError
        If the density takes a negative value on sampled tangent pairs.
    """
    def curl(zeta):
        return np.stack([zeta[..., 2, 1] - zeta[..., 1, 2],
                         zeta[..., 0, 2] - zeta[..., 2, 0],
                         zeta[..., 1, 0] - zeta[..., 0, 1]], axis=-1)

    def energy(z, zeta):
        tr = np.trace(zeta, axis1=-2, axis2=-1)
        c = curl(zeta)
        zc = np.einsum("...i,...i->...", z, c)
        cc = np.einsum("...i,...i->...", c, c)
        tr2 = np.einsum("...ij,...ji->...", zeta, zeta)
        return K1 * tr**2 + K2 * zc**2 + K3 * (cc - zc**2) + (K2 + K4) * (tr2 - tr**2)

    def gradient(z, zeta):
        tr = np.trace(zeta, axis1=-2, axis2=-1)[..., None, None]
        c = curl(zeta)
        zc = np.einsum("...i,...i->...", z, c)[..., None, None]
        eye = np.eye(3)
        Sz = skew(np.broadcast_to(z, c.shape))
        Sc = skew(c)
        zetaT = np.swapaxes(zeta, -1, -2)
        return (2 * K1 * tr * eye + 2 * K2 * zc * Sz + 2 * K3 * (Sc - zc * Sz)
                + (K2 + K4) * (2 * zetaT - 2 * tr * eye))

    rng = np.random.default_rng(seed)
    zs = rng.normal(size=(check_samples, 3))
    zs /= np.linalg.norm(zs, axis=1, keepdims=True)
    zetas = projection(zs) @ rng.normal(size=(check_samples, 3, 3))
    vals = energy(zs, zetas)
    if np.min(vals) < -1e-12 * np.max(np.abs(vals)):
        raise ValueError("Oseen-Frank constants give a negative energy on sampled tangent pairs")
    lo, hi = _tangential_spectrum(lambda z, x: energy(z, x), 3)
    c = max(1.0, hi, 1.0 / lo if lo > 0 else INF)
    cond = ModelConditions(dim=3, s=2.0, c=c if np.isfinite(c) else 1e300)
    return NematicDensity(energy, gradient, cond, name="oseen_frank",
                          params={"K1": K1, "K2": K2, "K3": K3, "K4": K4})


def make_one_constant(K=1.0, dim=3):
    """One-constant density ``K |zeta|^2``."""
    if not K > 0:
        raise ValueError("K must be positive")

    def energy(z, zeta):
        return K * np.einsum("...ij,...ij->...", zeta, zeta)

    def gradient(z, zeta):
        return 2 * K * zeta

    cond = ModelConditions(dim=dim, s=2.0, c=max(K, 1 / K))
    return NematicDensity(energy, gradient, cond, name="one_constant", params={"K": K, "dim": dim})


def planar_tangent_wells(beta):
    """Odd tangent wells ``zeta_1(z) = beta z_perp e_1^T`` and ``zeta_2 = -zeta_1`` in 2-D."""
    def wells(z):
        z = np.asarray(z, dtype=float)
        zp = np.stack([-z[..., 1], z[..., 0]], axis=-1)
        w1 = beta * zp[..., :, None] * np.array([1.0, 0.0])
        return w1, -w1
    wells.beta = beta
    return wells


def make_tangent_double_well(wells, K=1.0, eps=0.25, s=2.0, dim=2, seed=0):
    """Two-well nematic density with tangent, rank-one connected wells.

    ``V(z, zeta) = K min(|zeta - zeta_1(z)|^2, |zeta - zeta_2(z)|^2) + eps |zeta|^s``.

    Parameters
    ----------
    wells : callable
        ``wells(z) -> (zeta_1, zeta_2)``; both must satisfy ``z^T zeta = 0``.
    """
    rng = np.random.default_rng(seed)
    for _ in range(16):
        z = rng.normal(size=dim)
        z /= np.linalg.norm(z)
        w1, w2 = wells(z)
        if max(np.abs(z @ w1).max(), np.abs(z @ w2).max()) > 1e-10:
            raise ValueError("wells must be tangent: z^T zeta_i = 0")
        if np.linalg.matrix_rank(w1 - w2, tol=1e-12) > 1:
            raise ValueError("wells must be rank-one connected")
    M2 = max(float(np.sum(w1**2)), float(np.sum(w2**2)))

    def parts(z, zeta):
        w1, w2 = wells(z)
        d1 = zeta - w1
        d2 = zeta - w2
        e1 = np.einsum("...ij,...ij->...", d1, d1)
        e2 = np.einsum("...ij,...ij->...", d2, d2)
        use1 = e1 <= e2
        return np.where(use1, e1, e2), np.where(use1[..., None, None], d1, d2)

    def energy(z, zeta):
        well, _ = parts(z, zeta)
        return K * well + eps * _fro(zeta) ** s

    def gradient(z, zeta):
        _, d = parts(z, zeta)
        return 2 * K * d + eps * _power_grad(zeta, s)

    c = max(1.0, 2.0 / K if s <= 2 else 1.0, K * M2 + 1.0, 2 * K + eps + 1.0,
            1.0 / eps if s > 2 and eps > 0 else 1.0)
    cond = ModelConditions(dim=dim, s=s, c=c)
    return NematicDensity(energy, gradient, cond, name="tangent_double_well",
                          params={"K": K, "eps": eps, "s": s, "beta": getattr(wells, "beta", None)})


@dataclass
class ClauseResult:
    name: str
    passed: bool
    worst_value: float = 0.0
    worst_sample: Optional[dict] = None
    detail: str = ""


@dataclass
class ConditionReport:
    density: str
    clauses: list = field(default_factory=list)
    fitted_h: Optional[list] = None

    @property
    def passed(self):
        return all(c.passed for c in self.clauses)

    def as_dict(self):
        return {
            "density": self.density,
            "passed": self.passed,
            "clauses": [
                {"name": c.name, "passed": c.passed, "worst_value": c.worst_value,
                 "worst_sample": c.worst_sample, "detail": c.detail}
                for c in self.clauses
            ],
            "fitted_h": self.fitted_h,
        }


def _random_directors(rng, m, dim):
    v = rng.normal(size=(m, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_positive_matrices(rng, m, dim, scale=2.0):
    F = rng.normal(scale=scale, size=(m, dim, dim))
    flip = det(F) < 0
    F[flip, 0, :] *= -1
    return F


def _worst(name, viol, samples, detail=""):
    """Clause passes when every entry of ``viol`` is <= 0."""
    viol = np.asarray(viol, dtype=float)
    viol = np.where(np.isnan(viol), INF, viol)
    k = int(np.argmax(viol))
    worst = float(viol[k])
    sample = {key: np.asarray(val)[k].tolist() for key, val in samples.items()}
    return ClauseResult(name, worst <= 0.0, worst, sample, detail)


def _check_mechanical(W, rng, m):
    cond = W.conditions
    dim, p, q, c = cond.dim, cond.p, cond.q, cond.c
    F = _random_positive_matrices(rng, m, dim)
    if W.incompressible:
        F = F / np.abs(det(F))[:, None, None] ** (1.0 / dim)
    n = _random_directors(rng, m, dim)
    mdir = _random_directors(rng, m, dim)
    vals = np.asarray(W(F, n))
    smp = {"F": F, "n": n}
    clauses = [_worst("nonnegative", -vals, smp)]
    sym = np.abs(np.asarray(W(F, -n)) - vals)
    clauses.append(_worst("head_to_tail", sym, smp, "W(F, n) = W(F, -n)"))
    Fneg = F.copy()
    Fneg[:, 0, :] *= -1
    clauses.append(_worst("infinite_off_domain", np.where(np.isinf(W(Fneg, n)), 0.0, 1.0),
                          {"F": Fneg, "n": n}, "W = inf where det F <= 0"))
    nF = _fro(F)
    theta = cond.theta
    if W.incompressible:
        lower = nF**p / c - c
        upper = c * (nF**p + 1)
    else:
        th = theta(det(F))
        lower = (nF**p + _fro(cof(F)) ** q + th) / c - c
        upper = c * (nF**p + th + 1)
    clauses.append(_worst("growth_lower", lower - vals, smp, f"c = {c:.6g}"))
    clauses.append(_worst("growth_upper", vals - upper, smp, f"c = {c:.6g}"))
    if theta is not None and not W.incompressible:
        t = np.geomspace(0.01, 100.0, 41)
        t1, t2 = np.meshgrid(t, t)
        lhs = theta(t1 * t2)
        rhs = 9 * (1 + theta(t1)) * (1 + theta(t2))
        clauses.append(_worst("theta_submultiplicative", (lhs - rhs).ravel(),
                              {"t1": t1.ravel(), "t2": t2.ravel()}))
        small = np.array([1e-2, 1e-4, 1e-6])
        large = np.array([1e2, 1e4, 1e6])
        at0 = theta(small) * small ** (cond.q_conj - 1)
        ratio = theta(large) / large
        grow = np.all(np.diff(ratio) > 0) and ratio[-1] > 1e3
        clauses.append(ClauseResult("theta_limits", bool(grow and at0.min() > 0),
                                    float(min(at0.min(), ratio[-1])), None,
                                    "theta(t)/t -> inf and liminf t^(q'-1) theta(t) > 0"))
    diff = np.abs(np.asarray(W(F, mdir)) - vals)
    dist = np.linalg.norm(n - mdir, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(vals > 0, diff / vals, 0.0)
    edges = np.linspace(0.0, 2.0, 9)
    fitted = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (dist >= lo) & (dist < hi)
        fitted.append([float(lo), float(hi), float(ratio[sel].max()) if sel.any() else 0.0])
    small_n = n + 1e-6 * _random_directors(rng, m, dim)
    small_n /= np.linalg.norm(small_n, axis=1, keepdims=True)
    small_ratio = np.abs(np.asarray(W(F, small_n)) - vals) / np.maximum(vals, 1e-300)
    clauses.append(ClauseResult("modulus_vanishes", bool(small_ratio.max() < 1e-4),
                                float(small_ratio.max()), None,
                                "empirical h at |n - m| ~ 1e-6"))
    if cond.h is not None:
        clauses.append(_worst("modulus_declared", ratio - cond.h(dist), smp,
                              "|W(F,n) - W(F,m)| <= h(|n-m|) W(F,n)"))
    return clauses, fitted


def _check_nematic(V, rng, m):
    cond = V.conditions
    dim, s, c = cond.dim, cond.s, cond.c
    z = _random_directors(rng, m, dim)
    zeta = projection(z) @ rng.normal(scale=2.0, size=(m, dim, dim))
    vals = np.asarray(V(z, zeta))
    smp = {"z": z, "zeta": zeta}
    nz = _fro(zeta)
    # a degenerate quadratic form gets an astronomically large declared constant
    finite_c = bool(np.isfinite(c) and c < 1e100)
    return [
        ClauseResult("growth_constant_finite", finite_c, float(c), None,
                     "coercivity needs a finite constant c"),
        _worst("nonnegative", -vals, smp),
        _worst("head_to_tail", np.abs(np.asarray(V(-z, -zeta)) - vals), smp, "V(z, zeta) = V(-z, -zeta)"),
        _worst("growth_lower", nz**s / c - c - vals, smp, f"c = {c:.6g}"),
        _worst("growth_upper", vals - (c * nz**s + c), smp, f"c = {c:.6g}"),
    ]


def check_conditions(density, sample_count=10_000, seed=0):
    """Monte-Carlo check of the growth, symmetry and continuity hypotheses.

    Returns
    -------
    ConditionReport
        One clause per hypothesis with the worst sample found. For
        mechanical densities the report also carries an empirical
        modulus ``h`` as ``[lo, hi, max ratio]`` bins of ``|n - m|``.
    """
    rng = np.random.default_rng(seed)
    if isinstance(density, MechanicalDensity):
        clauses, fitted = _check_mechanical(density, rng, sample_count)
        return ConditionReport(density.name, clauses, fitted)
    if isinstance(density, NematicDensity):
        return ConditionReport(density.name, _check_nematic(density, rng, sample_count))
    raise TypeError("expected a MechanicalDensity or NematicDensity")


def density_from_config(block):
    """Build a density from a key-value block.

    ``block["kind"]`` selects the factory; remaining keys are its keyword
    arguments. Matrices are nested lists. Recognized kinds:

    ``w0_compressible``  p, a, b, dim, q
    ``nematic_mechanical``  base (nested block), alpha
    ``incompressible``  base (nested block), det_tol
    ``double_well``  A, B, theta ([a, b]), kappa, n0, eps, p
    ``oseen_frank``  K1, K2, K3, K4
    ``one_constant``  K, dim
    ``tangent_double_well``  beta (planar wells), K, eps, s

    Raises
    ------
    ValueError
        Unknown kind, unknown keys or invalid parameters.
    """
    if not isinstance(block, dict) or "kind" not in block:
        raise ValueError("model block must be a mapping with a 'kind' key")
    kw = {k: v for k, v in block.items() if k != "kind"}
    kind = block["kind"]
    allowed = {
        "w0_compressible": {"p", "a", "b", "dim", "q"},
        "nematic_mechanical": {"base", "alpha"},
        "incompressible": {"base", "det_tol"},
        "double_well": {"A", "B", "theta", "kappa", "n0", "eps", "p"},
        "oseen_frank": {"K1", "K2", "K3", "K4"},
        "one_constant": {"K", "dim"},
        "tangent_double_well": {"beta", "K", "eps", "s"},
    }
    if kind not in allowed:
        raise ValueError(f"unknown model kind {kind!r}")
    extra = set(kw) - allowed[kind]
    if extra:
        raise ValueError(f"unknown keys for {kind}: {sorted(extra)}")
    if kind == "w0_compressible":
        return make_w0_compressible(**kw)
    if kind == "nematic_mechanical":
        return make_nematic_mechanical(density_from_config(kw["base"]), float(kw["alpha"]))
    if kind == "incompressible":
        base = density_from_config(kw["base"])
        return make_incompressible(base, kw.get("det_tol", INCOMPRESSIBLE_TOL))
    if kind == "double_well":
        if "A" not in kw or "B" not in kw:
            raise ValueError("double_well needs wells A and B")
        if "theta" in kw:
            kw["theta"] = tuple(kw["theta"])
        return make_double_well(**kw)
    if kind == "oseen_frank":
        return make_oseen_frank(**kw)
    if kind == "one_constant":
        return make_one_constant(**kw)
    beta = float(kw.pop("beta", 1.0))
    return make_tangent_double_well(planar_tangent_wells(beta), **kw)
