"""Shared fixtures and numerical oracles for the test-suite."""

import numpy as np

from nemrelax.convexify import MatrixGrid
from nemrelax.energy_models import (make_double_well, make_nematic_mechanical, make_one_constant,
                                    make_oseen_frank, make_tangent_double_well, make_w0_compressible,
                                    planar_tangent_wells)
from nemrelax.tensor_core import det, projection

D = 0.25
E12 = np.array([[0.0, 1.0], [0.0, 0.0]])
WELL_A = np.eye(2) - D * E12
WELL_B = np.eye(2) + D * E12
MID = 0.5 * (WELL_A + WELL_B)  # the identity


def double_well(**kw):
    return make_double_well(WELL_A, WELL_B, **kw)


def double_well_grid(n=17):
    return MatrixGrid([1 - 4 * D, -4 * D, -4 * D, 1 - 4 * D], [1 + 4 * D, 4 * D, 4 * D, 1 + 4 * D], n)


def exact_slice_envelope(s, t):
    """Relaxed double-well value at F = [[1 + t, s], [0, 1]] with theta(x) = x^2 + x^-2."""
    return (1 + t) ** 2 + (1 + t) ** -2 + t**2 + max(abs(s) - D, 0.0) ** 2


def kohn_strang_values(grid):
    """W = 1 + |F|^2 off the origin and 0 at it, on all grid nodes."""
    F = grid.nodes().reshape(grid.n + (4,))
    W = 1 + np.sum(F**2, axis=-1)
    W[np.all(np.abs(F) < 1e-12, axis=-1)] = 0.0
    return W


def kohn_strang_exact(grid):
    """Closed-form envelope and the region where it differs from W."""
    F = grid.nodes().reshape(grid.n + (4,))
    n2 = np.sum(F**2, axis=-1)
    dt = np.abs(F[..., 0] * F[..., 3] - F[..., 1] * F[..., 2])
    rho = np.sqrt(n2 + 2 * dt)
    region = rho <= 1 + 1e-12
    return np.where(region, 2 * rho - 2 * dt, 1 + n2), region


def mechanical_densities():
    """Every shipped mechanical density family, with a sampler of finite points."""
    return {
        "w0_2d": (make_w0_compressible(2.0, 2.0, 2.0, dim=2), 2),
        "w0_3d": (make_w0_compressible(4.0, 2.0, 2.0, dim=3), 3),
        "w0_p3": (make_w0_compressible(3.0, 3.0, 2.0, dim=2), 2),
        "nematic_3d": (make_nematic_mechanical(make_w0_compressible(4.0, 2.0, 2.0, dim=3), 2.5), 3),
        "nematic_2d": (make_nematic_mechanical(make_w0_compressible(2.0, 2.0, 2.0, dim=2), 0.6), 2),
        "double_well": (double_well(kappa=0.5, eps=0.1, p=3.0), 2),
    }


def nematic_densities():
    return {
        "one_constant_2d": (make_one_constant(1.3, dim=2), 2),
        "one_constant_3d": (make_one_constant(0.7, dim=3), 3),
        "oseen_frank": (make_oseen_frank(1.0, 0.8, 1.4, 0.1), 3),
        "tangent_double_well": (make_tangent_double_well(planar_tangent_wells(1.0), K=1.0, eps=0.25), 2),
    }


def random_positive(rng, dim, m):
    F = np.eye(dim) + 0.4 * rng.normal(size=(m, dim, dim))
    flip = det(F) < 0
    F[flip, 0, :] *= -1
    return F


def random_director(rng, dim, m):
    v = rng.normal(size=(m, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_tangent(rng, z):
    zeta = rng.normal(size=z.shape + (z.shape[-1],))
    return projection(z) @ zeta


def fd_gradient(f, X, h=1e-6):
    """Central differences of a scalar function of a matrix."""
    g = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        E = np.zeros_like(X)
        E[idx] = h
        g[idx] = (f(X + E) - f(X - E)) / (2 * h)
    return g


def gradient_errors_mechanical(W, dim, rng, m=100):
    """Relative error of the analytic F-gradient at m random finite points."""
    errs = []
    Fs = random_positive(rng, dim, m)
    ns = random_director(rng, dim, m)
    for F, n in zip(Fs, ns):
        if not np.isfinite(W(F, n)):
            continue
        ga = np.asarray(W.gradient(F, n))
        gf = fd_gradient(lambda X: W(X, n), F)
        errs.append(np.linalg.norm(ga - gf) / max(np.linalg.norm(ga), 1.0))
    return np.array(errs)


def gradient_errors_nematic(V, dim, rng, m=100):
    errs = []
    zs = random_director(rng, dim, m)
    for z in zs:
        zeta = random_tangent(rng, z)
        ga = np.asarray(V.gradient(z, zeta))
        gf = fd_gradient(lambda X: V(z, X), zeta)
        errs.append(np.linalg.norm(ga - gf) / max(np.linalg.norm(ga), 1.0))
    return np.array(errs)


# --- deformation fixtures ------------------------------------------------

def cavitation(x):
    """Radial map opening a unit cavity: x -> (1 + |x|) x / |x|."""
    r = np.linalg.norm(x, axis=1, keepdims=True)
    return (1 + r) * x / r


def cavity_flux(t, samples=4000):
    """Flux of t.g through the unit circle with the normal pointing into the cavity."""
    th = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    y = np.column_stack([np.cos(th), np.sin(th)])
    return float(np.mean(np.sum(t.g(y) * (-y), axis=1)) * 2 * np.pi)


def smooth_diffeo(x):
    """Smooth orientation-preserving self-map of the unit square fixing its boundary."""
    s = np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    v = 0.5 * np.sin(2 * np.pi * x[:, 0]) * x[:, 1] * (1 - x[:, 1])
    return x + 0.1 * np.column_stack([s, v])


def disk_twist(x):
    """1.2 times a rotation by 0.5 |x|^2."""
    a = 0.5 * np.sum(x**2, axis=1)
    c, s = np.cos(a), np.sin(a)
    return 1.2 * np.column_stack([c * x[:, 0] - s * x[:, 1], s * x[:, 0] + c * x[:, 1]])


def ellipse_map(x):
    return x @ np.array([[1.5, 0.3], [0.0, 0.7]]).T + np.array([0.2, -0.1])


def wavy_square(x):
    """Square whose boundary is pushed in and out by a small sine."""
    return x + 0.06 * np.column_stack([np.sin(2 * np.pi * x[:, 1]), np.sin(2 * np.pi * x[:, 0])])


def complex_square(x):
    return np.column_stack([x[:, 0] ** 2 - x[:, 1] ** 2, 2 * x[:, 0] * x[:, 1]])


def image_perimeter(u):
    return sum(np.linalg.norm(np.diff(np.vstack([u.values[l], u.values[l[:1]]]), axis=0), axis=1).sum()
               for l in u.mesh.boundary_loops())
