"""Command-line front end.

Every subcommand reads a JSON experiment file and writes its artifacts into
an output directory. Files are only written once the whole computation has
finished, so a failed run leaves no partial output.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .convexify import (EnvelopeApprox, MatrixGrid, polyconvexify_lower, rank_one_convexify,
                        tangential_quasiconvexify)
from .energy_models import (MechanicalDensity, NematicDensity, check_conditions,
                            density_from_config)
from .fields import AdmissiblePair, DirectorField, write_pair
from .geometry import GridDeformation, is_ap_member, read_deformation
from .mesh import annulus_mesh, disk_mesh, rectangle_mesh
from .recovery import RecoveryConfig, build_recovery_sequence, minimize_alternating
from .tensor_core import Director

log = logging.getLogger("nemrelax")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    """Invalid or incomplete experiment description."""


class NumericalFailure(Exception):
    """A module flagged a failed computation; outputs are still written."""


# ---------------------------------------------------------------- config


class Experiment:
    """Parsed experiment file.

    Parameters
    ----------
    data : dict
        Top-level keys: ``model``, ``mesh``, ``grid``, ``pair``,
        ``envelopes``, ``operation``, ``seed``, ``threads``.
    base_dir : str
        Directory against which relative file paths are resolved.
    """

    def __init__(self, data, base_dir="."):
        if not isinstance(data, dict):
            raise ConfigError("experiment file must hold a JSON object")
        self.data = data
        self.base_dir = base_dir
        self.seed = int(data.get("seed", 0))
        self.threads = int(data.get("threads", 1))
        self.operation = dict(data.get("operation", {}))

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        return cls(data, os.path.dirname(os.path.abspath(path)))

    def path(self, p):
        full = p if os.path.isabs(p) else os.path.join(self.base_dir, p)
        if not os.path.exists(full):
            raise ConfigError(f"referenced file does not exist: {p}")
        return full

    def require(self, key):
        if key not in self.data:
            raise ConfigError(f"config lacks a {key!r} block")
        return self.data[key]

    def density(self, key, cls):
        model = self.require("model")
        if key not in model:
            raise ConfigError(f"model block lacks {key!r}")
        try:
            d = density_from_config(model[key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"model {key}: {exc}") from None
        if not isinstance(d, cls):
            raise ConfigError(f"model {key} has the wrong type")
        return d

    def optional_density(self, key, cls):
        model = self.data.get("model", {})
        return self.density(key, cls) if key in model else None


def build_grid(block):
    """Matrix grid from ``{lo, hi, n}`` or ``{center, half_width, n}``."""
    try:
        mask = bool(block.get("mask_det", True))
        if "center" in block:
            return MatrixGrid.around(np.array(block["center"], dtype=float), block["half_width"],
                                     block["n"], mask)
        return MatrixGrid(block["lo"], block["hi"], block["n"], mask)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"grid block: {exc}") from None


def build_mesh(block, exp):
    kind = block.get("kind", "rectangle")
    try:
        if kind == "rectangle":
            x0, x1, y0, y1 = block.get("bounds", [0.0, 1.0, 0.0, 1.0])
            n = block.get("n", 16)
            nx, ny = (n, n) if np.isscalar(n) else n
            return rectangle_mesh(x0, x1, y0, y1, int(nx), int(ny))
        if kind == "disk":
            return disk_mesh(block.get("radius", 1.0), int(block.get("n_rings", 8)), block.get("n_theta"))
        if kind == "annulus":
            return annulus_mesh(block["r_in"], block.get("r_out", 1.0), int(block.get("n_rings", 32)),
                                int(block.get("n_theta", 64)), bool(block.get("graded", True)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"mesh block: {exc}") from None
    raise ConfigError(f"unknown mesh kind {kind!r}")


def _map_values(name, pts, block):
    if name == "identity":
        return pts.copy()
    if name == "affine":
        F = np.asarray(block.get("F", np.eye(2)), dtype=float)
        c = np.asarray(block.get("c", [0.0, 0.0]), dtype=float)
        return pts @ F.T + c
    if name == "cavitation":
        r = np.linalg.norm(pts, axis=1, keepdims=True)
        if np.any(r == 0):
            raise ConfigError("cavitation map needs a mesh without the origin (use an annulus)")
        return (1 + r) * pts / r
    if name == "complex_square":
        x, y = pts[:, 0], pts[:, 1]
        return np.column_stack([x * x - y * y, 2 * x * y])
    raise ConfigError(f"unknown map {name!r}")


def build_deformation(block, exp):
    """Deformation from ``{file}`` or ``{mesh, map, ...}``."""
    if "file" in block:
        try:
            with open(exp.path(block["file"])) as f:
                return read_deformation(f)
        except ValueError as exc:
            raise ConfigError(f"field file: {exc}") from None
    mesh = build_mesh(block.get("mesh", {}), exp)
    vals = _map_values(block.get("map", "identity"), mesh.points, block)
    amp = float(block.get("perturb", 0.0))
    if amp > 0:
        rng = np.random.default_rng(exp.seed)
        inner = ~mesh.boundary_nodes()
        vals = vals + amp * inner[:, None] * rng.uniform(-1, 1, size=vals.shape)
    return GridDeformation(mesh, vals)


def build_pair(block, exp):
    """Admissible pair; the director lives on a lattice covering the image."""
    u = build_deformation(block, exp)
    h = float(block.get("director_h", _mesh_h(u)))
    lo = u.values.min(axis=0) - h
    hi = u.values.max(axis=0) + h
    m = np.asarray(block.get("director", [1.0, 0.0]), dtype=float)
    n = DirectorField.constant(m, (lo[0], lo[1], hi[0], hi[1]), h)
    amp = float(block.get("director_perturb", 0.0))
    if amp > 0:
        rng = np.random.default_rng(exp.seed + 1)
        ang = amp * rng.uniform(-1, 1, size=n.shape)
        c, s = np.cos(ang), np.sin(ang)
        v = n.vectors
        n = DirectorField(n.origin, n.h, np.stack([c * v[..., 0] - s * v[..., 1],
                                                   s * v[..., 0] + c * v[..., 1]], axis=-1))
    return AdmissiblePair(u, n)


def _mesh_h(u):
    m = u.mesh
    e = m.points[m.cells[:, 1]] - m.points[m.cells[:, 0]]
    return float(np.min(np.linalg.norm(e, axis=1)))


def _director_of(pair):
    return Director(pair.n.vectors.reshape(-1, 2)[0])


def build_envelope_W(block, W, m, exp):
    if block is None:
        return None
    if "file" in block:
        return EnvelopeApprox.from_csv(exp.path(block["file"]))
    grid = build_grid(block.get("grid", {}))
    env = rank_one_convexify(W, m, grid, int(block.get("max_iters", 50)), int(block.get("n_angles", 4)),
                             float(block.get("tol", 1e-9)), exp.threads, int(block.get("lattice_order", 2)))
    if not env.converged:
        log.warning("mechanical envelope did not converge in %d sweeps", env.iterations)
    return env


def build_envelope_V(block, V, z, exp):
    if block is None:
        return None
    if "file" in block:
        return EnvelopeApprox.from_csv(exp.path(block["file"]))
    grid = build_grid(dict(block.get("grid", {}), mask_det=False))
    return tangential_quasiconvexify(V, z, grid, int(block.get("max_iters", 50)), int(block.get("n_angles", 4)),
                                     float(block.get("tol", 1e-9)), exp.threads,
                                     int(block.get("lattice_order", 2)))


# ---------------------------------------------------------------- outputs


class Outputs:
    """Buffered artifacts, written together after a successful run."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.files = {}

    def add(self, name, text):
        self.files[name] = text

    def add_json(self, name, obj):
        self.add(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def commit(self):
        os.makedirs(self.out_dir, exist_ok=True)
        for name, text in self.files.items():
            tmp = os.path.join(self.out_dir, "." + name + ".tmp")
            with open(tmp, "w", newline="\n") as f:
                f.write(text)
            os.replace(tmp, os.path.join(self.out_dir, name))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


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


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _envelope_csv(env):
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "e.csv")
        env.to_csv(p)
        with open(p) as f:
            return f.read()


# ---------------------------------------------------------------- commands


def cmd_envelope(exp, out, args):
    W = exp.density("W", MechanicalDensity)
    grid = build_grid(exp.require("grid"))
    op = exp.operation
    m = Director(op["director"]) if "director" in op else None
    sl = op.get("slice", {})
    axes = tuple(sl.get("axes", (0, 1)))
    fixed = list(sl.get("index", [k // 2 for k in grid.n]))
    if len(axes) != 2 or len(set(axes)) != 2 or any(a not in range(4) for a in axes):
        raise ConfigError("slice axes must be two distinct entries in 0..3")
    stride = int(sl.get("stride", 1))

    env = rank_one_convexify(W, m, grid, int(op.get("max_iters", 50)), int(op.get("n_angles", 4)),
                             float(op.get("tol", 1e-9)), exp.threads, int(op.get("lattice_order", 2)))
    hist = env.history
    monotone = all(h >= -1e-12 for h in hist)

    # slice nodes, then the polyconvex bound on them
    idx = []
    for i in range(0, grid.n[axes[0]], stride):
        for j in range(0, grid.n[axes[1]], stride):
            k = list(fixed)
            k[axes[0]], k[axes[1]] = i, j
            idx.append(tuple(k))
    idx = np.array(idx, dtype=int)
    usable = grid.mask()[tuple(idx.T)]
    lower = np.full(grid.n, np.nan)
    if op.get("lower", True) and usable.any():
        lower = polyconvexify_lower(W, m, grid, nodes=idx[usable], certify=bool(op.get("certify", True)),
                                    seed=exp.seed)
    env.lower = lower
    nodes = grid.nodes().reshape(grid.n + (4,))
    rows = []
    gaps, viol = [], 0.0
    for k in idx:
        t = tuple(k)
        up, lo_, w = env.upper[t], lower[t], env.W[t]
        gap = up - lo_ if np.isfinite(up) and np.isfinite(lo_) else math.nan
        if np.isfinite(gap):
            gaps.append(gap)
            viol = max(viol, lo_ - up)
        if np.isfinite(w):
            viol = max(viol, up - w)
        rows.append([k[axes[0]], k[axes[1]], *nodes[t], w, up, lo_, gap])
    out.add("envelope.csv", _envelope_csv(env))
    out.add("slice.csv", _csv(["i", "j", "F11", "F12", "F21", "F22", "W", "upper", "lower", "gap"], rows))
    summary = {
        "grid": grid.spec(),
        "iterations": env.iterations,
        "converged": env.converged,
        "monotone": monotone,
        "sweep_decreases": hist,
        "slice_axes": list(axes),
        "slice_index": fixed,
        "max_gap": max(gaps) if gaps else math.nan,
        "mean_gap": float(np.mean(gaps)) if gaps else math.nan,
        "ordering_violation": viol,
    }
    out.add_json("summary.json", summary)
    if not env.converged:
        raise NumericalFailure(f"lamination did not converge in {env.iterations} sweeps")


def cmd_tqc(exp, out, args):
    V = exp.density("V", NematicDensity)
    op = exp.operation
    z = np.asarray(op.get("z", [1.0, 0.0]), dtype=float)
    grid = build_grid(dict(exp.require("grid"), mask_det=False))
    env = tangential_quasiconvexify(V, z, grid, int(op.get("max_iters", 50)), int(op.get("n_angles", 4)),
                                    float(op.get("tol", 1e-9)), exp.threads, int(op.get("lattice_order", 2)))
    zz = env.director.components
    z0 = np.zeros((2, 2))
    rng = np.random.default_rng(exp.seed)
    # restriction consistency at random in-grid queries
    lo, hi = np.array(grid.lo), np.array(grid.hi)
    Q = rng.uniform(lo, hi, size=(100, 4)).reshape(-1, 2, 2)
    P = env.projector
    inside = grid.contains(P @ Q)
    diff = 0.0
    if inside.any():
        diff = float(np.abs(env.value(Q[inside]) - env.value(P @ Q[inside])).max())
    summary = {
        "z": zz.tolist(),
        "iterations": env.iterations,
        "converged": env.converged,
        "envelope_at_zero": float(env.value(z0)),
        "V_at_zero": float(V(zz, z0)),
        "restriction_max_diff": diff,
        "max_drop": float(np.max(np.where(np.isfinite(env.W), env.W - env.upper, 0.0))),
    }
    out.add("tqc.csv", _envelope_csv(env))
    out.add_json("summary.json", summary)
    if not env.converged:
        raise NumericalFailure(f"lamination did not converge in {env.iterations} sweeps")


def cmd_apcheck(exp, out, args):
    u = build_deformation(exp.require("field"), exp)
    op = exp.operation
    rep = is_ap_member(u, tol=float(op.get("tol", 1e-3)), q=float(op.get("q", 2.0)),
                       quad_order=int(op.get("quad_order", 2)))
    out.add_json("apcheck.json", rep.as_dict())


def _recovery_config(exp, args):
    op = dict(exp.operation)
    op.pop("raster_h", None)
    try:
        cfg = RecoveryConfig(**op)
    except TypeError as exc:
        raise ConfigError(f"operation block: {exc}") from None
    cfg.seed = exp.seed
    return cfg


def cmd_recover(exp, out, args):
    W = exp.density("W", MechanicalDensity)
    V = exp.density("V", NematicDensity)
    pair = build_pair(exp.require("pair"), exp)
    cfg = _recovery_config(exp, args)
    envs = exp.data.get("envelopes", {})
    m = _director_of(pair)
    envW = build_envelope_W(envs.get("W"), W, m, exp)
    envV = build_envelope_V(envs.get("V"), V, m.components, exp)
    dumps = {}

    def dump(j, pj):
        buf = io.StringIO()
        write_pair(pj, buf)
        dumps[f"step_{j:02d}.txt"] = buf.getvalue()

    _, rep = build_recovery_sequence(pair, W, V, envW, envV, cfg, exp.operation.get("raster_h"),
                                     dump if args.dump_steps else None)
    out.add("recover.csv", rep.to_csv())
    for name, text in dumps.items():
        out.add(name, text)
    out.add_json("recover.json", {
        "I": rep.I_limit, "I_relaxed": rep.I_relaxed_limit, "area": rep.area,
        "initial_gap": rep.I_limit - rep.I_relaxed_limit, "notes": rep.notes,
        "balls": [[{"center": b.center, "half": b.half, "k": b.k, "accepted": b.accepted,
                    "energy_after": b.energy_after, "bound": b.bound} for b in step] for step in rep.balls],
    })


def cmd_minimize(exp, out, args):
    W = exp.density("W", MechanicalDensity)
    V = exp.density("V", NematicDensity)
    pair = build_pair(exp.require("pair"), exp)
    op = exp.operation
    selector = op.get("selector", "I")
    if selector not in ("I", "I*"):
        raise ConfigError("selector must be 'I' or 'I*'")
    envs = exp.data.get("envelopes", {})
    m = _director_of(pair)
    envW = build_envelope_W(envs.get("W"), W, m, exp)
    envV = build_envelope_V(envs.get("V"), V, m.components, exp)
    final, rep = minimize_alternating(pair, W, V, selector, int(op.get("iterations", 20)), envW, envV,
                                      float(op.get("det_floor", 1e-6)), int(op.get("inner_steps", 25)),
                                      op.get("raster_h"))
    out.add("minimize.csv", _csv(["iteration", "objective"], list(enumerate(rep.objective))))
    buf = io.StringIO()
    write_pair(final, buf)
    out.add("final_pair.txt", buf.getvalue())
    out.add_json("minimize.json", {"final": rep.final.as_dict(), "stagnated": rep.stagnated,
                                   "u_steps": rep.u_steps, "n_steps": rep.n_steps,
                                   "objective_start": rep.objective[0], "objective_end": rep.objective[-1]})
    if not math.isfinite(rep.objective[-1]):
        raise NumericalFailure("objective is not finite")


def cmd_validate(exp, out, args):
    model = exp.require("model")
    samples = int(exp.operation.get("samples", 10_000))
    reports = {}
    for key in sorted(model):
        d = exp.density(key, (MechanicalDensity, NematicDensity))
        reports[key] = check_conditions(d, samples, seed=exp.seed).as_dict()
    out.add_json("validate.json", {"passed": all(r["passed"] for r in reports.values()), "models": reports})


COMMANDS = {
    "envelope": cmd_envelope,
    "tqc": cmd_tqc,
    "apcheck": cmd_apcheck,
    "recover": cmd_recover,
    "minimize": cmd_minimize,
    "validate": cmd_validate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="nemrelax", description="Relaxation experiments for nematic elastomer energies.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment file")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("--threads", type=int, default=None, help="overrides the config thread count")
        s.add_argument("--dump-steps", action="store_true", help="write every recovery step as a field file")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = Outputs(args.out)
    try:
        exp = Experiment.load(args.config)
        if args.seed is not None:
            exp.seed = args.seed
        if args.threads is not None:
            exp.threads = args.threads
        COMMANDS[args.command](exp, out, args)
    except ConfigError as exc:
        print(f"nemrelax: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        out.commit()
        print(f"nemrelax: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ArithmeticError, AssertionError, np.linalg.LinAlgError) as exc:
        print(f"nemrelax: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    out.commit()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
