"""Ground-truth PDE trajectory generation and dataset persistence.

Generators: 1D advection and KdV on periodic grids, 2D viscous Burgers with
zero Dirichlet boundaries. Time integration is classical RK4. Datasets are
stored in the "MST1" binary format with a JSON sidecar for metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng


class DataError(ValueError):
    """Malformed dataset file or invalid generator input."""


@dataclass
class GridSpec:
    dim: int                      # spatial dimension, 1 or 2
    points: tuple[int, ...]       # points per axis
    bounds: tuple[tuple[float, float], ...]
    n_fields: int = 1
    periodic: bool = True

    @property
    def n_y(self) -> int:
        return self.n_fields * int(np.prod(self.points))

    def spacing(self, axis=0) -> float:
        lo, hi = self.bounds[axis]
        n = self.points[axis]
        return (hi - lo) / n if self.periodic else (hi - lo) / (n - 1)

    def coords(self, axis=0) -> np.ndarray:
        lo, hi = self.bounds[axis]
        n = self.points[axis]
        if self.periodic:
            return lo + (hi - lo) * np.arange(n) / n
        return np.linspace(lo, hi, n)


@dataclass
class Trajectory:
    times: np.ndarray             # [n_t], strictly increasing
    states: np.ndarray            # [n_t, n_y]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if len(self.times) != len(self.states):
            raise DataError("times/states length mismatch")


@dataclass
class Dataset:
    grid: GridSpec
    trajectories: list[Trajectory]
    splits: list[str]             # per-trajectory label: train/val/test
    sigma: float = 0.0
    meta: dict = field(default_factory=dict)

    def split(self, label) -> list[Trajectory]:
        return [t for t, s in zip(self.trajectories, self.splits) if s == label]


# -- right-hand sides ---------------------------------------------------------


def advect_rhs(u: np.ndarray, c: float, dx: float) -> np.ndarray:
    """du_j/dt = -c (u_{j+1} - u_{j-1}) / (2 dx), periodic."""
    if u.shape[-1] < 3:
        raise DataError("advect_rhs needs at least 3 gridpoints")
    return -c * (np.roll(u, -1, -1) - np.roll(u, 1, -1)) / (2 * dx)


def kdv_rhs(u: np.ndarray, nu: float, dx: float) -> np.ndarray:
    """KdV with centered first difference and one-sided third difference, periodic."""
    if u.shape[-1] < 5:
        raise DataError("kdv_rhs needs at least 5 gridpoints")
    up1 = np.roll(u, -1, -1)
    um1 = np.roll(u, 1, -1)
    up2 = np.roll(u, -2, -1)
    return -u * (up1 - um1) / (2 * dx) - nu * (up2 - 3 * up1 + 3 * u - um1) / dx**3


def burgers2d_rhs(u: np.ndarray, nu: float, dx: float) -> np.ndarray:
    """2D viscous Burgers on a square grid with zero Dirichlet boundaries.

    `u` is [n, n]; boundary rows/columns are held fixed (zero time derivative).
    """
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise DataError(f"burgers2d_rhs needs a square grid, got {u.shape}")
    out = np.zeros_like(u)
    c = u[1:-1, 1:-1]
    dudx = (u[2:, 1:-1] - u[:-2, 1:-1]) / (2 * dx)
    dudy = (u[1:-1, 2:] - u[1:-1, :-2]) / (2 * dx)
    lap = (
        u[2:, 1:-1] - 2 * c + u[:-2, 1:-1] + u[1:-1, 2:] - 2 * c + u[1:-1, :-2]
    ) / dx**2
    out[1:-1, 1:-1] = -c * (dudx + dudy) + nu * lap
    return out


def integrate_rk4(rhs, u0: np.ndarray, times: np.ndarray) -> Trajectory:
    """Classical 4th-order Runge-Kutta at the given (uniform) times."""
    times = np.asarray(times, dtype=np.float64)
    states = np.empty((len(times),) + u0.shape)
    states[0] = u0
    u = u0.astype(np.float64)
    for i in range(len(times) - 1):
        dt = times[i + 1] - times[i]
        k1 = rhs(u)
        k2 = rhs(u + 0.5 * dt * k1)
        k3 = rhs(u + 0.5 * dt * k2)
        k4 = rhs(u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(u)):
            raise DataError(f"integration blew up at step {i + 1}")
        states[i + 1] = u
    return Trajectory(times, states.reshape(len(times), -1))


def corrupt(traj: Trajectory, sigma: float, rng: Rng) -> Trajectory:
    """Add zero-mean i.i.d. Gaussian observation noise."""
    if sigma < 0:
        raise DataError("noise standard deviation must be nonnegative")
    if sigma == 0:
        return Trajectory(traj.times.copy(), traj.states.copy())
    return Trajectory(traj.times.copy(), traj.states + sigma * rng.normal(traj.states.shape))


# -- MST1 binary format --------------------------------------------------------
#
# magic 'MST1', version u32, then little-endian u32 fields:
#   d, d_u, points per axis (d values), n_traj, n_t
# f64 domain bounds (2 per axis), u32 periodic flag,
# f64 times [n_t], f64 payload [trajectory][time][state].
# The JSON sidecar (<path>.json) carries sigma, split labels, and generator
# parameters.

_MAGIC = b"MST1"
_VERSION = 1


def write_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    g = ds.grid
    n_t = len(ds.trajectories[0].times) if ds.trajectories else 0
    for t in ds.trajectories:
        if len(t.times) != n_t:
            raise DataError("all trajectories in a dataset must share n_t")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<II", g.dim, g.n_fields))
        f.write(struct.pack(f"<{g.dim}I", *g.points))
        f.write(struct.pack("<II", len(ds.trajectories), n_t))
        for lo, hi in g.bounds:
            f.write(struct.pack("<dd", lo, hi))
        f.write(struct.pack("<I", 1 if g.periodic else 0))
        if ds.trajectories:
            f.write(ds.trajectories[0].times.astype("<f8").tobytes())
            for t in ds.trajectories:
                f.write(t.states.astype("<f8").tobytes())
    sidecar = {
        "sigma": ds.sigma,
        "splits": ds.splits,
        "meta": ds.meta,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read dataset: {e}") from e
    if raw[:4] != _MAGIC:
        raise DataError(f"bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise DataError("truncated dataset file")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != _VERSION:
        raise DataError(f"unsupported MST1 version {version}")
    dim, d_u = take("<II")
    points = take(f"<{dim}I")
    n_traj, n_t = take("<II")
    bounds = tuple(take("<dd") for _ in range(dim))
    (periodic,) = take("<I")
    grid = GridSpec(dim, tuple(points), bounds, d_u, bool(periodic))
    n_y = grid.n_y
    need = n_t * 8 + n_traj * n_t * n_y * 8
    if off + need > len(raw):
        raise DataError("truncated dataset payload")
    times = np.frombuffer(raw, dtype="<f8", count=n_t, offset=off).copy()
    off += n_t * 8
    trajs = []
    for _ in range(n_traj):
        states = np.frombuffer(raw, dtype="<f8", count=n_t * n_y, offset=off).copy()
        off += n_t * n_y * 8
        trajs.append(Trajectory(times.copy(), states.reshape(n_t, n_y)))
    try:
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    except OSError:
        sidecar = {"sigma": 0.0, "splits": ["train"] * n_traj, "meta": {}}
    return Dataset(grid, trajs, sidecar["splits"], float(sidecar["sigma"]), sidecar.get("meta", {}))


# -- problem presets -----------------------------------------------------------
#
# Desk-scale presets shrink the grids while keeping CFL-safe time steps;
# they are named configurations, never silent defaults.

PRESETS = {
    "advection": dict(
        problem="advection", n_y=200, bounds=(0.0, 1.0), c=1.0,
        t_end=1.0, dt=0.0005, save_every=20,          # 101 saved frames
        sigma=0.001, n_train=20, n_val=5, n_test=5,
        test_horizon=0.2,
    ),
    "kdv": dict(
        problem="kdv", n_y=250, bounds=(0.0, 10.0), nu=0.02,
        t_end=1.0, dt=0.0005, save_every=20,
        sigma=0.01, n_train=10, n_val=5, n_test=5,
        test_horizon=0.2,
    ),
    "burgers2d": dict(
        problem="burgers2d", n_y=64, bounds=(0.0, 1.0), nu=0.005,
        t_end=1.0, dt=0.001, save_every=20,
        sigma=0.001, n_train=10, n_val=3, n_test=3,
        test_horizon=0.2,
    ),
}


def _advection_ic(grid: GridSpec, rng: Rng) -> np.ndarray:
    w = rng.uniform(0.01, 0.02)
    x = grid.coords(0)
    return np.exp(-((x / w) ** 2)) + np.exp(-(((x - 1.0) / w) ** 2))  # periodic image


def _kdv_ic(grid: GridSpec, rng: Rng) -> np.ndarray:
    a = 2.0 + 0.1 * rng.normal()
    s = 1.0 + 0.1 * rng.normal()
    x = grid.coords(0)
    return a * np.cos(np.pi * x) * np.exp(-((x - 7.5) ** 2) / s**2)


def _burgers_ic(grid: GridSpec, rng: Rng) -> np.ndarray:
    a = 1.0 + 0.1 * rng.normal()
    s = 0.2 + 0.01 * rng.normal()
    x = grid.coords(0)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    u = a * np.exp(-((xx - 0.3) ** 2 + (yy - 0.3) ** 2) / s**2)
    u[0, :] = u[-1, :] = u[:, 0] = u[:, -1] = 0.0
    return u


def make_rhs(problem: str, grid: GridSpec, params: dict):
    """Right-hand side of a named problem on the given grid."""
    dx = grid.spacing(0)
    if problem == "advection":
        return lambda u: advect_rhs(u, params["c"], dx)
    if problem == "kdv":
        return lambda u: kdv_rhs(u, params["nu"], dx)
    if problem == "burgers2d":
        return lambda u: burgers2d_rhs(u, params["nu"], dx)
    raise DataError(f"unknown problem {problem!r}")


def make_grid(cfg: dict) -> GridSpec:
    if cfg["problem"] == "burgers2d":
        n = cfg["n_y"]
        b = tuple(cfg["bounds"])
        return GridSpec(2, (n, n), (b, b), 1, periodic=False)
    return GridSpec(1, (cfg["n_y"],), (tuple(cfg["bounds"]),), 1, periodic=True)


def generate(cfg: dict, rng: Rng) -> Dataset:
    """Generate a full train/val/test dataset for a preset-style config."""
    grid = make_grid(cfg)
    problem = cfg["problem"]
    rhs = make_rhs(problem, grid, cfg)
    ic = {"advection": _advection_ic, "kdv": _kdv_ic, "burgers2d": _burgers_ic}[problem]

    n_steps = int(round(cfg["t_end"] / cfg["dt"]))
    times = np.linspace(0.0, cfg["t_end"], n_steps + 1)
    keep = np.arange(0, n_steps + 1, cfg["save_every"])

    counts = [("train", cfg["n_train"]), ("val", cfg["n_val"]), ("test", cfg["n_test"])]
    trajs, splits = [], []
    idx = 0
    for label, count in counts:
        for _ in range(count):
            sub = rng.substream(idx)
            u0 = ic(grid, sub)
            full = integrate_rk4(rhs, u0, times)
            clean = Trajectory(full.times[keep], full.states[keep])
            trajs.append(corrupt(clean, cfg["sigma"], sub.substream(1)))
            splits.append(label)
            idx += 1
    meta = {k: v for k, v in cfg.items() if not isinstance(v, (list, dict))}
    return Dataset(grid, trajs, splits, cfg["sigma"], meta)
