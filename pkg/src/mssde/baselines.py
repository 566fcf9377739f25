"""Comparison baselines: coarse-grid DNS, DMD, and POD-SINDy.

All baselines are matched to the learned model's total latent dimension:
DMD rank and the POD basis size both equal n_zeta + n_eta.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .datagen import DataError, GridSpec, Trajectory, integrate_rk4, make_rhs


@dataclass
class DmdModel:
    rank: int
    a_tilde: np.ndarray     # [r, r] reduced operator
    modes: np.ndarray       # [n_y, r] POD basis U
    lam: float


@dataclass
class SindyModel:
    basis: np.ndarray       # [n_y, r] orthonormal POD basis
    order: int
    xi: np.ndarray          # [n_lib, r] coefficients
    threshold: float
    converged: bool = True
    truncated: bool = field(default=False)


# -- coarse DNS ----------------------------------------------------------------


def coarse_dns(problem: str, fine_grid: GridSpec, n_coarse: int, y0_fine: np.ndarray,
               times, params: dict) -> Trajectory:
    """Integrate the generating PDE on a coarsened mesh, then cubic-interpolate
    each saved state back to the fine grid for metric evaluation."""
    if fine_grid.dim != 1:
        raise DataError("coarse DNS baseline implemented for 1D problems")
    n_fine = fine_grid.points[0]
    if n_fine % n_coarse != 0:
        raise DataError(f"coarse size {n_coarse} does not divide fine size {n_fine}")
    stride = n_fine // n_coarse
    coarse = GridSpec(1, (n_coarse,), fine_grid.bounds, fine_grid.n_fields, fine_grid.periodic)
    y0 = np.asarray(y0_fine, dtype=float)[::stride]
    rhs = make_rhs(problem, coarse, params)
    traj = integrate_rk4(rhs, y0, np.asarray(times, dtype=float))
    if stride == 1:
        return traj
    xc, xf = coarse.coords(), fine_grid.coords()
    states = np.empty((len(traj.times), n_fine))
    for i, u in enumerate(traj.states):
        if fine_grid.periodic:
            period = fine_grid.bounds[0][1] - fine_grid.bounds[0][0]
            spl = CubicSpline(np.append(xc, xc[0] + period), np.append(u, u[0]), bc_type="periodic")
        else:
            spl = CubicSpline(xc, u)
        states[i] = spl(xf)
    return Trajectory(traj.times, states)


# -- DMD -------------------------------------------------------------------------


def dmd_fit(snapshots: np.ndarray, r: int, lam: float = 0.01) -> DmdModel:
    """Tikhonov-regularized DMD on column snapshots X in R^{n_y x n_t}."""
    x = np.asarray(snapshots, dtype=float)
    if x.shape[1] < 2:
        raise ValueError("DMD needs at least two snapshots")
    x1, x2 = x[:, :-1], x[:, 1:]
    u, s, vt = np.linalg.svd(x1, full_matrices=False)
    eff = int(np.sum(s > 1e-12 * s[0]))
    if eff < r:
        warnings.warn(f"snapshot rank {eff} below requested {r}; shrinking", stacklevel=2)
        r = eff
    u, s, v = u[:, :r], s[:r], vt[:r].T
    a_tilde = u.T @ x2 @ v @ np.diag(s / (s**2 + lam))
    return DmdModel(r, a_tilde, u, lam)


def dmd_predict(model: DmdModel, y0: np.ndarray, n_steps: int, times=None) -> Trajectory:
    """Roll the reduced linear map forward and lift through the POD modes."""
    z = model.modes.T @ np.asarray(y0, dtype=float)
    states = np.empty((n_steps + 1, model.modes.shape[0]))
    states[0] = model.modes @ z
    for k in range(n_steps):
        z = model.a_tilde @ z
        states[k + 1] = model.modes @ z
    t = np.arange(n_steps + 1, dtype=float) if times is None else np.asarray(times, dtype=float)
    return Trajectory(t, states)


# -- POD-SINDy --------------------------------------------------------------------


def poly_library(z: np.ndarray, order: int) -> np.ndarray:
    """Polynomial features of latent rows: bias, linear, and (order 2) all
    quadratic monomials including cross terms."""
    if order not in (1, 2):
        raise ValueError("polynomial order must be 1 or 2")
    n, r = z.shape
    cols = [np.ones((n, 1)), z]
    if order == 2:
        cols += [(z[:, i] * z[:, j])[:, None] for i in range(r) for j in range(i, r)]
    return np.concatenate(cols, axis=1)


def _central_diff(z: np.ndarray, dt: float) -> np.ndarray:
    dz = np.empty_like(z)
    dz[1:-1] = (z[2:] - z[:-2]) / (2 * dt)
    dz[0] = (z[1] - z[0]) / dt
    dz[-1] = (z[-1] - z[-2]) / dt
    return dz


def sindy_fit(snapshots: np.ndarray, r: int, order: int, threshold: float, dt: float,
              max_sweeps: int = 20) -> SindyModel:
    """POD projection + sequentially thresholded least squares (STLSQ)."""
    x = np.asarray(snapshots, dtype=float)            # [n_y, n_t]
    u, _, _ = np.linalg.svd(x, full_matrices=False)
    basis = u[:, :r]
    z = (basis.T @ x).T                               # [n_t, r]
    dz = _central_diff(z, dt)
    theta = poly_library(z, order)
    xi = np.linalg.lstsq(theta, dz, rcond=None)[0]
    converged = False
    for _ in range(max_sweeps):
        mask = np.abs(xi) >= threshold
        new_xi = np.zeros_like(xi)
        for j in range(r):
            cols = np.flatnonzero(mask[:, j])
            if cols.size:
                new_xi[cols, j] = np.linalg.lstsq(theta[:, cols], dz[:, j], rcond=None)[0]
        if np.array_equal((np.abs(new_xi) >= threshold), mask) and np.allclose(new_xi, xi):
            xi = new_xi
            converged = True
            break
        xi = new_xi
    xi[np.abs(xi) < threshold] = 0.0
    return SindyModel(basis, order, xi, threshold, converged)


def sindy_predict(model: SindyModel, y0: np.ndarray, times) -> Trajectory:
    """RK4 rollout of the learned latent ODE, lifted through the POD basis."""
    z0 = model.basis.T @ np.asarray(y0, dtype=float)

    def rhs(z):
        return poly_library(z[None, :], model.order)[0] @ model.xi

    times = np.asarray(times, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            traj = integrate_rk4(rhs, z0, times)
            zs = traj.states
        except DataError:
            # blow-up: keep whatever prefix integrates, flag the truncation
            zs = [z0]
            z = z0
            for t0, t1 in zip(times[:-1], times[1:]):
                try:
                    z = integrate_rk4(rhs, z, np.array([t0, t1])).states[-1]
                except DataError:
                    break
                zs.append(z)
            zs = np.asarray(zs)
            model.truncated = True
    states = zs @ model.basis.T
    return Trajectory(times[: len(states)], states)
