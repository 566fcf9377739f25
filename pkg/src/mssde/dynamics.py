"""Coupled macroscale/microscale latent SDE and an Euler–Maruyama integrator.

The macroscale drift applies one shared MLP to a local stencil around every
coarse-grid point (translation equivariant on periodic grids). The microscale
drift is a fully-connected network over [zeta, t, eta]; keeping eta as the
trailing input block lets a model warm-start from a smaller microscale
dimension by copying weights into the leading hyperslab.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Module
from .rng import Rng
from .scales import _SIGMA_Z_RAW0, ScaleOps


class IntegrationError(RuntimeError):
    """Non-finite state encountered while integrating the SDE."""


def _stencil_indices_1d(n, q, periodic):
    j = np.arange(n)[:, None] + np.arange(-q, q + 1)[None, :]
    return j % n if periodic else np.clip(j, 0, n - 1)


def _stencil_indices_2d(shape, q, periodic):
    h, w = shape
    ih = _stencil_indices_1d(h, q, periodic)    # [h, 2q+1]
    iw = _stencil_indices_1d(w, q, periodic)    # [w, 2q+1]
    # linear indices into the flattened plane: [h, w, (2q+1)^2]
    lin = ih[:, None, :, None] * w + iw[None, :, None, :]
    return lin.reshape(h, w, -1).reshape(h * w, -1)


class MacroDrift(Module):
    """Stencil drift f_theta: one MLP shared across all coarse-grid points."""

    def __init__(self, scales: ScaleOps, n_eta: int, rng: Rng, q: int = 2, hidden=(128, 128, 128)):
        super().__init__()
        g = scales.grid
        self.q = q
        self.n_fields = g.n_fields
        self.coarse = scales.coarse
        self.n_eta = n_eta
        if g.dim == 1:
            self.idx = _stencil_indices_1d(self.coarse[0], q, g.periodic)
        else:
            self.idx = _stencil_indices_2d(self.coarse, q, g.periodic)
        n_in = g.n_fields * (2 * q + 1) ** g.dim + n_eta
        self.net = self.add_module("net", MLP(rng, (n_in, *hidden, g.n_fields)))

    def __call__(self, zeta: Tensor, eta: Tensor) -> Tensor:
        b = zeta.shape[0]
        n_pts = int(np.prod(self.coarse))
        z = zeta.reshape((b, self.n_fields, n_pts))
        col = z[:, :, self.idx]                       # [B, C, n_pts, S]
        col = col.transpose((0, 2, 1, 3)).reshape((b, n_pts, -1))
        if self.n_eta > 0:
            ones = np.ones((1, n_pts, 1))
            eta_b = eta.reshape((b, 1, self.n_eta)) * ones
            col = ad.concat([col, eta_b], axis=2)
        out = self.net(col)                           # [B, n_pts, C]
        return out.transpose((0, 2, 1)).reshape((b, self.n_fields * n_pts))


class MicroDrift(Module):
    """Fully-connected drift g_theta(eta, psi(zeta), t).

    Input layout is [psi(zeta), t, eta]; psi is the identity in 1D and a
    learned linear map zeta -> n_eta in 2D.
    """

    def __init__(self, n_zeta: int, n_eta: int, rng: Rng, dim: int = 1,
                 hidden=(128, 512, 128), t_scale: float = 1.0):
        super().__init__()
        self.n_zeta, self.n_eta, self.dim = n_zeta, n_eta, dim
        self.t_scale = t_scale
        if dim == 2:
            from .nn import Linear

            self.psi = self.add_module("psi", Linear(rng, n_zeta, n_eta))
            n_star = n_eta
        else:
            self.psi = None
            n_star = n_zeta
        self.net = self.add_module("net", MLP(rng, (n_star + 1 + n_eta, *hidden, n_eta)))

    def __call__(self, eta: Tensor, zeta: Tensor, t) -> Tensor:
        b = eta.shape[0]
        feat = self.psi(zeta) if self.psi is not None else zeta
        chi = np.broadcast_to(np.asarray(t, dtype=float) / self.t_scale, (b,)).reshape(b, 1)
        return self.net(ad.concat([feat, Tensor(chi.copy()), eta], axis=1))


class Dispersion(Module):
    """Constant diagonal dispersion L = diag(ell), ell > 0 via softplus."""

    def __init__(self, n_z: int):
        super().__init__()
        self.ell_raw = self.param("ell_raw", np.full(n_z, _SIGMA_Z_RAW0))

    def ell(self) -> Tensor:
        return ad.softplus(self.ell_raw)


class SdeModel(Module):
    """The learned latent SDE dz = gamma_theta(z, t) dt + L dbeta."""

    def __init__(self, scales: ScaleOps, rng: Rng, q: int = 2,
                 macro_hidden=(128, 128, 128), micro_hidden=(128, 512, 128),
                 t_scale: float = 1.0):
        super().__init__()
        self.scales = self.add_module("scales", scales)
        self.n_zeta, self.n_eta = scales.n_zeta, scales.n_eta
        self.n_z = scales.n_z
        self.macro = self.add_module("macro", MacroDrift(scales, self.n_eta, rng, q=q, hidden=macro_hidden))
        if self.n_eta > 0:
            self.micro = self.add_module(
                "micro",
                MicroDrift(self.n_zeta, self.n_eta, rng, dim=scales.grid.dim,
                           hidden=micro_hidden, t_scale=t_scale),
            )
        else:
            self.micro = None
        self.dispersion = self.add_module("dispersion", Dispersion(self.n_z))

    def split(self, z: Tensor):
        return z[:, : self.n_zeta], z[:, self.n_zeta :]

    def drift(self, z: Tensor, t) -> Tensor:
        """gamma_theta(z, t) for a batch of latent states; t scalar or [B]."""
        zeta, eta = self.split(ad._wrap(z))
        f = self.macro(zeta, eta)
        if self.micro is None:
            return f
        return ad.concat([f, self.micro(eta, zeta, t)], axis=1)


def euler_maruyama(model: SdeModel, z0: np.ndarray, t0: float, t1: float,
                   n_steps: int, rng: Rng, n_paths: int) -> np.ndarray:
    """Sample n_paths trajectories of the latent SDE on [t0, t1].

    z0 is either a single state [n_z] shared by every path or per-path
    states [n_paths, n_z]. Returns [n_paths, n_steps+1, n_z]; all paths
    advance in lockstep with a single batched drift evaluation per step.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    dt = (t1 - t0) / n_steps
    sq = np.sqrt(dt)
    with ad.no_grad():
        ell = model.dispersion.ell().data
        z0 = np.asarray(z0, dtype=float)
        z = z0.copy() if z0.ndim == 2 else np.tile(z0[None, :], (n_paths, 1))
        out = np.empty((n_paths, n_steps + 1, z.shape[1]))
        out[:, 0] = z
        for k in range(n_steps):
            gamma = model.drift(Tensor(z), t0 + k * dt).data
            z = z + gamma * dt + ell * sq * rng.normal(z.shape)
            if not np.all(np.isfinite(z)):
                bad = np.argwhere(~np.isfinite(z).all(axis=1))[0, 0]
                raise IntegrationError(f"non-finite state at step {k + 1}, path {bad}")
            out[:, k + 1] = z
    return out
