"""Scale-separation operators and the probabilistic state encoder.

A learned smoothing kernel (one per field) acts as a low-pass filter. The
macroscale state is the smoothed field restricted to a coarse grid by a
strided convolution with the *same* kernel; prolongation back to the fine
grid is the exact adjoint of that restriction. The microscale residual
y - smooth(y) is compressed to a global vector by a strided conv stack with
a mirrored transposed-conv decoder.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .datagen import GridSpec
from .nn import Conv1d, Conv2d, ConvTranspose1d, ConvTranspose2d, Linear, Module
from .rng import Rng

def softplus_inverse(v: float) -> float:
    """Overflow-safe inverse of log(1 + e^x)."""
    v = float(v)
    return v + float(np.log1p(-np.exp(-v))) if v > 30 else float(np.log(np.expm1(v)))


# inverse softplus of the initial encoder variance 1e-2
_SIGMA_Z_RAW0 = softplus_inverse(1e-2)


def gaussian_kernel(length: int, width: float) -> np.ndarray:
    c = (length - 1) / 2.0
    k = np.exp(-((np.arange(length) - c) ** 2) / (2.0 * width**2))
    return k / k.sum()


class EncodedGaussian:
    """Diagonal Gaussian over the latent state z = [zeta; eta]."""

    def __init__(self, mean: Tensor, var: Tensor):
        self.mean = mean        # [B, n_z]
        self.var = var          # [n_z], strictly positive

    def sample(self, rng: Rng) -> Tensor:
        xi = rng.normal(self.mean.shape)
        return self.mean + ad.sqrt(self.var) * xi


class ScaleOps(Module):
    """Tied-kernel smoothing/restriction/prolongation plus micro codec.

    Fields and spatial axes are recovered from `grid`; all public methods
    take and return flat batched states of shape [B, n_y].
    """

    FILTERS = (4, 16, 32)

    def __init__(self, grid: GridSpec, s: int, n_eta: int, rng: Rng, kernel_factor: int = 4):
        super().__init__()
        if s < 1:
            raise ValueError("downsampling factor s must be a positive integer")
        self.grid = grid
        self.s = int(s)
        self.n_eta = int(n_eta)
        self.mode = "circular" if grid.periodic else "zero"
        self.k_len = kernel_factor * self.s + 1

        k0 = gaussian_kernel(self.k_len, float(self.s))
        if grid.dim == 1:
            kern = np.tile(k0, (grid.n_fields, 1))
        else:
            kern = np.tile(np.outer(k0, k0), (grid.n_fields, 1, 1))
        self.kernel = self.param("kernel", kern)

        # coarse-grid size per axis follows from the strided index map
        self.coarse = tuple(
            n // self.s if grid.periodic else (n - 1) // self.s + 1 for n in grid.points
        )
        self.n_zeta = grid.n_fields * int(np.prod(self.coarse))
        self.n_z = self.n_zeta + self.n_eta

        self._build_micro(rng)
        self.sigma_z_raw = self.param("sigma_z_raw", np.full(self.n_z, _SIGMA_Z_RAW0))

    # -- construction ----------------------------------------------------

    def _build_micro(self, rng: Rng):
        g = self.grid
        if self.n_eta == 0:
            self._feat_shape = None
            return
        k = 9 if g.dim == 1 else 5
        chans = (g.n_fields,) + self.FILTERS
        sizes = [g.points]
        for _ in self.FILTERS:
            sizes.append(tuple(-(-n // 2) for n in sizes[-1]))  # ceil(n/2) per stage
        self._micro_sizes = sizes
        self._feat_shape = (self.FILTERS[-1],) + sizes[-1]
        n_feat = int(np.prod(self._feat_shape))

        self.enc_convs, self.dec_convs = [], []
        for i in range(len(self.FILTERS)):
            if g.dim == 1:
                conv = Conv1d(rng, chans[i], chans[i + 1], k, stride=2, mode="zero")
                deco = ConvTranspose1d(rng, chans[i + 1], chans[i], k, sizes[i][0], stride=2, mode="zero")
            else:
                conv = Conv2d(rng, chans[i], chans[i + 1], k, stride=2, mode="zero")
                deco = ConvTranspose2d(rng, chans[i + 1], chans[i], k, sizes[i], stride=2, mode="zero")
            self.enc_convs.append(self.add_module(f"enc_conv{i}", conv))
            self.dec_convs.append(self.add_module(f"dec_conv{i}", deco))
        self.enc_lin = self.add_module("enc_lin", Linear(rng, n_feat, self.n_eta))
        self.dec_lin = self.add_module("dec_lin", Linear(rng, self.n_eta, n_feat))

    # -- shape plumbing ----------------------------------------------------

    def _to_grid(self, y, coarse=False) -> Tensor:
        y = ad._wrap(y)
        pts = self.coarse if coarse else self.grid.points
        n = self.grid.n_fields * int(np.prod(pts))
        if y.ndim != 2 or y.shape[1] != n:
            raise ShapeError(f"expected [B, {n}] state, got {y.shape}")
        return y.reshape((y.shape[0], self.grid.n_fields) + tuple(pts))

    def _to_flat(self, x: Tensor) -> Tensor:
        return x.reshape((x.shape[0], -1))

    def _field_conv(self, x: Tensor, stride: int) -> Tensor:
        outs = []
        for f in range(self.grid.n_fields):
            w = self.kernel[f].reshape((1, 1) + self.kernel.shape[1:])
            xf = x[:, f : f + 1]
            if self.grid.dim == 1:
                outs.append(ad.conv1d(xf, w, stride=stride, mode=self.mode))
            else:
                outs.append(ad.conv2d(xf, w, stride=stride, mode=self.mode))
        return outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)

    def _field_convT(self, z: Tensor) -> Tensor:
        outs = []
        for f in range(self.grid.n_fields):
            w = self.kernel[f].reshape((1, 1) + self.kernel.shape[1:])
            zf = z[:, f : f + 1]
            if self.grid.dim == 1:
                outs.append(
                    ad.conv_transpose1d(zf, w, self.grid.points[0], stride=self.s, mode=self.mode)
                )
            else:
                outs.append(
                    ad.conv_transpose2d(zf, w, self.grid.points, stride=self.s, mode=self.mode)
                )
        return outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)

    # -- scale operators ---------------------------------------------------

    def smooth(self, y) -> Tensor:
        """Low-pass filter: stride-1 convolution with the tied kernel."""
        return self._to_flat(self._field_conv(self._to_grid(y), stride=1))

    def residual(self, y) -> Tensor:
        return ad._wrap(y) - self.smooth(y)

    def restrict(self, y) -> Tensor:
        """Fine-grid state -> coarse macroscale values (strided tied kernel)."""
        return self._to_flat(self._field_conv(self._to_grid(y), stride=self.s))

    def prolong(self, zeta) -> Tensor:
        """Adjoint of restrict: coarse values -> fine grid."""
        return self._to_flat(self._field_convT(self._to_grid(zeta, coarse=True)))

    def encode_micro(self, resid) -> Tensor:
        if self.n_eta == 0:
            resid = ad._wrap(resid)
            return Tensor(np.zeros((resid.shape[0], 0)))
        x = self._to_grid(resid)
        for conv in self.enc_convs:
            x = ad.leaky_relu(conv(x))
        return self.enc_lin(self._to_flat(x))

    def decode_micro(self, eta) -> Tensor:
        if self.n_eta == 0:
            eta = ad._wrap(eta)
            return Tensor(np.zeros((eta.shape[0], self.grid.n_y)))
        x = self.dec_lin(ad._wrap(eta))
        x = x.reshape((x.shape[0],) + self._feat_shape)
        for deco in reversed(self.dec_convs):
            x = deco(ad.leaky_relu(x))
        return self._to_flat(x)

    def sigma_z(self) -> Tensor:
        return ad.softplus(self.sigma_z_raw)

    def encode(self, y) -> EncodedGaussian:
        """q-mean anchor: coarse restriction of the smooth part, micro code of the rest."""
        ybar = self.smooth(y)
        mean = self._to_flat(self._field_conv(self._to_grid(ybar), stride=self.s))
        if self.n_eta > 0:
            mean = ad.concat([mean, self.encode_micro(ad._wrap(y) - ybar)], axis=1)
        return EncodedGaussian(mean, self.sigma_z())
