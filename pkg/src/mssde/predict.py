"""Posterior predictive sampling, moments, error metric, spectra.

Prediction is a three-stage Monte Carlo: sample latent initial conditions
from the encoder, integrate the learned SDE forward, and map each latent
path through the reconstruction distribution. The result at each requested
time is a uniform Gaussian mixture: one conditional mean per path, all
sharing the reconstruction covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dynamics import SdeModel, euler_maruyama
from .likelihood import PoEParams, reconstruct
from .rng import Rng


@dataclass
class PredictiveMixture:
    means: np.ndarray       # [N, n_y] conditional means, uniform weights
    var: np.ndarray         # [n_y] shared diagonal covariance

    @property
    def n(self) -> int:
        return len(self.means)


def posterior_predict(model: SdeModel, poe: PoEParams, y0: np.ndarray, times,
                      n_paths: int = 64, dt: float = 1e-3, rng: Rng | None = None):
    """Gaussian-mixture posterior predictive at each requested time.

    y0 is the observation at times[0]; returns one PredictiveMixture per
    entry of times (the first is the reconstruction of the encoded state).
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    rng = rng or Rng(0)
    times = np.asarray(times, dtype=float)
    with ad.no_grad():
        enc = model.scales.encode(np.asarray(y0, dtype=float)[None, :])
        z = enc.mean.data + np.sqrt(enc.var.data) * rng.normal((n_paths, model.n_z))
        out = [_mixture(z, model, poe)]
        for t0, t1 in zip(times[:-1], times[1:]):
            n_steps = max(1, int(round((t1 - t0) / dt)))
            paths = euler_maruyama(model, z, t0, t1, n_steps, rng, n_paths)
            z = paths[:, -1]
            out.append(_mixture(z, model, poe))
    return out


def _mixture(z, model, poe):
    rec = reconstruct(z, poe, model.scales)
    return PredictiveMixture(rec.mean.data.copy(), rec.var.data.copy())


def predictive_moments(mix: PredictiveMixture):
    """Mixture mean and diagonal variance by the law of total variance.

    Returns (mean, var, exact): `exact` is False when N=1 and the
    between-component term cannot be estimated.
    """
    mean = mix.means.mean(axis=0)
    if mix.n < 2:
        return mean, mix.var.copy(), False
    between = mix.means.var(axis=0, ddof=1)
    return mean, mix.var + between, True


def error_metric(y_true: np.ndarray, mix: PredictiveMixture) -> float:
    """Relative L2 error of the predictive mean: ||y - yhat|| / ||y||."""
    y = np.asarray(y_true, dtype=float)
    denom = np.linalg.norm(y)
    if denom == 0:
        raise ValueError("error_metric undefined for a zero-norm observation")
    mean, _, _ = predictive_moments(mix)
    return float(np.linalg.norm(y - mean) / denom)


def export_spectrum(field: np.ndarray):
    """One-sided Fourier amplitude spectrum of a 1D periodic field.

    Amplitudes combine the +/- k energy so that sum(amp^2)/n equals the
    field's squared l2 norm (Parseval). Returns a list of (k, amplitude).
    """
    u = np.asarray(field, dtype=float)
    n = len(u)
    f = np.fft.fft(u)
    half = n // 2
    out = [(0, float(np.abs(f[0])))]
    for k in range(1, half + 1):
        if 2 * k == n:
            amp = np.abs(f[k])
        else:
            amp = np.sqrt(np.abs(f[k]) ** 2 + np.abs(f[n - k]) ** 2)
        out.append((k, float(amp)))
    return out
