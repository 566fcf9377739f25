"""Product-of-Experts observation likelihood.

A macroscale expert N(y | prolong(zeta), (S^zeta)^-1) multiplied by a
microscale expert on the residual, N(y - prolong(zeta) | decode(eta),
(S^eta)^-1), renormalizes to a single Gaussian with precision S^zeta + S^eta.
Both the compact and the expanded (regularizer-revealing) forms are
implemented with full normalization constants so they agree to roundoff.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module
from .scales import ScaleOps, softplus_inverse

LOG_2PI = float(np.log(2.0 * np.pi))


class PoEParams(Module):
    """Diagonal expert precisions, kept positive through softplus."""

    def __init__(self, n_y: int, init: float = 1e2):
        super().__init__()
        raw = softplus_inverse(init)
        self.s_zeta_raw = self.param("s_zeta_raw", np.full(n_y, raw))
        self.s_eta_raw = self.param("s_eta_raw", np.full(n_y, raw))

    def s_zeta(self) -> Tensor:
        return ad.softplus(self.s_zeta_raw)

    def s_eta(self) -> Tensor:
        return ad.softplus(self.s_eta_raw)


class Reconstruction:
    def __init__(self, mean: Tensor, var: Tensor):
        self.mean = mean    # [B, n_y]
        self.var = var      # [n_y], diagonal of Sigma_y


def _precisions(poe):
    sz, se = poe.s_zeta(), poe.s_eta()
    if not (np.all(sz.data > 0) and np.all(se.data > 0)):
        raise ValueError("expert precisions must be strictly positive")
    return sz, se


def poe_loglik(y, zeta, eta, poe, ops: ScaleOps) -> Tensor:
    """log p(y | zeta, eta), normalized. Batched over rows; returns [B]."""
    y = ad._wrap(y)
    sz, se = _precisions(poe)
    r = y - ops.prolong(zeta)
    d = ops.decode_micro(eta)
    lam = se * sz / (se + sz)
    quad = (r * r * sz).sum(axis=1) + ((r - d) ** 2 * se).sum(axis=1) - (d * d * lam).sum(axis=1)
    n_y = y.shape[1]
    const = -0.5 * n_y * LOG_2PI
    return -0.5 * quad + const + 0.5 * ad.log(sz + se).sum()


def poe_loglik_expanded(y, zeta, eta, poe, ops: ScaleOps) -> Tensor:
    """Equivalent expanded form: residual fit + coupling - adaptive regularizer."""
    y = ad._wrap(y)
    sz, se = _precisions(poe)
    r = y - ops.prolong(zeta)
    d = ops.decode_micro(eta)
    lam_p = se * se / (se + sz)     # Lambda' = S^eta - Lambda
    val = (
        -0.5 * (r * r * (sz + se)).sum(axis=1)
        + (r * d * se).sum(axis=1)
        - 0.5 * (d * d * lam_p).sum(axis=1)
    )
    n_y = y.shape[1]
    return val - 0.5 * n_y * LOG_2PI + 0.5 * ad.log(sz + se).sum()


def reconstruct(z, poe, ops: ScaleOps) -> Reconstruction:
    """Conditional p(y|z) = N(mu_y, Sigma_y) of the renormalized product."""
    z = ad._wrap(z)
    sz, se = _precisions(poe)
    zeta, eta = z[:, : ops.n_zeta], z[:, ops.n_zeta :]
    mean = ops.prolong(zeta)
    if ops.n_eta > 0:
        mean = mean + (se / (sz + se)) * ops.decode_micro(eta)
    return Reconstruction(mean, 1.0 / (sz + se))
