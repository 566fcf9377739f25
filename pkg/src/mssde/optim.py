"""Adam optimizer with stepwise exponential learning-rate decay."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class NanGradientError(RuntimeError):
    """Raised when a gradient contains NaN; carries the parameter name."""

    def __init__(self, param_name):
        super().__init__(f"NaN gradient in parameter {param_name!r}")
        self.param_name = param_name


class Adam:
    """Standard Adam (b1=0.9, b2=0.999, eps=1e-8).

    The learning rate is multiplied by `decay_factor` every `decay_interval`
    steps (interval <= 0 disables decay).
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8, decay_factor=0.9, decay_interval=2000):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = dict(params)
        self.lr0 = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.decay_factor, self.decay_interval = decay_factor, decay_interval
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    @property
    def lr(self):
        if self.decay_interval and self.decay_interval > 0:
            return self.lr0 * self.decay_factor ** (self.step_count // self.decay_interval)
        return self.lr0

    def step(self):
        self.step_count += 1
        lr = self.lr
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            g = np.asarray(g, dtype=np.float64).reshape(p.data.shape)
            if np.isnan(g).any():
                raise NanGradientError(name)
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
