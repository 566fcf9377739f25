"""Small neural-network building blocks on top of the autodiff tape."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng


class Module:
    """Base class tracking parameters and submodules by dotted name."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._modules: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def named_parameters(self, prefix="") -> dict[str, Tensor]:
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, m in self._modules.items():
            out.update(m.named_parameters(prefix + name + "."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def load_values(self, values: dict[str, np.ndarray], grow=False):
        """Copy arrays into parameters by name.

        With grow=True, a stored array whose shape is elementwise <= the
        parameter's shape is copied into the leading hyperslab; remaining
        entries keep their (fresh) initialization. Used for warm-starting a
        model whose microscale dimension grew.
        """
        params = self.named_parameters()
        for name, arr in values.items():
            if name not in params:
                continue
            p = params[name]
            if arr.shape == p.data.shape:
                p.data = arr.astype(np.float64).copy()
            elif grow and len(arr.shape) == len(p.data.shape) and all(
                s <= t for s, t in zip(arr.shape, p.data.shape)
            ):
                p.data[tuple(slice(0, s) for s in arr.shape)] = arr
            else:
                raise ValueError(f"parameter {name}: cannot load shape {arr.shape} into {p.data.shape}")

    def state_values(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}


def xavier_normal(rng: Rng, fan_in, fan_out, shape):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return std * rng.normal(shape)


class Linear(Module):
    def __init__(self, rng: Rng, n_in, n_out):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.w = self.param("w", xavier_normal(rng, n_in, n_out, (n_in, n_out)))
        self.b = self.param("b", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class MLP(Module):
    """Fully-connected net with LeakyReLU(0.01) hidden activations."""

    def __init__(self, rng: Rng, sizes, slope=0.01):
        super().__init__()
        self.slope = slope
        self.layers = [
            self.add_module(f"lin{i}", Linear(rng, a, b))
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.leaky_relu(x, self.slope)
        return x


class Conv1d(Module):
    def __init__(self, rng: Rng, c_in, c_out, kernel, stride=1, mode="circular", bias=True):
        super().__init__()
        self.stride, self.mode = stride, mode
        fan = c_in * kernel
        self.w = self.param("w", xavier_normal(rng, fan, c_out * kernel, (c_out, c_in, kernel)))
        self.b = self.param("b", np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.w, bias=self.b, stride=self.stride, mode=self.mode)


class ConvTranspose1d(Module):
    """Adjoint convolution; `n_out` is the fine-grid length it maps back to."""

    def __init__(self, rng: Rng, c_in, c_out, kernel, n_out, stride=1, mode="circular", bias=True):
        super().__init__()
        self.stride, self.mode, self.n_out = stride, mode, n_out
        fan = c_out * kernel
        self.w = self.param("w", xavier_normal(rng, fan, c_in * kernel, (c_in, c_out, kernel)))
        self.b = self.param("b", np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose1d(x, self.w, self.n_out, bias=self.b, stride=self.stride, mode=self.mode)


class Conv2d(Module):
    def __init__(self, rng: Rng, c_in, c_out, kernel, stride=1, mode="circular", bias=True):
        super().__init__()
        self.stride, self.mode = stride, mode
        fan = c_in * kernel * kernel
        self.w = self.param("w", xavier_normal(rng, fan, c_out * kernel * kernel, (c_out, c_in, kernel, kernel)))
        self.b = self.param("b", np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, bias=self.b, stride=self.stride, mode=self.mode)


class ConvTranspose2d(Module):
    def __init__(self, rng: Rng, c_in, c_out, kernel, hw_out, stride=1, mode="circular", bias=True):
        super().__init__()
        self.stride, self.mode, self.hw_out = stride, mode, hw_out
        fan = c_out * kernel * kernel
        self.w = self.param("w", xavier_normal(rng, fan, c_in * kernel * kernel, (c_in, c_out, kernel, kernel)))
        self.b = self.param("b", np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.w, self.hw_out, bias=self.b, stride=self.stride, mode=self.mode)
