import numpy as np
import pytest

from mssde.autodiff import Tensor
from mssde.optim import Adam, NanGradientError
from mssde.rng import Rng, gauss_sample


def test_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.step_count == 1


def test_first_step_magnitude_near_lr():
    # hand-evaluated Adam recurrences: m=(1-b1)g, v=(1-b2)g^2, bias-corrected
    # mhat=g, vhat=g^2, so the first update is lr*g/(|g|+eps) ~ lr for g=1
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-3)
    p.grad = np.array([1.0])
    opt.step()
    assert abs(-p.data[0] - 1e-3) < 1e-9


def test_lr_decay_after_interval():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-3, decay_interval=2000)
    for _ in range(2000):
        p.grad = np.array([0.0])
        opt.step()
    assert abs(opt.lr - 0.9e-3) < 1e-15


def test_nan_gradient_names_parameter():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"weights": p})
    p.grad = np.array([np.nan])
    with pytest.raises(NanGradientError, match="weights"):
        opt.step()


def test_gauss_moments():
    draws = gauss_sample(Rng(7), (1_000_000,))
    assert abs(draws.mean()) < 0.01  # 3 sigma / sqrt(n) ~ 0.003
    assert abs(draws.var() - 1.0) < 0.01


def test_same_seed_identical_streams():
    a = gauss_sample(Rng(42), (1000,))
    b = gauss_sample(Rng(42), (1000,))
    np.testing.assert_array_equal(a, b)


def test_substreams_differ():
    base = Rng(42)
    a = base.substream(0).normal(100)
    b = base.substream(1).normal(100)
    assert not np.allclose(a, b)
