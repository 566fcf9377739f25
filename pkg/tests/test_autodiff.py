import numpy as np
import pytest

from mssde import autodiff as ad
from mssde.autodiff import Tensor
from mssde.rng import Rng


def finite_diff(f, x0, h=1e-5):
    """Central finite-difference gradient of scalar f at x0 (flat array)."""
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_grad(build_loss, x0, tol=1e-6):
    """Compare reverse-mode grad of build_loss(Tensor) against central FD."""
    x = Tensor(x0, requires_grad=True)
    loss = build_loss(x)
    loss.backward()
    fd = finite_diff(lambda v: build_loss(Tensor(v)).item(), x0)
    denom = max(np.linalg.norm(fd), 1e-12)
    rel = np.linalg.norm(x.grad - fd) / denom
    assert rel < tol, f"rel error {rel}"


rng = Rng(1234)


def test_matmul_identity():
    a = np.eye(3)
    b = rng.normal((3, 4))
    out = ad.matmul(Tensor(a), Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_leaky_relu_definition():
    out = ad.leaky_relu(Tensor(np.array([-1.0, 2.0])), slope=0.01)
    np.testing.assert_allclose(out.data, [-0.01, 2.0])


def test_conv1d_delta_kernel_is_identity():
    x = rng.normal((1, 1, 16))
    k = np.zeros((1, 1, 5))
    k[0, 0, 2] = 1.0  # centered delta
    out = ad.conv1d(Tensor(x), Tensor(k), stride=1, mode="circular")
    np.testing.assert_allclose(out.data, x, atol=1e-15)


def test_backward_linear_form():
    w = Tensor(rng.normal(7), requires_grad=True)
    x = rng.normal(7)
    loss = (w * x).sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, x)


def test_backward_quadratic_vs_fd():
    x = rng.normal(4)

    def loss(wt):
        y = ad.matmul(wt, Tensor(x))
        return (y * y).sum()

    check_grad(loss, rng.normal((3, 4)))


def test_backward_conv_chain_vs_fd():
    x = rng.normal((1, 2, 12))

    def loss(kt):
        h = ad.conv1d(Tensor(x), kt, stride=2, mode="circular")
        return ad.leaky_relu(h).sum()

    check_grad(loss, rng.normal((3, 2, 5)))


def test_non_scalar_loss_raises():
    x = Tensor(rng.normal(3), requires_grad=True)
    with pytest.raises(ad.GradientError):
        (x * 2.0).backward()


def test_matmul_shape_mismatch_names_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


@pytest.mark.parametrize("op,shape", [
    (lambda x: ad.exp(x).sum(), (5,)),
    (lambda x: ad.log(x * x + 1.0).sum(), (5,)),
    (lambda x: ad.softplus(x).sum(), (5,)),
    (lambda x: ad.sqrt(x * x + 0.5).sum(), (5,)),
    (lambda x: (x ** 3).sum(), (4,)),
    (lambda x: ad.leaky_relu(x).sum(), (6,)),
    (lambda x: x.reshape(2, 3).sum(axis=0).sum(), (6,)),
    (lambda x: x[1:4].sum(), (6,)),
    (lambda x: ad.concat([x, x * 2.0]).sum(), (3,)),
    (lambda x: (x.mean(axis=0) ** 2).sum(), (4, 3)),
    (lambda x: ad.stack([x, x * x], axis=1).sum(), (3,)),
])
def test_primitive_grads_vs_fd(op, shape):
    # offset away from the LeakyReLU kink and keep logs positive
    x0 = rng.normal(shape) + 0.05
    check_grad(op, x0, tol=1e-4)


def test_broadcast_add_mul_grads():
    b = rng.normal((1, 4))

    def loss(x):
        return ((x + Tensor(b)) * Tensor(b) * x).sum()

    check_grad(loss, rng.normal((3, 4)))


@pytest.mark.parametrize("stride,mode", [(1, "circular"), (2, "circular"), (1, "zero"), (2, "zero")])
def test_conv1d_grads_all_modes(stride, mode):
    x = rng.normal((2, 2, 12))
    k0 = rng.normal((3, 2, 5))
    b0 = rng.normal(3)

    def loss_k(kt):
        return (ad.conv1d(Tensor(x), kt, bias=Tensor(b0), stride=stride, mode=mode) ** 2).sum()

    check_grad(loss_k, k0)

    def loss_x(xt):
        return (ad.conv1d(xt.reshape(2, 2, 12), Tensor(k0), stride=stride, mode=mode) ** 2).sum()

    check_grad(loss_x, x.reshape(-1))


@pytest.mark.parametrize("stride,mode", [(1, "circular"), (2, "circular"), (2, "zero")])
def test_conv2d_grads(stride, mode):
    x = rng.normal((1, 1, 8, 8))
    k0 = rng.normal((2, 1, 3, 3))

    def loss_k(kt):
        return (ad.conv2d(Tensor(x), kt, stride=stride, mode=mode) ** 2).sum()

    check_grad(loss_k, k0)

    def loss_x(xt):
        return (ad.conv2d(xt.reshape(1, 1, 8, 8), Tensor(k0), stride=stride, mode=mode) ** 2).sum()

    check_grad(loss_x, x.reshape(-1))


@pytest.mark.parametrize("stride,mode", [(1, "circular"), (2, "circular"), (1, "zero"), (3, "zero")])
def test_conv1d_adjoint_identity(stride, mode):
    n = 12
    x = rng.normal((1, 2, n))
    k = rng.normal((3, 2, 5))
    cx = ad.conv1d(Tensor(x), Tensor(k), stride=stride, mode=mode)
    y = rng.normal(cx.shape)
    cty = ad.conv_transpose1d(Tensor(y), Tensor(k), n, stride=stride, mode=mode)
    lhs = np.sum(cx.data * y)
    rhs = np.sum(x * cty.data)
    assert abs(lhs - rhs) < 1e-10


@pytest.mark.parametrize("stride,mode", [(1, "circular"), (2, "circular"), (2, "zero")])
def test_conv2d_adjoint_identity(stride, mode):
    hw = (8, 8)
    x = rng.normal((1, 1) + hw)
    k = rng.normal((2, 1, 3, 3))
    cx = ad.conv2d(Tensor(x), Tensor(k), stride=stride, mode=mode)
    y = rng.normal(cx.shape)
    cty = ad.conv_transpose2d(Tensor(y), Tensor(k), hw, stride=stride, mode=mode)
    assert abs(np.sum(cx.data * y) - np.sum(x * cty.data)) < 1e-10


@pytest.mark.parametrize("stride,mode", [(2, "circular"), (2, "zero")])
def test_conv_transpose1d_grads(stride, mode):
    n = 12
    k0 = rng.normal((3, 2, 5))
    y_shape = ad.conv1d(Tensor(rng.normal((1, 2, n))), Tensor(k0), stride=stride, mode=mode).shape
    y = rng.normal(y_shape)

    def loss_k(kt):
        return (ad.conv_transpose1d(Tensor(y), kt, n, stride=stride, mode=mode) ** 2).sum()

    check_grad(loss_k, k0)

    def loss_y(yt):
        return (ad.conv_transpose1d(yt.reshape(y_shape), Tensor(k0), n, stride=stride, mode=mode) ** 2).sum()

    check_grad(loss_y, y.reshape(-1))


def test_forward_deterministic():
    x = rng.normal((2, 2, 16))
    k = rng.normal((2, 2, 7))
    a = ad.conv1d(Tensor(x), Tensor(k), stride=2, mode="circular").data
    b = ad.conv1d(Tensor(x), Tensor(k), stride=2, mode="circular").data
    assert np.array_equal(a, b)


def test_no_grad_context():
    x = Tensor(rng.normal(3), requires_grad=True)
    with ad.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad
