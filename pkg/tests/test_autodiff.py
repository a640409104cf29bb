"""Finite-difference gradient checks and shape handling for the tensor engine."""
import numpy as np
import pytest

from patchpos import autodiff as ad
from patchpos.autodiff import Tensor

TOL = 1e-4


def t64(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def check(fn, *tensors):
    err = ad.finite_difference_check(fn, tensors)
    assert err < TOL, f"finite-difference mismatch: {err}"


def test_add_mul_broadcast():
    rng = np.random.default_rng(0)
    a, b = t64(rng, 3, 4), t64(rng, 4)
    check(lambda a, b: ((a + b) * (a * 2.0 - b)).sum(), a, b)


def test_sub_div_pow():
    rng = np.random.default_rng(1)
    a, b = t64(rng, 2, 3), t64(rng, 2, 3)
    b.data = b.data + 3.0  # keep the divisor away from zero
    check(lambda a, b: ((a - b) / b + a ** 3).sum(), a, b)


def test_matmul_batched():
    rng = np.random.default_rng(2)
    a, b = t64(rng, 2, 3, 4), t64(rng, 4, 5)
    check(lambda a, b: (a @ b).sum(), a, b)
    c = t64(rng, 2, 5, 4)
    check(lambda a, c: ((a @ c.transpose((0, 2, 1))) ** 2).sum(), a, c)


def test_matmul_shape_errors():
    a = Tensor(np.zeros((3, 4)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(a, Tensor(np.zeros((3, 4))))
    with pytest.raises(ad.ShapeError):
        ad.matmul(a, Tensor(np.zeros(4)))


def test_getitem():
    rng = np.random.default_rng(3)
    a = t64(rng, 4, 6)
    check(lambda a: (a[1:3, ::2] * a[0:2, 1::2]).sum(), a)


def test_reductions_and_shaping():
    rng = np.random.default_rng(4)
    a = t64(rng, 2, 3, 4)
    check(lambda a: a.sum(axis=1).mean(), a)
    check(lambda a: (a.mean(axis=(0, 2), keepdims=True) * a).sum(), a)
    check(lambda a: a.reshape(6, 4).swapaxes(0, 1).sum(axis=0).sum(), a)
    check(lambda a: a.transpose((2, 0, 1)).mean(), a)


def test_elementwise_functions():
    rng = np.random.default_rng(5)
    a = t64(rng, 3, 3)
    check(lambda a: ad.exp(a).sum(), a)
    check(lambda a: ad.gelu(a).sum(), a)
    b = t64(rng, 3, 3)
    b.data = np.abs(b.data) + 0.5
    check(lambda b: ad.log(b).sum(), b)
    check(lambda b: ad.sqrt(b).sum(), b)


def test_gather_rows():
    rng = np.random.default_rng(6)
    a = t64(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    check(lambda a: (ad.gather_rows(a, idx) ** 2).sum(), a)
    with pytest.raises(IndexError):
        ad.gather_rows(a, np.array([5]))


def test_gather_seq():
    rng = np.random.default_rng(7)
    a = t64(rng, 2, 6, 3)
    idx = np.array([[0, 5, 2], [1, 1, 3]])
    check(lambda a: (ad.gather_seq(a, idx) * 1.5).sum(), a)
    out = ad.gather_seq(a, idx)
    assert np.array_equal(out.data[1, 0], a.data[1, 1])


def test_take_lastdim():
    rng = np.random.default_rng(8)
    a = t64(rng, 4, 6)
    idx = np.array([0, 5, 3, 3])
    check(lambda a: ad.take_lastdim(a, idx).sum(), a)


def test_concat():
    rng = np.random.default_rng(9)
    a, b = t64(rng, 2, 3), t64(rng, 2, 2)
    check(lambda a, b: (ad.concat([a, b], axis=1) ** 2).sum(), a, b)


def test_softmax_losses():
    rng = np.random.default_rng(10)
    a = t64(rng, 3, 5)
    check(lambda a: (ad.softmax_lastdim(a) * np.arange(5.0)).sum(), a)
    check(lambda a: ad.logsumexp_lastdim(a).sum(), a)
    check(lambda a: (ad.log_softmax_lastdim(a) ** 2).sum(), a)
    tgt = np.array([1, 0, 4])
    check(lambda a: ad.cross_entropy_from_logits(a, tgt).sum(), a)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(11)
    a = Tensor(rng.standard_normal((4, 7)) * 10)
    s = ad.softmax_lastdim(a)
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)


def test_layernorm():
    rng = np.random.default_rng(12)
    x, g, b = t64(rng, 2, 4, 6), t64(rng, 6), t64(rng, 6)
    check(lambda x, g, b: (ad.layernorm(x, g, b) * 0.7).sum(), x, g, b)
    with pytest.raises(ad.ShapeError):
        ad.layernorm(x, Tensor(np.ones(3)), b)


def test_conv2d():
    rng = np.random.default_rng(13)
    x = t64(rng, 2, 3, 5, 5)
    w = t64(rng, 4, 3, 3, 3)
    check(lambda x, w: (ad.conv2d(x, w) ** 2).sum(), x, w)
    check(lambda x, w: ad.conv2d(x, w, stride=2, padding=1).sum(), x, w)


def test_conv2d_shape_errors():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(x, Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(x, Tensor(np.zeros((2, 3, 6, 6))))


def test_conv_transpose2d():
    rng = np.random.default_rng(14)
    x = t64(rng, 2, 3, 4, 4)
    w = t64(rng, 3, 2, 2, 2)
    out = ad.conv_transpose2d(x, w, stride=2)
    assert out.shape == (2, 2, 8, 8)
    check(lambda x, w: (ad.conv_transpose2d(x, w, stride=2) ** 2).sum(), x, w)
    check(lambda x, w: ad.conv_transpose2d(x, w, stride=1, padding=1).sum(),
          t64(rng, 1, 3, 4, 4), t64(rng, 3, 2, 3, 3))


def test_conv_transpose_matches_adjoint():
    # <conv(x), y> == <x, conv_transpose(y)> for matching shapes
    rng = np.random.default_rng(15)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    y = rng.standard_normal((1, 3, 2, 2))
    fwd = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=0).data
    adj = ad.conv_transpose2d(Tensor(y), Tensor(w), stride=2, padding=0).data
    # the stride-2 windows never touch row/column 5, so the adjoint output is
    # 5x5 and those source entries contribute nothing
    assert np.isclose((fwd * y).sum(), (x[:, :, :5, :5] * adj).sum(), rtol=1e-10)


def test_dilate_pad_flip():
    rng = np.random.default_rng(16)
    x = t64(rng, 1, 2, 3, 3)
    check(lambda x: (ad.dilate2d(x, 2) * 2.0).sum(), x)
    check(lambda x: (ad.pad2d(x, 2) ** 2).sum(), x)
    w = t64(rng, 2, 3, 2, 2)
    check(lambda w: (ad.flip_kernel(w) ** 3).sum(), w)


def test_dropout():
    rng = np.random.default_rng(17)
    x = Tensor(np.ones((1000,)), requires_grad=True)
    out = ad.dropout(x, 0.5, np.random.default_rng(0))
    kept = out.data != 0
    assert 0.4 < kept.mean() < 0.6
    assert np.allclose(out.data[kept], 2.0)
    assert ad.dropout(x, 0.0, rng) is x


def test_grad_accumulates_over_reuse():
    a = Tensor(np.array([2.0]), requires_grad=True)
    ((a * a) + a * 3.0).sum().backward()
    assert np.allclose(a.grad, 2 * 2.0 + 3.0)


def test_backward_requires_scalar():
    a = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (a + 1.0).backward()


def test_detach_blocks_gradient():
    a = Tensor(np.array([3.0]), requires_grad=True)
    (a.detach() * a).sum().backward()
    assert np.allclose(a.grad, 3.0)
