"""Finite-difference oracles for every autodiff primitive (float64)."""
import numpy as np
import pytest

import splatmark.autodiff as ad
from splatmark.autodiff import Tensor


@pytest.fixture(autouse=True)
def float64_mode():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float32)


def gradcheck(fn, shapes, seed=0, n_probe=10, h=1e-6, tol=1e-3):
    """Central finite differences against analytic gradients.

    fn takes len(shapes) Tensors and returns a Tensor; a random linear
    functional of the output is differentiated.
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.random(s) + 0.1 for s in shapes]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = rng.random(out.shape)
    (out * Tensor(weights)).sum().backward()

    def value(args):
        return float((fn(*[Tensor(a) for a in args]).data * weights).sum())

    for which, (arr, tensor) in enumerate(zip(arrays, tensors)):
        flat = arr.reshape(-1)
        probes = rng.integers(0, flat.size, size=min(n_probe, flat.size))
        for i in probes:
            orig = flat[i]
            flat[i] = orig + h
            fp = value(arrays)
            flat[i] = orig - h
            fm = value(arrays)
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            an = tensor.grad.reshape(-1)[i]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            assert err < tol, f"input {which} index {i}: fd {fd} vs analytic {an}"


class TestElementwise:
    def test_add_mul(self):
        gradcheck(lambda a, b: a * b + a + 2.0 * b, [(3, 4), (3, 4)])

    def test_broadcasting(self):
        gradcheck(lambda a, b: a * b, [(3, 4), (4,)])

    def test_div(self):
        gradcheck(lambda a, b: a / b, [(5,), (5,)])

    def test_exp_log_sqrt(self):
        gradcheck(lambda a: ad.exp(a) + ad.log(a) + ad.sqrt(a), [(6,)])

    def test_sigmoid(self):
        gradcheck(lambda a: ad.sigmoid(a), [(4, 4)])

    def test_relu_away_from_kink(self):
        gradcheck(lambda a: ad.relu(a - 0.05), [(5, 5)], seed=3)

    def test_clamp_interior(self):
        gradcheck(lambda a: ad.clamp(a, 0.0, 2.0), [(4,)])

    def test_clamp_zero_gradient_outside(self):
        x = Tensor(np.array([-1.0, 0.5, 3.0]), requires_grad=True)
        ad.clamp(x, 0.0, 1.0).sum().backward()
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_power(self):
        gradcheck(lambda a: a**3, [(4,)])


class TestLinalg:
    def test_matmul(self):
        gradcheck(lambda a, b: ad.matmul(a, b), [(3, 4), (4, 5)])

    def test_matmul_batched(self):
        gradcheck(lambda a, b: ad.matmul(a, b), [(2, 3, 4), (2, 4, 5)])

    def test_matmul_broadcast(self):
        gradcheck(lambda a, b: ad.matmul(a, b), [(3, 3), (5, 3, 4)])

    def test_softmax(self):
        gradcheck(lambda a: ad.softmax(a, -1), [(3, 6)])

    def test_sum_mean(self):
        gradcheck(lambda a: ad.sum_(a, axis=0) + ad.mean(a, axis=1), [(4, 4)])


class TestShape:
    def test_reshape_transpose(self):
        gradcheck(lambda a: a.reshape(2, 6).transpose(1, 0), [(3, 4)])

    def test_getitem(self):
        gradcheck(lambda a: a[1:, :2], [(4, 4)])

    def test_getitem_accumulates_overlapping(self):
        x = Tensor(np.ones(3), requires_grad=True)
        (x[0] + x[0] + x[1]).backward()
        assert np.array_equal(x.grad, [2.0, 1.0, 0.0])

    def test_concat_stack(self):
        gradcheck(lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)])
        gradcheck(lambda a, b: ad.stack([a, b], axis=0), [(2, 3), (2, 3)])


class TestConvAndNorm:
    def test_conv2d_stride1(self):
        gradcheck(
            lambda x, w, b: ad.conv2d(x, w, b, 1, 1),
            [(2, 3, 6, 7), (4, 3, 3, 3), (4,)],
            n_probe=8,
        )

    def test_conv2d_stride2(self):
        gradcheck(
            lambda x, w, b: ad.conv2d(x, w, b, 2, 1),
            [(2, 2, 8, 8), (3, 2, 3, 3), (3,)],
            n_probe=8,
        )

    def test_conv2d_patchify(self):
        gradcheck(
            lambda x, w: ad.conv2d(x, w, stride=4, pad=0),
            [(1, 2, 8, 8), (5, 2, 4, 4)],
            n_probe=8,
        )

    def test_upsample_nearest(self):
        gradcheck(lambda a: ad.upsample_nearest(a, 2), [(1, 2, 3, 3)])

    def test_instance_norm(self):
        gradcheck(lambda a: ad.instance_norm(a), [(2, 3, 4, 4)], n_probe=8)

    def test_layer_norm(self):
        gradcheck(
            lambda x, g, b: ad.layer_norm(x, g, b),
            [(3, 4, 8), (8,), (8,)],
            n_probe=8,
        )


class TestGraph:
    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x * 3.0
        y.backward()
        assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0)

    def test_custom_op_backward(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        out = ad.custom_op((x,), x.data * 2.0, lambda g: (g * 2.0,))
        (out * Tensor(np.ones(4))).sum().backward()
        assert np.array_equal(x.grad, np.full(4, 2.0))

    def test_no_grad_leaves_untouched(self):
        x = Tensor(np.ones(3), requires_grad=False)
        y = (x * 2.0).sum()
        y.backward()
        assert x.grad is None
