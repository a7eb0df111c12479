"""Engine checks: every op's backward against central finite differences."""

import numpy as np
import pytest

from raysfm import autodiff as ad
from raysfm.autodiff import Tensor


def fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar f at x (float64)."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, shape, rng, rtol=1e-6):
    """Compare tape gradient of sum(build(x)) against finite differences."""
    x0 = rng.standard_normal(shape)

    def f(x):
        return float(ad.sum_all(build(Tensor(x.copy()))).data)

    t = Tensor(x0.copy(), requires_grad=True)
    loss = ad.sum_all(build(t))
    loss.backward()
    g_fd = fd_grad(f, x0.copy())
    np.testing.assert_allclose(t.grad, g_fd, rtol=rtol, atol=1e-8)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestElementwise:
    def test_add_broadcast(self, rng):
        b = Tensor(rng.standard_normal((4,)))
        check_op(lambda x: ad.add(x, b), (3, 4), rng)

    def test_add_broadcast_grad_of_small_side(self, rng):
        x = rng.standard_normal((3, 4))
        b0 = rng.standard_normal(4)
        t = Tensor(b0.copy(), requires_grad=True)
        loss = ad.sum_all(ad.mul(ad.add(Tensor(x), t), ad.add(Tensor(x), t)))
        loss.backward()
        g_fd = fd_grad(lambda b: float(np.sum((x + b) ** 2)), b0.copy())
        np.testing.assert_allclose(t.grad, g_fd, rtol=1e-6)

    def test_mul(self, rng):
        other = Tensor(rng.standard_normal((5, 2)))
        check_op(lambda x: ad.mul(x, other), (5, 2), rng)

    def test_square_accumulates_both_parents(self, rng):
        # mul(a, a): the gradient must accumulate from both slots -> 2a.
        a = Tensor(rng.standard_normal((6,)), requires_grad=True)
        ad.sum_all(ad.mul(a, a)).backward()
        np.testing.assert_allclose(a.grad, 2 * a.data, rtol=1e-12)

    def test_sub_and_scale(self, rng):
        other = Tensor(rng.standard_normal((4, 3)))
        check_op(lambda x: ad.scale(ad.sub(x, other), -2.5), (4, 3), rng)

    def test_gelu(self, rng):
        check_op(lambda x: ad.gelu(x), (4, 5), rng, rtol=1e-5)


class TestMatmulAndShapes:
    def test_matmul_left(self, rng):
        b = Tensor(rng.standard_normal((4, 6)))
        check_op(lambda x: ad.matmul(x, b), (3, 4), rng)

    def test_matmul_right(self, rng):
        a = rng.standard_normal((3, 4))
        w0 = rng.standard_normal((4, 2))
        t = Tensor(w0.copy(), requires_grad=True)
        ad.sum_all(ad.matmul(Tensor(a), t)).backward()
        g_fd = fd_grad(lambda w: float(np.sum(a @ w)), w0.copy())
        np.testing.assert_allclose(t.grad, g_fd, rtol=1e-6)

    def test_batched_matmul_with_shared_weight(self, rng):
        # (B, T, d) @ (d, k): weight grad must sum over batch.
        a = rng.standard_normal((2, 3, 4))
        w0 = rng.standard_normal((4, 5))
        t = Tensor(w0.copy(), requires_grad=True)
        out = ad.matmul(Tensor(a), t)
        ad.sum_all(ad.mul(out, out)).backward()
        g_fd = fd_grad(lambda w: float(np.sum((a @ w) ** 2)), w0.copy())
        np.testing.assert_allclose(t.grad, g_fd, rtol=1e-6)

    def test_batched_both_sides(self, rng):
        b = Tensor(rng.standard_normal((2, 2, 5, 3)))
        check_op(lambda x: ad.matmul(x, b), (2, 2, 4, 5), rng)

    def test_reshape_transpose(self, rng):
        check_op(lambda x: ad.transpose(ad.reshape(x, (2, 3, 4)), (1, 0, 2)), (6, 4), rng)

    def test_concat(self, rng):
        other = Tensor(rng.standard_normal((3, 2)))
        check_op(lambda x: ad.mul(c := ad.concat([x, other], axis=1), c), (3, 4), rng)

    def test_narrow(self, rng):
        check_op(lambda x: ad.narrow(x, 1, 1, 2), (3, 5), rng)


class TestNormalizers:
    def test_softmax(self, rng):
        w = Tensor(rng.standard_normal((3, 4)))
        check_op(lambda x: ad.mul(ad.softmax(x, axis=-1), w), (3, 4), rng, rtol=1e-5)

    def test_layer_norm(self, rng):
        w = Tensor(rng.standard_normal((2, 6)))
        check_op(lambda x: ad.mul(ad.layer_norm(x), w), (2, 6), rng, rtol=1e-4)

    def test_layer_norm_output_stats(self, rng):
        x = Tensor(rng.standard_normal((5, 32)))
        y = ad.layer_norm(x).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-4)


class TestGraphMechanics:
    def test_diamond_reuse(self, rng):
        # y = a*b + a*c reuses a; grad_a = b + c.
        a = Tensor(rng.standard_normal((3,)), requires_grad=True)
        b = Tensor(rng.standard_normal((3,)))
        c = Tensor(rng.standard_normal((3,)))
        ad.sum_all(ad.add(ad.mul(a, b), ad.mul(a, c))).backward()
        np.testing.assert_allclose(a.grad, b.data + c.data, rtol=1e-12)

    def test_no_grad_builds_no_tape(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            out = ad.mul(a, a)
        assert out._backward is None and not out.requires_grad

    def test_backward_requires_scalar(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.mul(a, a).backward()

    def test_constant_parents_get_no_grad(self, rng):
        a = Tensor(rng.standard_normal(4), requires_grad=True)
        const = Tensor(rng.standard_normal(4))
        ad.sum_all(ad.mul(a, const)).backward()
        assert const.grad is None

    def test_dtype_preserved_float32(self):
        a = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        b = Tensor(np.ones((2, 2), np.float32))
        out = ad.gelu(ad.add(ad.matmul(a, b), ad.scale(b, 0.5)))
        assert out.data.dtype == np.float32
        ad.sum_all(out).backward()
        assert a.grad.dtype == np.float32

    def test_deep_chain_no_recursion_error(self):
        a = Tensor(np.ones(1), requires_grad=True)
        x = a
        for _ in range(3000):
            x = ad.add(x, a)
        ad.sum_all(x).backward()
        assert a.grad[0] == pytest.approx(3001.0)
