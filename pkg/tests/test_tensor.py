import numpy as np
import pytest

import dummyproto.tensor as T
from dummyproto import kernels
from dummyproto.errors import GraphError, NumericsError, ShapeError
from dummyproto.gradcheck import grad_check

from reference_impls import conv2d_six_loops


def tensor(data, grad=True):
    return T.Tensor(np.asarray(data, dtype=np.float64), grad_enabled=grad)


class TestForwardValues:
    def test_pairwise_sqdist_triangle(self):
        d = T.pairwise_sqdist(tensor([[0.0, 0.0]], grad=False), tensor([[3.0, 4.0]], grad=False))
        assert d.data.tolist() == [[25.0]]

    def test_relu(self):
        out = T.relu(tensor([-1.0, 0.0, 2.0], grad=False))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_log_softmax_stable_at_large_inputs(self):
        out = T.log_softmax(tensor([[1000.0, 1000.0]], grad=False))
        assert np.allclose(out.data, [[-np.log(2.0), -np.log(2.0)]], atol=1e-12)

    def test_log_softmax_normalizes(self, rng):
        x = tensor(rng.standard_normal((17, 9)) * 30.0, grad=False)
        out = T.log_softmax(x)
        sums = np.exp(out.data).sum(axis=-1)
        assert np.abs(sums - 1.0).max() <= 1e-12

    @pytest.mark.parametrize("shape,ksize,pad", [
        ((1, 1, 4, 4), 3, 0), ((1, 1, 4, 4), 3, 1), ((2, 3, 5, 7), 3, 1),
        ((2, 8, 16, 16), 3, 1), ((2, 8, 16, 16), 3, 0), ((1, 2, 6, 6), 5, 2),
    ])
    def test_conv2d_matches_six_loop_reference(self, each_backend, shape, ksize, pad, rng):
        x = rng.standard_normal(shape)
        w = rng.standard_normal((4, shape[1], ksize, ksize))
        b = rng.standard_normal(4)
        got = T.conv2d(tensor(x, grad=False), tensor(w, grad=False), tensor(b, grad=False), padding=pad)
        want = conv2d_six_loops(x, w, b, pad)
        assert np.abs(got.data - want).max() <= 1e-12

    def test_conv2d_non_square_kernel(self, each_backend, rng):
        x = rng.standard_normal((2, 2, 8, 9))
        w = rng.standard_normal((3, 2, 2, 4))
        b = rng.standard_normal(3)
        got = T.conv2d(tensor(x, grad=False), tensor(w, grad=False), tensor(b, grad=False), padding=1)
        want = conv2d_six_loops(x, w, b, 1)
        assert np.abs(got.data - want).max() <= 1e-12

    def test_maxpool_first_max_on_ties(self, each_backend):
        x = tensor(np.zeros((1, 1, 2, 2)))
        out = T.maxpool2x2(x)
        T.backward(T.sum_(out))
        assert (out.data == 0).all()
        # all four tie at 0; gradient goes to window cell (0, 0) only
        want = np.zeros((1, 1, 2, 2))
        want[0, 0, 0, 0] = 1.0
        assert (x.grad == want).all()

    def test_rowmax_is_permutation_invariant(self, each_backend, rng):
        x = rng.standard_normal((6, 11))
        base = T.rowmax(tensor(x, grad=False)).data
        for _ in range(20):
            perm = rng.permutation(6)
            assert (T.rowmax(tensor(x[perm], grad=False)).data == base).all()

    def test_forward_deterministic_bitwise(self, each_backend, rng):
        x = rng.standard_normal((3, 4, 10, 12))
        w = rng.standard_normal((5, 4, 3, 3))
        b = rng.standard_normal(5)
        r1 = T.conv2d(tensor(x, grad=False), tensor(w, grad=False), tensor(b, grad=False)).data
        r2 = T.conv2d(tensor(x, grad=False), tensor(w, grad=False), tensor(b, grad=False)).data
        assert (r1 == r2).all()


class TestBackward:
    def test_quadratic(self):
        w = tensor([1.0, 2.0])
        loss = T.sum_(T.mul(w, w))
        T.backward(loss)
        assert w.grad.tolist() == [2.0, 4.0]

    def test_sqdist_gradient(self):
        z = tensor([[1.0, 0.0]])
        c = tensor([[0.0, 0.0]], grad=False)
        loss = T.sum_(T.pairwise_sqdist(z, c))
        T.backward(loss)
        assert z.grad.tolist() == [[2.0, 0.0]]

    def test_second_backward_raises(self):
        w = tensor([3.0])
        loss = T.sum_(T.mul(w, w))
        T.backward(loss)
        with pytest.raises(GraphError):
            T.backward(loss)

    def test_non_scalar_loss_raises(self):
        w = tensor([1.0, 2.0])
        with pytest.raises(GraphError):
            T.backward(T.mul(w, w))

    def test_detached_loss_raises(self):
        with pytest.raises(GraphError):
            T.backward(tensor([1.0]))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))

    def test_nonfinite_output_raises(self):
        big = tensor([1e200])
        with pytest.raises(NumericsError):
            T.mul(big, big)


def _fd_check_unary(op, x, rng, probes=12, tol=1e-4):
    t = tensor(x)
    fn = lambda: T.sum_(T.mul(op(t), op(t)))  # noqa: E731 - squares make loss curvature generic
    err = grad_check(fn, [t], probes, rng)
    assert err < tol, err


class TestFiniteDifferences:
    """Backward of every kernel against central differences, h=1e-5."""

    def test_add_sub_mul_scale(self, rng):
        a = tensor(rng.standard_normal((4, 5)))
        b = tensor(rng.standard_normal((4, 5)))
        c = tensor(rng.standard_normal((1, 5)))  # broadcast path

        def fn():
            out = T.add(T.mul(a, b), T.scale(T.sub(a, c), 1.7))
            return T.sum_(T.mul(out, out))

        assert grad_check(fn, [a, b, c], 30, rng) < 1e-4

    def test_matmul(self, rng):
        a = tensor(rng.standard_normal((4, 6)))
        b = tensor(rng.standard_normal((6, 3)))

        def fn():
            out = T.matmul(a, b)
            return T.sum_(T.mul(out, out))

        assert grad_check(fn, [a, b], 30, rng) < 1e-4

    def test_conv2d(self, each_backend, rng):
        x = tensor(rng.standard_normal((2, 3, 6, 7)))
        w = tensor(rng.standard_normal((4, 3, 3, 3)))
        b = tensor(rng.standard_normal(4))

        def fn():
            out = T.conv2d(x, w, b, padding=1)
            return T.sum_(T.mul(out, out))

        assert grad_check(fn, [x, w, b], 40, rng) < 1e-4

    def test_maxpool(self, each_backend, rng):
        x = tensor(rng.standard_normal((2, 2, 6, 8)))

        def fn():
            out = T.maxpool2x2(x)
            return T.sum_(T.mul(out, out))

        assert grad_check(fn, [x], 30, rng) < 1e-4

    def test_relu(self, each_backend, rng):
        _fd_check_unary(T.relu, rng.standard_normal((5, 7)) + 0.05, rng)

    def test_relu_probe_exactly_at_zero_is_skipped(self, rng):
        x = tensor([-1.0, 0.0, 2.0])

        def fn():
            return T.sum_(T.relu(x))

        err = grad_check(fn, [x], 3, rng)
        assert grad_check.last_skipped == 1
        assert err < 1e-6

    def test_batchnorm_train_mode(self, each_backend, rng):
        x = tensor(rng.standard_normal((3, 4, 5, 6)))
        g = tensor(1.0 + 0.3 * rng.standard_normal(4))
        b = tensor(rng.standard_normal(4))
        # fixed projection so the loss is not invariant to the normalization
        r = tensor(rng.standard_normal((3, 4, 5, 6)), grad=False)

        def fn():
            st = T.BatchNormState(4)
            out = T.batchnorm2d(x, g, b, st, training=True)
            proj = T.mul(out, r)
            return T.sum_(T.mul(proj, proj))

        assert grad_check(fn, [x, g, b], 40, rng) < 1e-4

    def test_rowmax_mean_logsoftmax_sqdist(self, rng):
        a = tensor(rng.standard_normal((5, 8)))
        c = tensor(rng.standard_normal((3, 8)))

        def fn():
            pooled = T.rowmax(T.relu(a))
            d = T.pairwise_sqdist(a, c)
            lp = T.log_softmax(T.scale(d, -1.0))
            picked = T.take_per_row(lp, np.array([0, 1, 2, 0, 1]))
            return T.add(T.mean(picked), T.mean(T.mul(pooled, pooled)))

        assert grad_check(fn, [a, c], 40, rng) < 1e-4

    def test_composite_graph(self, each_backend, rng):
        x = tensor(rng.standard_normal((2, 1, 8, 10)))
        # no conv bias: batchnorm right after makes its gradient vanish
        w1 = tensor(0.4 * rng.standard_normal((3, 1, 3, 3)))
        g1 = tensor(np.ones(3))
        be1 = tensor(np.zeros(3))
        wl = tensor(0.4 * rng.standard_normal((3 * 4 * 5, 4)))

        def fn():
            st = T.BatchNormState(3)
            h = T.conv2d(x, w1, padding=1)
            h = T.batchnorm2d(h, g1, be1, st, training=True)
            h = T.relu(h)
            h = T.maxpool2x2(h)
            flat = T.reshape(h, (2, 3 * 4 * 5))
            z = T.matmul(flat, wl)
            lp = T.log_softmax(z)
            return T.scale(T.mean(T.take_per_row(lp, np.array([1, 3]))), -1.0)

        assert grad_check(fn, [w1, g1, be1, wl], 50, rng) < 1e-4

    def test_linear_layer_tight(self, rng):
        x = tensor(rng.standard_normal((6, 4)), grad=False)
        w = tensor(rng.standard_normal((4, 3)))

        def fn():
            return T.mean(T.matmul(x, w))

        # affine map: analytic gradient is exact, FD noise only
        assert grad_check(fn, [w], 10, rng) < 1e-6


class TestArena:
    def test_recycling_reuses_buffers(self, rng):
        with T.arena_scope() as arena:
            a = T.Tensor(rng.standard_normal((32, 32)))
            out1 = T.relu(a)
            ptr = out1.data.__array_interface__["data"][0]
            del out1
            arena.recycle()
            out2 = T.relu(a)
            assert out2.data.__array_interface__["data"][0] == ptr

    def test_values_unaffected_by_arena(self, rng):
        x = rng.standard_normal((3, 5))
        plain = T.relu(T.Tensor(x)).data.copy()
        with T.arena_scope() as arena:
            pooled = T.relu(T.Tensor(x)).data.copy()
            arena.recycle()
        assert (plain == pooled).all()
