import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from casrf import autodiff as ad
from casrf.errors import BroadcastError, GraphError, NumericsError, ShapeError

from oracles import check_grad, conv2d_loops, conv3d_loops, numeric_grad

rng = np.random.default_rng(20240817)


# ---------------------------------------------------------------------------
# graph mechanics
# ---------------------------------------------------------------------------


class TestGraphSemantics:
    def test_backward_requires_scalar(self):
        t = ad.Tensor([1.0, 2.0], requires_grad=True)
        y = ad.mul(t, 2.0)
        with pytest.raises(ShapeError):
            y.backward()

    def test_backward_requires_grad(self):
        t = ad.Tensor([1.0])
        y = ad.tsum(ad.mul(t, 2.0))
        with pytest.raises(GraphError):
            y.backward()

    def test_double_backward_raises(self):
        t = ad.Tensor([1.0, 2.0], requires_grad=True)
        y = ad.tsum(ad.mul(t, t))
        y.backward()
        with pytest.raises(GraphError):
            y.backward()

    def test_backward_through_consumed_subgraph_raises(self):
        t = ad.Tensor([1.0, 2.0], requires_grad=True)
        h = ad.mul(t, t)
        y1 = ad.tsum(h)
        y2 = ad.tsum(ad.mul(h, 2.0))
        y1.backward()
        with pytest.raises(GraphError):
            y2.backward()

    def test_grad_accumulates_until_cleared(self):
        t = ad.Tensor([1.0, 2.0], requires_grad=True)
        ad.tsum(ad.mul(t, 3.0)).backward()
        ad.tsum(ad.mul(t, 3.0)).backward()
        np.testing.assert_allclose(t.grad, [6.0, 6.0])
        t.grad = None
        ad.tsum(t).backward()
        np.testing.assert_allclose(t.grad, [1.0, 1.0])

    def test_diamond_graph_accumulates_paths(self):
        # y = x*x + x*x should give dy/dx = 4x
        t = ad.Tensor([3.0], requires_grad=True)
        h = ad.mul(t, t)
        ad.tsum(ad.add(h, h)).backward()
        np.testing.assert_allclose(t.grad, [12.0])

    def test_no_grad_blocks_recording(self):
        t = ad.Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.mul(t, t)
        assert not y.requires_grad
        assert y._bwd is None

    def test_detach_severs_graph(self):
        t = ad.Tensor([2.0], requires_grad=True)
        y = ad.tsum(ad.mul(t.detach(), t))
        y.backward()
        np.testing.assert_allclose(t.grad, [2.0])

    def test_constant_branches_get_no_grad(self):
        t = ad.Tensor([1.0, 2.0])
        y = ad.mul(t, 2.0)
        assert not y.requires_grad

    def test_dtype_switch(self):
        ad.set_default_dtype(np.float32)
        t = ad.Tensor([1.0])
        assert t.dtype == np.float32
        ad.set_default_dtype(np.float64)
        assert ad.Tensor([1.0]).dtype == np.float64

    def test_debug_numerics_raises(self):
        ad.debug_numerics(True)
        t = ad.Tensor([-1.0], requires_grad=True)
        with np.errstate(invalid="ignore"):
            with pytest.raises(NumericsError):
                ad.log(t)
        ad.debug_numerics(False)


# ---------------------------------------------------------------------------
# elementwise + broadcasting
# ---------------------------------------------------------------------------


class TestElementwise:
    def test_add_sub_mul_div_grads(self):
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((3, 4)) + 3.0
        for op in (ad.add, ad.sub, ad.mul, ad.div):
            check_grad(lambda t: ad.tsum(ad.mul(op(t, b0), rng_w)), a0)

    def test_broadcast_trailing(self):
        a = ad.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = ad.Tensor(rng.standard_normal((4,)), requires_grad=True)
        y = ad.tsum(ad.mul(a, b))
        y.backward()
        assert a.grad.shape == (2, 3, 4)
        assert b.grad.shape == (4,)
        np.testing.assert_allclose(b.grad, a.values.sum(axis=(0, 1)))

    def test_broadcast_keepdim_ones(self):
        a = ad.Tensor(rng.standard_normal((3, 1, 4)), requires_grad=True)
        b = ad.Tensor(rng.standard_normal((3, 5, 1)), requires_grad=True)
        ad.tsum(ad.mul(a, b)).backward()
        assert a.grad.shape == (3, 1, 4)
        assert b.grad.shape == (3, 5, 1)

    def test_incompatible_shapes_raise(self):
        a = ad.Tensor(np.zeros((3, 4)))
        b = ad.Tensor(np.zeros((3, 5)))
        with pytest.raises(BroadcastError):
            ad.add(a, b)

    @given(
        st.integers(1, 4), st.integers(1, 4), st.integers(0, 1),
        st.integers(0, 1), st.integers(1, 10**6),
    )
    @settings(max_examples=40, deadline=None)
    def test_broadcast_grad_matches_fd(self, m, n, drop_a, drop_b, seed):
        r = np.random.default_rng(seed)
        sa = (1 if drop_a else m, n)
        sb = (m, 1 if drop_b else n)
        a0 = r.standard_normal(sa)
        b0 = r.standard_normal(sb)
        w = r.standard_normal((m, n))
        bt = ad.Tensor(b0)
        check_grad(lambda t: ad.tsum(ad.mul(ad.mul(t, bt), w)), a0)

    def test_unary_grads(self):
        x0 = rng.uniform(0.2, 2.0, size=(4, 3))
        for op in (ad.exp, ad.log, ad.sqrt, ad.sigmoid, ad.tanh, ad.softplus,
                   ad.relu, ad.absolute, ad.neg):
            check_grad(lambda t: ad.tsum(ad.mul(op(t), rng_w2)), x0, rtol=1e-5)

    def test_power_grad(self):
        x0 = rng.uniform(0.5, 2.0, size=(5,))
        check_grad(lambda t: ad.tsum(ad.power(t, 3.0)), x0, rtol=1e-5)

    def test_clip_grad_masks_outside(self):
        t = ad.Tensor([-2.0, 0.5, 2.0], requires_grad=True)
        ad.tsum(ad.clip(t, 0.0, 1.0)).backward()
        np.testing.assert_allclose(t.grad, [0.0, 1.0, 0.0])

    def test_maximum_grad_tie_to_first(self):
        a = ad.Tensor([1.0, 5.0, 2.0], requires_grad=True)
        b = ad.Tensor([1.0, 3.0, 4.0], requires_grad=True)
        ad.tsum(ad.maximum(a, b)).backward()
        np.testing.assert_allclose(a.grad, [1.0, 1.0, 0.0])
        np.testing.assert_allclose(b.grad, [0.0, 0.0, 1.0])

    def test_softplus_stable_at_extremes(self):
        t = ad.Tensor([-800.0, 0.0, 800.0])
        y = ad.softplus(t)
        assert np.all(np.isfinite(y.values))
        np.testing.assert_allclose(y.values[2], 800.0)


rng_w = rng.standard_normal((3, 4))
rng_w2 = rng.standard_normal((4, 3))


# ---------------------------------------------------------------------------
# reductions and softmax
# ---------------------------------------------------------------------------


class TestReductions:
    def test_sum_axis_grads(self):
        x0 = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((2, 4))
        check_grad(lambda t: ad.tsum(ad.mul(ad.tsum(t, axis=1), w)), x0)

    def test_mean_axis_grads(self):
        x0 = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((3, 4))
        check_grad(lambda t: ad.tsum(ad.mul(ad.tmean(t, axis=0), w)), x0)

    def test_mean_keepdims(self):
        x0 = rng.standard_normal((2, 5))
        check_grad(lambda t: ad.tsum(ad.mul(ad.sub(t, ad.tmean(t, axis=1, keepdims=True)), x0)), x0)

    def test_max_axis_grad(self):
        x0 = np.array([[1.0, 3.0, 2.0], [5.0, 4.0, 0.0]])
        t = ad.Tensor(x0, requires_grad=True)
        ad.tsum(ad.tmax(t, axis=1)).backward()
        np.testing.assert_allclose(t.grad, [[0, 1, 0], [1, 0, 0]])

    def test_max_full_reduction(self):
        x0 = rng.standard_normal((3, 3)) * 0.1
        check_grad(lambda t: ad.tmax(t), x0)

    def test_softmax_matches_definition(self):
        x0 = rng.standard_normal((5, 7))
        y = ad.softmax(ad.Tensor(x0), axis=1)
        e = np.exp(x0)
        np.testing.assert_allclose(y.values, e / e.sum(1, keepdims=True), rtol=1e-12)
        np.testing.assert_allclose(y.values.sum(1), np.ones(5), rtol=1e-12)

    def test_softmax_grad(self):
        x0 = rng.standard_normal((4, 6))
        w = rng.standard_normal((4, 6))
        check_grad(lambda t: ad.tsum(ad.mul(ad.softmax(t, axis=1), w)), x0, rtol=1e-5)

    def test_softmax_shift_invariance(self):
        x0 = rng.standard_normal((8,))
        a = ad.softmax(ad.Tensor(x0), axis=0).values
        b = ad.softmax(ad.Tensor(x0 + 1000.0), axis=0).values
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_cumsum_grad(self):
        x0 = rng.standard_normal((3, 5))
        w = rng.standard_normal((3, 5))
        check_grad(lambda t: ad.tsum(ad.mul(ad.cumsum(t, axis=1), w)), x0)

    def test_cumsum_values(self):
        x0 = rng.standard_normal((4, 3))
        np.testing.assert_allclose(ad.cumsum(ad.Tensor(x0), 0).values, np.cumsum(x0, 0))


# ---------------------------------------------------------------------------
# shape ops, indexing, gathers
# ---------------------------------------------------------------------------


class TestShapeOps:
    def test_reshape_transpose_moveaxis_grads(self):
        x0 = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((4, 6))
        check_grad(lambda t: ad.tsum(ad.mul(ad.reshape(ad.moveaxis(t, 0, 2), (4, 6)), w)), x0)

    def test_getitem_grad(self):
        x0 = rng.standard_normal((5, 4))
        w = rng.standard_normal((2, 4))
        check_grad(lambda t: ad.tsum(ad.mul(t[1:3], w)), x0)

    def test_concat_stack_grads(self):
        a0 = rng.standard_normal((2, 3))
        b0 = rng.standard_normal((2, 3))
        bt = ad.Tensor(b0)
        w = rng.standard_normal((4, 3))
        check_grad(lambda t: ad.tsum(ad.mul(ad.concat([t, bt], axis=0), w)), a0)
        w2 = rng.standard_normal((2, 2, 3))
        check_grad(lambda t: ad.tsum(ad.mul(ad.stack([t, bt], axis=0), w2)), a0)

    def test_gather_rows_values_and_grad(self):
        x0 = rng.standard_normal((6, 3))
        idx = np.array([0, 2, 2, 5])
        t = ad.Tensor(x0, requires_grad=True)
        y = ad.gather_rows(t, idx)
        np.testing.assert_allclose(y.values, x0[idx])
        w = rng.standard_normal((4, 3))
        ad.tsum(ad.mul(y, w)).backward()
        want = np.zeros_like(x0)
        for i, j in enumerate(idx):
            want[j] += w[i]
        np.testing.assert_allclose(t.grad, want)

    def test_gather_depth_values_and_grad(self):
        x0 = rng.standard_normal((2, 5, 3, 4))
        idx = rng.integers(0, 5, size=(2, 3, 4))
        t = ad.Tensor(x0, requires_grad=True)
        y = ad.gather_depth(t, idx)
        assert y.shape == (2, 2, 3, 4)
        for c in range(2):
            for k in range(2):
                for i in range(3):
                    for j in range(4):
                        assert y.values[c, k, i, j] == x0[c, idx[k, i, j], i, j]
        w = rng.standard_normal(y.shape)
        ad.tsum(ad.mul(y, w)).backward()
        want = np.zeros_like(x0)
        for c in range(2):
            for k in range(2):
                for i in range(3):
                    for j in range(4):
                        want[c, idx[k, i, j], i, j] += w[c, k, i, j]
        np.testing.assert_allclose(t.grad, want)


# ---------------------------------------------------------------------------
# matmul and convolutions
# ---------------------------------------------------------------------------


class TestMatmul:
    def test_2d_values(self):
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((4, 5))
        y = ad.matmul(ad.Tensor(a0), ad.Tensor(b0))
        np.testing.assert_allclose(y.values, a0 @ b0, rtol=1e-12)

    def test_2d_grads(self):
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((4, 2))
        w = rng.standard_normal((3, 2))
        bt = ad.Tensor(b0, requires_grad=True)
        check_grad(lambda t: ad.tsum(ad.mul(ad.matmul(t, bt), w)), a0)
        at = ad.Tensor(a0)
        check_grad(lambda t: ad.tsum(ad.mul(ad.matmul(at, t), w)), b0)

    def test_nd_by_2d(self):
        a0 = rng.standard_normal((2, 3, 4))
        b0 = rng.standard_normal((4, 5))
        w = rng.standard_normal((2, 3, 5))
        bt = ad.Tensor(b0, requires_grad=True)
        check_grad(lambda t: ad.tsum(ad.mul(ad.matmul(t, bt), w)), a0)
        check_grad(lambda t: ad.tsum(ad.mul(ad.matmul(ad.Tensor(a0), t), w)), b0)

    def test_batched(self):
        a0 = rng.standard_normal((3, 2, 4))
        b0 = rng.standard_normal((3, 4, 2))
        w = rng.standard_normal((3, 2, 2))
        check_grad(lambda t: ad.tsum(ad.mul(ad.matmul(t, ad.Tensor(b0)), w)), a0)
        check_grad(lambda t: ad.tsum(ad.mul(ad.matmul(ad.Tensor(a0), t), w)), b0)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.zeros((2, 2, 3))), ad.Tensor(np.zeros((3, 3, 4))))


class TestConv:
    def test_conv2d_matches_loops(self):
        for stride, pad in [(1, 0), (1, 1), (2, 1)]:
            x0 = rng.standard_normal((2, 3, 7, 8))
            w0 = rng.standard_normal((4, 3, 3, 3))
            got = ad.conv2d(ad.Tensor(x0), ad.Tensor(w0), stride=stride, pad=pad)
            want = conv2d_loops(x0, w0, stride=stride, pad=pad)
            np.testing.assert_allclose(got.values, want, rtol=1e-10, atol=1e-12)

    def test_conv2d_grads(self):
        x0 = rng.standard_normal((1, 2, 5, 6))
        w0 = rng.standard_normal((3, 2, 3, 3))
        wt = ad.Tensor(w0, requires_grad=True)
        mask = rng.standard_normal((1, 3, 3, 3))
        check_grad(lambda t: ad.tsum(ad.mul(ad.conv2d(t, wt, stride=2, pad=1), mask)), x0, rtol=1e-5)
        xt = ad.Tensor(x0)
        check_grad(lambda t: ad.tsum(ad.mul(ad.conv2d(xt, t, stride=2, pad=1), mask)), w0, rtol=1e-5)

    def test_conv3d_matches_loops(self):
        x0 = rng.standard_normal((3, 4, 5, 6))
        w0 = rng.standard_normal((2, 3, 3, 3, 3))
        got = ad.conv3d(ad.Tensor(x0), ad.Tensor(w0), pad=1)
        want = conv3d_loops(x0, w0, pad=1)
        np.testing.assert_allclose(got.values, want, rtol=1e-10, atol=1e-12)

    def test_conv3d_grads(self):
        x0 = rng.standard_normal((2, 3, 4, 4))
        w0 = rng.standard_normal((2, 2, 3, 3, 3))
        wt = ad.Tensor(w0, requires_grad=True)
        mask = rng.standard_normal((2, 3, 4, 4))
        check_grad(lambda t: ad.tsum(ad.mul(ad.conv3d(t, wt), mask)), x0, rtol=1e-5)
        xt = ad.Tensor(x0)
        check_grad(lambda t: ad.tsum(ad.mul(ad.conv3d(xt, t), mask)), w0, rtol=1e-5)

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv2d(ad.Tensor(np.zeros((1, 3, 5, 5))), ad.Tensor(np.zeros((2, 4, 3, 3))))


# ---------------------------------------------------------------------------
# composite sanity: a tiny training step decreases a quadratic
# ---------------------------------------------------------------------------


def test_gradient_descent_on_quadratic():
    w = ad.Tensor(np.array([5.0, -3.0]), requires_grad=True)
    for _ in range(200):
        loss = ad.tsum(ad.mul(w, w))
        loss.backward()
        w.values -= 0.1 * w.grad
        w.grad = None
    assert np.abs(w.values).max() < 1e-6
