import itertools

import numpy as np
import pytest

from tests.conftest import leaf
from trisr import tensor as T
from trisr.exceptions import ShapeError
from trisr.tensor import Graph, Tensor, backward, grad_check


def reference_conv3d(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation."""
    n, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding)))
    od = (d + 2 * padding - k) // stride + 1
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, od, oh, ow))
    for i, o, z, y, xx in itertools.product(range(n), range(cout), range(od), range(oh), range(ow)):
        z0, y0, x0 = z * stride, y * stride, xx * stride
        out[i, o, z, y, xx] = np.sum(xp[i, :, z0:z0 + k, y0:y0 + k, x0:x0 + k] * w[o]) + b[o]
    return out


def random_shapes(rng, count=20, max_rank=5, max_dim=3):
    """``count`` shapes of random rank and extent, kept small for finite differences."""
    shapes = []
    for _ in range(count):
        rank = int(rng.integers(1, max_rank + 1))
        shapes.append(tuple(int(n) for n in rng.integers(1, max_dim + 1, size=rank)))
    return shapes


class TestConv3d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 4, 4, 4)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1, 1))
        out = T.conv3d(x, w, Tensor(np.zeros(3)), stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_summation(self):
        x = Tensor(np.ones((1, 1, 3, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3, 3)))
        out = T.conv3d(x, w, Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.item() == 27.0

    @pytest.mark.parametrize("k,stride,padding", list(itertools.product([1, 3], [1, 2], [0, 1])))
    def test_matches_loop_reference(self, rng, k, stride, padding):
        x = rng.standard_normal((2, 3, 5, 5, 5))
        w = rng.standard_normal((2, 3, k, k, k))
        b = rng.standard_normal(2)
        out = T.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, reference_conv3d(x, w, b, stride, padding), atol=1e-6)

    def test_strided_padded_case(self, rng):
        x = rng.standard_normal((1, 2, 4, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = np.zeros(3)
        out = T.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
        assert out.shape == (1, 3, 2, 2, 2)
        np.testing.assert_allclose(out.data, reference_conv3d(x, w, b, 2, 1), atol=1e-6)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            T.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))))

    def test_input_smaller_than_kernel(self):
        with pytest.raises(ShapeError):
            T.conv3d(Tensor(np.zeros((1, 1, 2, 4, 4))), Tensor(np.zeros((1, 1, 3, 3, 3))))

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0)])
    def test_gradients(self, rng, stride, padding):
        x = leaf(rng, (1, 2, 4, 4, 4))
        w = leaf(rng, (2, 2, 3, 3, 3))
        b = leaf(rng, (2,))
        cotangent = rng.standard_normal(T.conv3d(x, w, b, stride, padding).shape)

        def loss(arg, which):
            args = {"x": x, "w": w, "b": b}
            args[which] = arg
            return T.sum(T.mul(T.conv3d(args["x"], args["w"], args["b"], stride, padding), cotangent))

        for which, t in (("x", x), ("w", w), ("b", b)):
            report = grad_check(lambda a: loss(a, which), t, h=1e-6)
            assert report.passed, (which, report.max_rel_error)


class TestElementwise:
    def test_values(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5
        assert T.leaky_relu(Tensor(-2.0), 0.2).item() == pytest.approx(-0.4)
        assert T.leaky_relu(Tensor(3.0), 0.2).item() == 3.0

    def test_l1_identity(self, rng):
        x = leaf(rng, (2, 3))
        with Graph() as g:
            loss = T.l1(x, x)
        backward(loss, g)
        assert loss.item() == 0.0
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))))
        with pytest.raises(ShapeError):
            T.l1(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_channel_broadcast(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 2, 2, 2)))
        b = Tensor(np.arange(3.0).reshape(1, 3, 1, 1, 1))
        np.testing.assert_allclose(T.add(x, b).data[:, 2], x.data[:, 2] + 2.0)

    def test_scalar_operand_keeps_float32(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        assert T.mul(x, 0.2).dtype == np.float32
        assert T.sub(1.0, x).dtype == np.float32

    @pytest.mark.parametrize("op", [
        T.sigmoid,
        T.exp,
        lambda t: T.sub(T.add(t, 0.5), T.mul(t, 3.0)),
        lambda t: T.mul(t, t),
        lambda t: T.div(1.0, T.add(T.mul(t, t), 1.0)),
    ])
    def test_smooth_gradients(self, rng, op):
        for shape in random_shapes(rng):
            x = leaf(rng, shape)
            assert grad_check(lambda t: T.sum(op(t)), x, h=1e-5).passed

    @pytest.mark.parametrize("op", [T.abs, lambda t: T.leaky_relu(t, 0.2), lambda t: T.log(T.abs(t), eps=1e-12)])
    def test_kinked_gradients(self, rng, op):
        for shape in random_shapes(rng):
            x = leaf(rng, shape, away_from_zero=True)
            assert grad_check(lambda t: T.mean(op(t)), x, h=1e-6).passed

    def test_broadcast_gradients(self, rng):
        x = leaf(rng, (2, 3, 2, 2, 2))
        b = leaf(rng, (1, 3, 1, 1, 1))
        assert grad_check(lambda t: T.sum(T.mul(T.add(x, t), x)), b, h=1e-6).passed

    def test_log_clamp_has_zero_gradient(self):
        x = Tensor(np.array([1e-20, 0.5]), requires_grad=True)
        with Graph() as g:
            loss = T.sum(T.log(x, eps=1e-12))
        backward(loss, g)
        assert loss.item() == pytest.approx(np.log(1e-12) + np.log(0.5))
        np.testing.assert_allclose(x.grad, [0.0, 2.0])


class TestReductionsAndShapes:
    def test_mean_gradient(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Graph() as g:
            loss = T.mean(x)
        backward(loss, g)
        np.testing.assert_array_equal(x.grad, 0.25)

    def test_axis_mean_gradient(self, rng):
        x = leaf(rng, (2, 3, 2, 2, 2))
        assert grad_check(lambda t: T.sum(T.mul(T.mean(t, axis=(2, 3, 4)), T.mean(t, axis=(2, 3, 4)))), x, h=1e-5).passed

    def test_concat_and_reshape(self, rng):
        a, b = leaf(rng, (1, 2, 2, 2, 2)), leaf(rng, (1, 3, 2, 2, 2))
        cotangent = rng.standard_normal((1, 5, 2, 2, 2))
        assert grad_check(lambda t: T.sum(T.mul(T.concat([t, b]), cotangent)), a, h=1e-6).passed
        assert grad_check(lambda t: T.sum(T.mul(T.reshape(T.concat([a, t]), (5, 8)), cotangent.reshape(5, 8))), b, h=1e-6).passed

    def test_concat_rejects_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat([Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 2, 2)))])


class TestInstanceNorm:
    def test_moments(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4, 4)) * 5 + 2)
        out = T.instance_norm(x, eps=1e-5).data
        np.testing.assert_allclose(out.mean(axis=(2, 3, 4)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(2, 3, 4)), 1.0, atol=1e-4)

    def test_constant_instance(self):
        out = T.instance_norm(Tensor(np.full((1, 2, 2, 2, 2), 3.0)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_pass_reference(self, rng):
        x = rng.standard_normal((1, 2, 3, 4, 5))
        mu = x.mean(axis=(2, 3, 4), keepdims=True)
        var = ((x - mu) ** 2).mean(axis=(2, 3, 4), keepdims=True)
        np.testing.assert_allclose(T.instance_norm(Tensor(x)).data, (x - mu) / np.sqrt(var + 1e-5), atol=1e-6)

    def test_gradient(self, rng):
        x = leaf(rng, (2, 2, 3, 3, 2))
        cotangent = rng.standard_normal(x.shape)
        assert grad_check(lambda t: T.sum(T.mul(T.instance_norm(t), cotangent)), x, h=1e-5).passed

    def test_needs_two_elements(self):
        with pytest.raises(ShapeError):
            T.instance_norm(Tensor(np.zeros((1, 1, 1, 1, 1))))


class TestPixelShuffle:
    def test_shape(self):
        assert T.pixel_shuffle3d(Tensor(np.zeros((1, 8, 2, 2, 2))), 2).shape == (1, 1, 4, 4, 4)

    def test_channel_placement(self):
        x = np.zeros((1, 8, 1, 1, 1))
        x[0, :, 0, 0, 0] = np.arange(8)
        out = T.pixel_shuffle3d(Tensor(x), 2).data
        for m in range(8):
            i, j, k = m // 4, (m // 2) % 2, m % 2
            assert out[0, 0, i, j, k] == m

    def test_index_formula(self, rng):
        r = 2
        x = rng.standard_normal((2, 16, 2, 3, 2))
        out = T.pixel_shuffle3d(Tensor(x), r).data
        for n, c, d, h, w, i, j, k in itertools.product(range(2), range(2), range(2), range(3), range(2), range(2), range(2), range(2)):
            assert out[n, c, d * r + i, h * r + j, w * r + k] == x[n, c * 8 + i * 4 + j * 2 + k, d, h, w]

    def test_inverse(self, rng):
        x = rng.standard_normal((2, 16, 3, 2, 4))
        back = T.pixel_unshuffle3d(T.pixel_shuffle3d(Tensor(x), 2), 2)
        np.testing.assert_array_equal(back.data, x)

    def test_indivisible_channels(self):
        with pytest.raises(ShapeError):
            T.pixel_shuffle3d(Tensor(np.zeros((1, 6, 2, 2, 2))), 2)

    def test_gradient_is_inverse_permutation(self, rng):
        x = leaf(rng, (1, 8, 2, 2, 2))
        cotangent = rng.standard_normal((1, 1, 4, 4, 4))
        with Graph() as g:
            loss = T.sum(T.mul(T.pixel_shuffle3d(x, 2), cotangent))
        backward(loss, g)
        np.testing.assert_array_equal(x.grad, T.pixel_unshuffle3d(Tensor(cotangent), 2).data)


class TestBackward:
    def test_non_scalar_loss(self, rng):
        x = leaf(rng, (2, 2))
        with Graph() as g:
            y = T.mul(x, 2.0)
        with pytest.raises(ShapeError):
            backward(y, g)

    def test_accumulates(self, rng):
        x = leaf(rng, (3, 3))
        with Graph() as g:
            loss = T.sum(T.mul(x, x))
        backward(loss, g)
        once = x.grad.copy()
        backward(loss, g)
        np.testing.assert_allclose(x.grad, 2 * once)

    def test_unreachable_untouched(self, rng):
        x, z = leaf(rng, (2,)), leaf(rng, (2,))
        z.grad = np.full(2, 9.0)
        with Graph() as g:
            loss = T.sum(x)
            T.sum(z)
        backward(loss, g)
        np.testing.assert_array_equal(z.grad, 9.0)

    def test_inputs_restrict_targets(self, rng):
        a, b = leaf(rng, (3,)), leaf(rng, (3,))
        with Graph() as g:
            loss = T.sum(T.mul(a, b))
        backward(loss, g, inputs=[a])
        np.testing.assert_allclose(a.grad, b.data)
        assert b.grad is None

    def test_no_graph_records_nothing(self, rng):
        x = leaf(rng, (2,))
        y = T.mul(x, 3.0)
        assert not y.requires_grad
        assert y.is_leaf

    def test_deterministic(self, rng):
        x = rng.standard_normal((1, 2, 4, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3, 3))

        def run():
            xt = Tensor(x, requires_grad=True)
            wt = Tensor(w, requires_grad=True)
            with Graph() as g:
                loss = T.mean(T.leaky_relu(T.instance_norm(T.conv3d(xt, wt, padding=1))))
            backward(loss, g)
            return loss.data, xt.grad, wt.grad

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)

    def test_composite_chain(self, rng):
        """conv -> instance norm -> leaky relu -> l1 against central differences."""
        w = leaf(rng, (3, 2, 3, 3, 3))
        b = leaf(rng, (3,))
        x0 = leaf(rng, (1, 2, 4, 4, 4))

        def forward(x, w_):
            return T.leaky_relu(T.instance_norm(T.conv3d(x, w_, b, padding=1)), 0.2)

        # keep the l1 target well away from the output so |out - y| never hits 0
        y = Tensor(forward(x0, w).data + np.where(rng.random((1, 3, 4, 4, 4)) < 0.5, -0.5, 0.5))

        assert grad_check(lambda t: T.l1(forward(t, w), y), x0, h=1e-6).passed
        assert grad_check(lambda t: T.l1(forward(x0, t), y), w, h=1e-6).passed


def test_grad_check_flags_wrong_gradient(rng):
    x = leaf(rng, (4,))

    def broken(t):
        # forward value of t^2 but the graph only sees t
        return T.sum(T.add(T.mul(t, Tensor._wrap(t.data.copy())), 0.0))

    report = grad_check(broken, x, h=1e-6)
    assert not report.passed
    assert report.n_elements == 4


def test_grad_check_floor_sets_the_absolute_scale(rng):
    x = leaf(rng, (5,))

    def slightly_off(t):
        # d/dt is 1e-5 + 1e-8 but the graph only knows about the 1e-5 part
        return T.sum(T.add(T.mul(t, 1e-5), Tensor._wrap(t.data * 1e-8)))

    assert grad_check(slightly_off, x, h=1e-6).passed
    assert not grad_check(slightly_off, x, h=1e-6, floor=1e-8).passed


def random_conv_case(rng):
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    dims = tuple(int(n) for n in rng.integers(max(k - 2 * padding, 1), 6, size=3))
    n, cin, cout = (int(v) for v in rng.integers(1, 3, size=3))
    return (n, cin, *dims), (cout, cin, k, k, k), stride, padding


class TestRandomShapeGradients:
    @pytest.mark.parametrize("case", range(20))
    def test_conv3d(self, case):
        rng = np.random.default_rng(case)
        x_shape, w_shape, stride, padding = random_conv_case(rng)
        x, w, b = leaf(rng, x_shape), leaf(rng, w_shape), leaf(rng, (w_shape[0],))
        out = T.conv3d(x, w, b, stride, padding)
        np.testing.assert_allclose(
            out.data, reference_conv3d(x.data, w.data, b.data, stride, padding), atol=1e-10
        )
        cotangent = rng.standard_normal(out.shape)

        def loss(arg, which):
            args = {"x": x, "w": w, "b": b}
            args[which] = arg
            conv = T.conv3d(args["x"], args["w"], args["b"], stride, padding)
            return T.sum(T.mul(conv, cotangent))

        for which, t in (("x", x), ("w", w), ("b", b)):
            report = grad_check(lambda a: loss(a, which), t, h=1e-6)
            assert report.passed, (case, which, report.max_rel_error)

    def test_instance_norm(self, rng):
        for shape in random_shapes(rng, max_rank=3):
            shape = (1, 1, 2) + shape[:2] if len(shape) > 1 else (1, 2, 2) + shape * 2
            x = leaf(rng, shape)
            cotangent = rng.standard_normal(shape)
            loss = lambda t: T.sum(T.mul(T.instance_norm(t), cotangent))  # noqa: E731
            assert grad_check(loss, x, h=1e-5).passed, shape

    def test_axis_mean(self, rng):
        for shape in random_shapes(rng):
            x = leaf(rng, shape)
            axis = tuple(range(0, len(shape), 2))
            cotangent = rng.standard_normal(T.mean(x, axis=axis).shape)
            loss = lambda t: T.sum(T.mul(T.mean(t, axis=axis), cotangent))  # noqa: E731
            assert grad_check(loss, x, h=1e-6).passed, shape

    def test_pixel_shuffle(self, rng):
        for spatial in random_shapes(rng, max_rank=3, max_dim=2):
            d, h, w = (spatial + (1, 1, 1))[:3]
            x = leaf(rng, (1, 8, d, h, w))
            cotangent = rng.standard_normal((1, 1, 2 * d, 2 * h, 2 * w))
            loss = lambda t: T.sum(T.mul(T.pixel_shuffle3d(t, 2), cotangent))  # noqa: E731
            assert grad_check(loss, x, h=1e-6).passed, spatial

    def test_concat(self, rng):
        for spatial in random_shapes(rng, max_rank=3):
            spatial = (spatial + (1, 1, 1))[:3]
            a = leaf(rng, (1, int(rng.integers(1, 3)), *spatial))
            b = leaf(rng, (1, int(rng.integers(1, 3)), *spatial))
            cotangent = rng.standard_normal((1, a.shape[1] + b.shape[1], *spatial))
            loss = lambda t: T.sum(T.mul(T.concat([a, t]), cotangent))  # noqa: E731
            assert grad_check(loss, b, h=1e-6).passed, spatial


class TestConvSkipsUnwantedGradients:
    def test_plain_input_gets_no_gradient(self, rng, mocker):
        x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))
        w = leaf(rng, (3, 2, 3, 3, 3))
        spy = mocker.spy(T, "_conv_transpose_grad")
        with Graph() as g:
            loss = T.sum(T.conv3d(x, w, padding=1))
        backward(loss, g)
        assert spy.call_count == 0
        assert x.grad is None
        assert w.grad is not None

    def test_weight_gradient_skipped_when_not_a_target(self, rng):
        x = leaf(rng, (1, 2, 4, 4, 4))
        w = leaf(rng, (3, 2, 3, 3, 3))
        with Graph() as g:
            loss = T.sum(T.conv3d(x, w, padding=1))
        node = g.nodes[0]
        calls = []
        original = node.backward
        node.backward = lambda grad, wanted: calls.append(wanted) or original(grad, wanted)
        backward(loss, g, inputs=[x])
        assert calls == [(True, False)]
        assert x.grad is not None
        assert w.grad is None
