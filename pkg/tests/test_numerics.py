import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes

from dxformer import numerics as nx
from dxformer.errors import ContractError, ShapeError

from conftest import max_rel_err, numeric_grad


def scalar_loss(fn, weights):
    """Build ``sum(weights * fn(x))`` so no gradient entry vanishes by symmetry."""

    def analytic(x_data):
        x = nx.Value(x_data.copy(), requires_grad=True)
        out = fn(x)
        loss = nx.reduce_sum(nx.mul(out, nx.const(weights)))
        loss.backward()
        return x.grad

    def plain(x_data):
        x = nx.Value(x_data, requires_grad=False)
        return float((fn(x).data * weights).sum())

    return analytic, plain


class TestMatmul:
    def test_identity(self):
        a = nx.const(np.eye(2))
        b = nx.const([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nx.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_hand_dot_product(self):
        out = nx.matmul(nx.const([[1.0, 2.0], [3.0, 4.0]]), nx.const([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_gradient_against_finite_differences(self, rng):
        A = rng.normal(size=(3, 4))
        B = rng.normal(size=(4, 2))
        a = nx.Value(A, requires_grad=True)
        b = nx.Value(B, requires_grad=True)
        nx.reduce_sum(nx.matmul(a, b)).backward()
        num_a = numeric_grad(lambda x: (x @ B).sum(), A)
        num_b = numeric_grad(lambda x: (A @ x).sum(), B)
        assert np.abs(a.grad - num_a).max() < 1e-5
        assert np.abs(b.grad - num_b).max() < 1e-5

    def test_batched_and_shared_rhs(self, rng):
        A = rng.normal(size=(2, 3, 4))
        W = rng.normal(size=(4, 5))
        G = rng.normal(size=(2, 3, 5))
        a = nx.Value(A, requires_grad=True)
        w = nx.Value(W, requires_grad=True)
        nx.reduce_sum(nx.mul(nx.matmul(a, w), nx.const(G))).backward()
        np.testing.assert_allclose(w.grad, np.einsum("bik,bin->kn", A, G), rtol=1e-12)
        np.testing.assert_allclose(a.grad, G @ W.T, rtol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            nx.matmul(nx.const(np.ones((2, 3))), nx.const(np.ones((4, 2))))

    def test_batch_mismatch(self):
        with pytest.raises(ShapeError):
            nx.matmul(nx.const(np.ones((2, 3, 4))), nx.const(np.ones((3, 4, 2))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nx.softmax_lastdim(nx.const([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_no_overflow(self):
        y = nx.softmax_lastdim(nx.const([1000.0, 0.0, 0.0])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y, [1.0, 0.0, 0.0], atol=1e-300)

    def test_rows_sum_to_one(self, rng):
        y = nx.softmax_lastdim(nx.const(rng.normal(size=(5, 7)))).data
        assert np.abs(y.sum(axis=-1) - 1).max() <= 1e-12

    def test_nan_propagates(self):
        y = nx.softmax_lastdim(nx.const([np.nan, 0.0])).data
        assert np.isnan(y).any()

    @given(st.integers(1, 4), st.integers(1, 9), st.floats(0.1, 50.0))
    def test_rows_normalized_and_in_open_interval(self, rows, cols, spread):
        x = np.random.default_rng(rows * 31 + cols).normal(scale=spread, size=(rows, cols))
        y = nx.softmax_lastdim(nx.const(x)).data
        assert np.abs(y.sum(-1) - 1).max() <= 1e-10
        assert np.all(y >= 0) and np.all(y <= 1)


class TestLayerNorm:
    def _ln(self, x, eps=1e-5):
        d = np.shape(x)[-1]
        return nx.layer_norm(nx.const(x), nx.const(np.ones(d)), nx.const(np.zeros(d)), eps)

    def test_constant_input(self):
        np.testing.assert_array_equal(self._ln([1.0, 1.0, 1.0]).data, [0.0, 0.0, 0.0])

    def test_population_variance(self):
        # variance of [1,2,3] is 2/3 -> 1/sqrt(2/3) = 1.224744871...
        y = self._ln([1.0, 2.0, 3.0], eps=1e-14).data
        np.testing.assert_allclose(y, [-1.2247448714, 0.0, 1.2247448714], atol=1e-9)

    def test_gradient_against_finite_differences(self, rng):
        x = rng.normal(size=(2, 4))
        gamma = rng.normal(size=4)
        beta = rng.normal(size=4)
        w = rng.normal(size=(2, 4))

        def f(xv, gv, bv):
            return float((nx.layer_norm(nx.const(xv), nx.const(gv), nx.const(bv)).data * w).sum())

        xs = nx.Value(x, requires_grad=True)
        gs = nx.Value(gamma, requires_grad=True)
        bs = nx.Value(beta, requires_grad=True)
        nx.reduce_sum(nx.mul(nx.layer_norm(xs, gs, bs), nx.const(w))).backward()
        assert max_rel_err(xs.grad, numeric_grad(lambda v: f(v, gamma, beta), x)) <= 1e-4
        assert max_rel_err(gs.grad, numeric_grad(lambda v: f(x, v, beta), gamma)) <= 1e-4
        assert max_rel_err(bs.grad, numeric_grad(lambda v: f(x, gamma, v), beta)) <= 1e-4

    @settings(max_examples=40)
    @given(array_shapes(min_dims=1, max_dims=3, min_side=2, max_side=6), st.integers(0, 10_000))
    def test_standardizes_non_constant_slices(self, shape, seed):
        x = np.random.default_rng(seed).normal(scale=3.0, size=shape) + 5.0
        y = self._ln(x, eps=1e-5).data
        var = x.var(axis=-1, keepdims=True)
        assert np.abs(y.mean(axis=-1)).max() <= 1e-8
        # eps-adjusted: expected variance is var / (var + eps)
        np.testing.assert_allclose(y.var(axis=-1, keepdims=True), var / (var + 1e-5), atol=1e-4)


class TestLayout:
    def test_transpose_involution(self, rng):
        x = rng.normal(size=(2, 3, 4))
        back = nx.transpose(nx.transpose(nx.const(x), 0, 1), 0, 1).data
        assert np.array_equal(back, x)

    def test_concat_token_axis(self):
        a = nx.const(np.ones((2, 3, 4)))
        b = nx.const(np.ones((2, 5, 4)))
        assert nx.concat([a, b], axis=1).shape == (2, 8, 4)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            nx.concat([nx.const(np.ones((2, 3))), nx.const(np.ones((3, 3)))], axis=1)

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            nx.transpose(nx.const(np.ones((2, 3))), 0, 2)

    def test_reduce_sum_gradient_is_ones(self, rng):
        x = nx.Value(rng.normal(size=(3, 2)), requires_grad=True)
        nx.reduce_sum(x).backward()
        assert np.array_equal(x.grad, np.ones((3, 2)))

    def test_embedding_sparse_gradient(self):
        table = nx.Value(np.arange(12.0).reshape(4, 3), requires_grad=True, name="E")
        out = nx.embedding(table, np.array([[0, 2], [2, 2]]))
        assert out.shape == (2, 2, 3)
        nx.reduce_sum(out).backward()
        np.testing.assert_array_equal(table.grad[:, 0], [1, 0, 3, 0])

    def test_embedding_out_of_range_names_table(self):
        table = nx.Value(np.zeros((4, 3)), name="time.E_M")
        with pytest.raises(IndexError, match="time.E_M"):
            nx.embedding(table, np.array([4]))


class TestBackward:
    def test_sum(self, rng):
        x = nx.Value(rng.normal(size=5), requires_grad=True)
        nx.reduce_sum(x).backward()
        assert np.array_equal(x.grad, np.ones(5))

    def test_square(self, rng):
        data = rng.normal(size=5)
        x = nx.Value(data, requires_grad=True)
        nx.reduce_sum(x * x).backward()
        np.testing.assert_allclose(x.grad, 2 * data, rtol=1e-15)

    def test_diamond_accumulates(self):
        x = nx.Value(np.array([3.0]), requires_grad=True)
        nx.reduce_sum(x + x).backward()
        assert x.grad[0] == 2.0

    def test_non_scalar_root(self):
        with pytest.raises(ContractError):
            nx.backward(nx.Value(np.ones(3), requires_grad=True) * 2.0)

    def test_deterministic(self, rng):
        w = nx.Value(rng.normal(size=(4, 4)), requires_grad=True)
        x = nx.const(rng.normal(size=(3, 4)))

        def run():
            w.zero_grad()
            h = nx.softmax_lastdim(nx.matmul(x, w))
            nx.reduce_sum(nx.layer_norm(h, nx.const(np.ones(4)), nx.const(np.zeros(4))) * h).backward()
            return w.grad.copy()

        assert np.array_equal(run(), run())

    def test_dump_graph(self):
        x = nx.Value(np.ones(2), requires_grad=True, name="x")
        text = nx.dump_graph(nx.reduce_sum(x * 2.0))
        assert "[x]" in text and "sum" in text


# Every differentiable op against central differences on random 64-bit inputs.
def _ops(rng):
    g4 = rng.normal(size=4)
    b4 = rng.normal(size=4)
    other = rng.normal(size=(1, 4))
    return {
        "add": (lambda v: nx.add(v, nx.const(other)), (3, 4)),
        "mul": (lambda v: nx.mul(v, nx.const(other)), (3, 4)),
        "scale": (lambda v: nx.scale(v, -2.5), (2, 3, 4)),
        "sub": (lambda v: nx.sub(nx.const(other), v), (3, 4)),
        "relu": (lambda v: nx.relu(v), (3, 4)),
        "gelu": (lambda v: nx.gelu(v), (2, 3, 4)),
        "transpose": (lambda v: nx.transpose(v, 0, 2), (2, 3, 4)),
        "reshape": (lambda v: nx.reshape(v, (4, 6)), (2, 3, 4)),
        "concat": (lambda v: nx.concat([v, nx.scale(v, 3.0)], axis=1), (2, 3, 4)),
        "slice": (lambda v: v[:, 1:3], (3, 4)),
        "broadcast": (lambda v: nx.broadcast_to(v, (2, 3, 4)), (1, 3, 4)),
        "reduce_sum": (lambda v: nx.reduce_sum(v, axis=1, keepdims=True), (2, 3, 4)),
        "reduce_mean": (lambda v: nx.reduce_mean(v, axis=(0, 2)), (2, 3, 4)),
        "softmax": (lambda v: nx.softmax_lastdim(v), (2, 3, 4)),
        "layer_norm": (lambda v: nx.layer_norm(v, nx.const(g4), nx.const(b4)), (2, 3, 4)),
        "matmul_self": (lambda v: nx.matmul(v, nx.transpose(v, -1, -2)), (2, 3, 4)),
        "linear": (lambda v: nx.linear(v, nx.const(np.outer(g4, b4)), nx.const(b4)), (2, 3, 4)),
    }


@pytest.mark.parametrize("op_name", sorted(_ops(np.random.default_rng(0))))
@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_op_gradient_property(op_name, seed):
    rng = np.random.default_rng(seed)
    fn, shape = _ops(rng)[op_name]
    x = rng.normal(size=shape)
    if op_name == "relu":
        # keep inputs clear of the kink at 0
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    out_shape = fn(nx.const(x)).shape
    weights = rng.normal(size=out_shape)
    analytic, plain = scalar_loss(fn, weights)
    assert max_rel_err(analytic(x), numeric_grad(plain, x)) <= 1e-4


class TestGradCheck:
    def test_linear_layer_passes(self, rng):
        params = {
            "w": nx.Value(rng.normal(size=(3, 2)), requires_grad=True),
            "b": nx.Value(rng.normal(size=2), requires_grad=True),
        }
        x = nx.const(rng.normal(size=(5, 3)))
        wts = nx.const(rng.normal(size=(5, 2)))

        def f():
            return nx.reduce_sum(nx.linear(x, params["w"], params["b"]) * wts)

        report = nx.grad_check(f, params, tol=1e-5)
        assert report.passed, str(report)
        assert set(report.errors) == {"w", "b"}

    def test_corrupted_backward_fails(self, rng):
        params = {"w": nx.Value(rng.normal(size=(3, 2)), requires_grad=True)}
        x = nx.const(rng.normal(size=(4, 3)))

        def broken_matmul(a, b):
            out = nx.matmul(a, b)
            true_fn = out.backward_fn
            out.backward_fn = lambda g: true_fn(1.5 * g)
            return out

        def f():
            return nx.reduce_sum(broken_matmul(x, params["w"]))

        report = nx.grad_check(f, params, tol=1e-4)
        assert not report.passed
        assert report.failures() == ["w"]

    def test_non_finite_gradient_reported(self):
        params = {"w": nx.Value(np.array([1.0, 2.0]), requires_grad=True)}

        def f():
            out = nx.reduce_sum(params["w"] * 1.0)
            out.backward_fn = lambda g: params["w"].grad.__iadd__(np.nan)
            return out

        report = nx.grad_check(f, params)
        assert not report.passed
        assert report.non_finite == ["w"]

    def test_relu_kink_retried(self):
        # A preactivation 2e-6 from zero: the 1e-5 step straddles the kink.
        params = {"b": nx.Value(np.array([2e-6, 0.5]), requires_grad=True)}

        def f():
            return nx.reduce_sum(nx.relu(params["b"]))

        report = nx.grad_check(f, params, tol=1e-6)
        assert report.passed, str(report)
        assert report.kink_retries == {"b": 1}

    def test_structural_zero_gradient_passes(self, rng):
        # Adding a constant to every score leaves softmax unchanged.
        params = {"c": nx.Value(np.array([0.3]), requires_grad=True)}
        s = nx.const(rng.normal(size=(3, 4)) * 30)
        w = nx.const(rng.normal(size=(3, 4)))

        def f():
            return nx.reduce_sum(nx.mul(nx.softmax_lastdim(nx.add(s, params["c"])), w))

        report = nx.grad_check(f, params, tol=1e-4)
        assert report.passed, str(report)

    def test_five_point_stencil_more_accurate(self):
        params = {"x": nx.Value(np.array([0.7]), requires_grad=True)}

        def f():
            x = params["x"]
            return nx.reduce_sum(nx.mul(nx.mul(x, x), nx.mul(nx.mul(x, x), x)) * 1e6)

        three = nx.grad_check(f, params, tol=1e-12)
        five = nx.grad_check(f, params, tol=1e-12, stencil=5)
        assert five.errors["x"] < three.errors["x"]
        with pytest.raises(ContractError):
            nx.grad_check(f, params, stencil=7)
