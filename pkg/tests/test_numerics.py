import math

import numpy as np
import pytest

from aesmpn import numerics as nx
from aesmpn.numerics import (
    ROW_TILE,
    SELU_ALPHA,
    SELU_LAMBDA,
    DimensionError,
    Graph,
    NumericError,
    Tensor,
    grad_check,
)


def _loss(y, seed=0):
    w = np.random.default_rng(seed).normal(size=y.shape)
    return nx.reduce_sum(nx.mul(y, Tensor(w)))


class TestTensor:
    def test_data_is_a_readonly_copy(self):
        src = np.arange(3.0)
        t = Tensor(src)
        src[0] = 99.0
        assert t.data[0] == 0.0
        with pytest.raises(ValueError):
            t.data[0] = 1.0

    def test_dtype_is_float64(self):
        assert Tensor([1, 2]).data.dtype == np.float64

    def test_operators(self):
        a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0, 5.0]])
        np.testing.assert_array_equal((a + b).data, [[4.0, 7.0]])
        np.testing.assert_array_equal((a - b).data, [[-2.0, -3.0]])
        np.testing.assert_array_equal((a * b).data, [[3.0, 10.0]])
        np.testing.assert_array_equal((-a).data, [[-1.0, -2.0]])
        np.testing.assert_array_equal((a @ nx.transpose(b)).data, [[13.0]])


class TestLinearAlgebra:
    def test_matmul_matches_numpy(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 4))
        np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-14, atol=1e-14)

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_matmul_rows_do_not_depend_on_position(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(37, 29))
        x = rng.normal(size=(ROW_TILE + 5, 37))
        full = nx.matmul(Tensor(x), Tensor(w)).data
        perm = rng.permutation(x.shape[0])
        shuffled = nx.matmul(Tensor(x[perm]), Tensor(w)).data
        np.testing.assert_array_equal(shuffled, full[perm])
        for k in range(x.shape[0]):
            np.testing.assert_array_equal(nx.matmul(Tensor(x[k : k + 1]), Tensor(w)).data[0], full[k])

    def test_linear_equals_matmul_plus_bias(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
        np.testing.assert_array_equal(
            nx.linear(Tensor(x), Tensor(w), Tensor(b)).data,
            nx.add(nx.matmul(Tensor(x), Tensor(w)), Tensor(b)).data,
        )

    def test_reshape_error(self):
        with pytest.raises(DimensionError):
            nx.reshape(Tensor(np.ones(5)), (2, 3))


class TestElementwise:
    def test_sigmoid_saturates_without_nan(self):
        out = nx.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_sigmoid_symmetry(self):
        x = np.linspace(-30, 30, 121)
        s = nx.sigmoid(Tensor(x)).data
        np.testing.assert_allclose(s + nx.sigmoid(Tensor(-x)).data, 1.0, rtol=0, atol=1e-15)

    def test_selu_constants_and_values(self):
        assert SELU_LAMBDA == pytest.approx(1.0507009873554805, abs=0)
        assert SELU_ALPHA == pytest.approx(1.6732632423543772, abs=0)
        out = nx.selu(Tensor([0.0, 2.0, -1.0])).data
        np.testing.assert_allclose(out, [0.0, 2 * SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * (math.exp(-1) - 1)], rtol=1e-15)

    def test_tanh_and_abs(self):
        np.testing.assert_allclose(nx.tanh_op(Tensor([0.5])).data, [math.tanh(0.5)], rtol=1e-15)
        np.testing.assert_array_equal(nx.abs_op(Tensor([-2.0, 3.0])).data, [2.0, 3.0])

    def test_bias_broadcast_only_over_rows(self):
        with pytest.raises(DimensionError):
            nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_non_finite_output_is_reported(self):
        with pytest.raises(NumericError):
            nx.mul(Tensor([1e200]), Tensor([1e200]))


class TestStructure:
    def test_concat_empty_raises(self):
        with pytest.raises(DimensionError):
            nx.concat([])

    def test_concat_extent_mismatch(self):
        with pytest.raises(DimensionError):
            nx.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2)))], axis=1)

    def test_gather_and_put(self):
        x = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(nx.gather_rows(x, [2, 0]).data, [[4, 5], [0, 1]])
        out = nx.put_rows(x, [1], Tensor([[9.0, 9.0]])).data
        np.testing.assert_array_equal(out, [[0, 1], [9, 9], [4, 5]])
        with pytest.raises(ValueError):
            nx.put_rows(x, [1, 1], Tensor(np.zeros((2, 2))))

    def test_segment_sum_values_and_empty_segments(self):
        x = Tensor(np.array([[1.0], [2.0], [4.0]]))
        np.testing.assert_array_equal(nx.segment_sum(x, [2, 0, 2], 4).data, [[2.0], [0.0], [5.0], [0.0]])

    def test_segment_sum_is_order_independent_bitwise(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 5)) * 10.0 ** rng.integers(-8, 8, size=(40, 1))
        seg = rng.integers(0, 4, size=40)
        ref = nx.segment_sum(Tensor(x), seg, 4).data
        for _ in range(5):
            p = rng.permutation(40)
            np.testing.assert_array_equal(nx.segment_sum(Tensor(x[p]), seg[p], 4).data, ref)

    def test_segment_sum_range_check(self):
        with pytest.raises(IndexError):
            nx.segment_sum(Tensor(np.ones((2, 1))), [0, 5], 3)

    def test_reduce_mean(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 6.0]]))
        np.testing.assert_array_equal(nx.reduce_mean(x, axis=0).data, [2.0, 4.0])
        assert nx.reduce_mean(x).item() == 3.0


class TestLSTMOps:
    def test_fused_matches_composition(self):
        rng = np.random.default_rng(4)
        H, n, d = 3, 4, 2
        h, c, x = rng.normal(size=(n, H)), rng.normal(size=(n, H)), rng.normal(size=(n, d))
        w, b = rng.normal(size=(H + d, 4 * H)), rng.normal(size=4 * H)
        z = nx.linear(nx.concat([Tensor(h), Tensor(x)], axis=1), Tensor(w), Tensor(b))
        composed = nx.lstm_pointwise(z, Tensor(c)).data
        fused = nx.lstm_fused(Tensor(np.hstack([h, c])), Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_array_equal(fused, composed)

    def test_pointwise_shape_check(self):
        with pytest.raises(DimensionError):
            nx.lstm_pointwise(Tensor(np.zeros((2, 7))), Tensor(np.zeros((2, 2))))


class TestGraph:
    def test_backward_of_simple_expression(self):
        g = Graph()
        a = g.param(np.array([2.0, -3.0]), "a")
        loss = nx.reduce_sum(nx.mul(a, a))
        grads = g.backward(loss)
        np.testing.assert_array_equal(grads["a"], [4.0, -6.0])

    def test_unused_parameter_gets_zero_gradient(self):
        g = Graph()
        a = g.param(np.ones(2), "a")
        g.param(np.ones(3), "unused")
        grads = g.backward(nx.reduce_sum(a))
        np.testing.assert_array_equal(grads["unused"], np.zeros(3))

    def test_backward_needs_scalar(self):
        g = Graph()
        a = g.param(np.ones(2), "a")
        with pytest.raises(DimensionError):
            g.backward(nx.scale(a, 2.0))

    def test_backward_is_repeatable(self):
        g = Graph()
        a = g.param(np.array([0.3, 0.7]), "a")
        loss = nx.reduce_sum(nx.tanh_op(nx.mul(a, a)))
        np.testing.assert_array_equal(g.backward(loss)["a"], g.backward(loss)["a"])

    def test_param_shared_by_name(self):
        g = Graph()
        assert g.param(np.ones(2), "w") is g.param(np.zeros(2), "w")

    def test_inference_graph_records_nothing(self):
        g = Graph(record=False)
        a = g.param(np.ones(2), "a")
        out = nx.scale(a, 2.0)
        assert out.graph is None and g.nodes == []


class TestGradCheck:
    @pytest.mark.parametrize(
        "fn",
        [
            lambda t: nx.sigmoid(t["x"]),
            lambda t: nx.selu(nx.scale(t["x"], 3.0)),
            lambda t: nx.segment_sum(t["x"], [0, 1, 0], 2),
            lambda t: nx.reduce_mean(nx.tanh_op(t["x"]), axis=0),
        ],
    )
    def test_small_ops(self, fn):
        x = np.array([[0.4, -1.1], [0.9, 0.25], [-0.6, 1.7]])
        assert grad_check(lambda g, t: _loss(fn(t)), {"x": x}) < 1e-6

    def test_detects_wrong_gradient(self):
        def broken_square(x):
            return nx._emit("broken", (x,), x.data**2, lambda g, needs: (g * x.data,))  # missing factor 2

        err = grad_check(lambda g, t: nx.reduce_sum(broken_square(t["x"])), {"x": np.array([1.0, 2.0])})
        assert err > 0.3

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            grad_check(lambda g, t: nx.reduce_sum(t["x"]), {"x": np.ones(1)}, eps=0.0)
