import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmst import tensor as T
from mmst.tensor import DimensionError, GradientError, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# matmul

def test_matmul_identity_and_zero():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    assert np.array_equal(T.matmul(Tensor(np.zeros((2, 2))), Tensor(b)).data, np.zeros((2, 2)))


def test_matmul_hand_value():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_rule(rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    T.backward(T.sum(T.mul(T.matmul(a, b), Tensor(g))))
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-14)


def test_matmul_associativity(rng):
    for _ in range(20):
        a, b, c = (Tensor(rng.standard_normal((3, 3))) for _ in range(3))
        left = T.matmul(T.matmul(a, b), c).data
        right = T.matmul(a, T.matmul(b, c)).data
        assert np.abs(left - right).max() < 1e-10


# softmax

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(T.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite), finite)
def test_softmax_rows_and_shift_invariance(x, c):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    assert np.abs(p.sum(axis=-1) - 1).max() < 1e-12
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, p, atol=1e-12)


def test_softmax_is_stable_for_large_inputs():
    p = T.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0])


# layer norm, gelu, linear, mean

def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.array_equal(T.layer_norm(Tensor([[2.0, 2.0, 2.0]]), ones, zeros).data, np.zeros((1, 3)))
    beta = Tensor([0.5, -1.0, 2.0])
    out = T.layer_norm(Tensor([[1.0, 5.0, -3.0]]), Tensor(np.zeros(3)), beta).data
    assert np.array_equal(out, [[0.5, -1.0, 2.0]])
    two = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-14)
    np.testing.assert_allclose(two.data, [[-1.0, 1.0]], atol=1e-12)


def test_layer_norm_moments(rng):
    x = Tensor(rng.normal(3.0, 5.0, (6, 16)))
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-9)


def test_gelu_linear_mean_examples(rng):
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    x = rng.standard_normal((4, 3))
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    assert np.array_equal(T.mean(Tensor([[2.0, 4.0]]), axis=-1).data, [3.0])


def test_gelu_matches_erf_form():
    from scipy.stats import norm
    x = np.linspace(-4, 4, 33)
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, x * norm.cdf(x), atol=1e-15)


def test_linear_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# backward

def test_backward_examples():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.sum(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.sum(T.scale(x, 2.0)))
    assert np.array_equal(x.grad, [2.0, 2.0, 2.0])
    x = leaf([0.3, -1.2, 2.0])
    T.backward(T.sum(T.softmax(x)))
    assert np.abs(x.grad).max() < 1e-15


def test_fan_out_accumulates_exactly():
    x = leaf([1.5, -2.0])
    T.backward(T.sum(T.add(x, x)))
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_leaf_gradients_accumulate_across_calls():
    x = leaf([1.0, 2.0])
    T.backward(T.sum(x))
    T.backward(T.sum(x))
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_backward_errors():
    x = leaf([1.0, 2.0])
    with pytest.raises(GradientError, match="scalar"):
        T.backward(T.scale(x, 2.0))
    with pytest.raises(GradientError, match="detached"):
        T.backward(T.sum(Tensor([1.0, 2.0])))


def test_trace_is_topological_and_visits_once(rng):
    x = leaf(rng.standard_normal(3))
    y = T.mul(x, x)
    z = T.add(y, T.exp(y))
    loss = T.sum(T.add(z, y))
    record = T.trace(loss)
    ids = [id(n) for n in record]
    assert len(ids) == len(set(ids))
    position = {id(n): i for i, n in enumerate(record)}
    for node in record:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]
    assert record.nodes[-1] is loss


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_broadcast_bias_gradient_sums_over_rows(rng):
    x = Tensor(rng.standard_normal((5, 3)))
    b = leaf(np.zeros(3))
    T.backward(T.sum(T.add(x, b)))
    assert np.array_equal(b.grad, [5.0, 5.0, 5.0])


def test_take_backward_accumulates_repeats():
    table = leaf(np.zeros((3, 2)))
    T.backward(T.sum(T.take(table, [0, 2, 2])))
    assert np.array_equal(table.grad, [[1, 1], [0, 0], [2, 2]])


def test_forward_outputs_finite_on_bounded_inputs(rng):
    x = Tensor(rng.uniform(-30, 30, (4, 6)))
    for out in (T.softmax(x), T.gelu(x), T.exp(T.scale(x, 0.1)),
                T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))):
        assert np.all(np.isfinite(out.data))


def test_count_macs_counts_matmul_and_nests():
    a, b = Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5)))
    with T.count_macs() as outer:
        T.matmul(a, b)
        with T.count_macs() as inner:
            T.matmul(a, b)
        assert inner[0] == 2 * 3 * 5 * 4
    assert outer[0] == 2 * (2 * 3 * 5 * 4)
