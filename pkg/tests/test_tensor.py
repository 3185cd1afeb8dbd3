import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mart import tensor as T
from mart.gradcheck import check_function, primitive_suite
from mart.tensor import BackwardError, NumericError, ShapeError, Tensor


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def loop_layer_norm(x, g, b, eps):
    out = np.empty_like(x)
    for r in range(x.shape[0]):
        row = x[r]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[r] = [(v - mu) / np.sqrt(var + eps) * g[i] + b[i] for i, v in enumerate(row)]
    return out


def test_matmul_matches_triple_loop(f64):
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 4))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_softmax_known_values():
    y = T.softmax(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(y, [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_softmax_large_inputs_stable():
    y = T.softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_allclose(y, [0.5, 0.5])


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        T.softmax(Tensor([1.0, np.nan]))


def test_layer_norm_matches_loop(f64):
    rng = np.random.default_rng(1)
    x, g, b = rng.standard_normal((4, 6)), rng.standard_normal(6), rng.standard_normal(6)
    y = T.layer_norm(Tensor(x), Tensor(g), Tensor(b), 1e-5).data
    np.testing.assert_allclose(y, loop_layer_norm(x, g, b, 1e-5), rtol=1e-10, atol=1e-12)


def test_layer_norm_bad_gain_shape():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


@pytest.mark.parametrize("result", primitive_suite(), ids=lambda r: r.name)
def test_primitive_gradients_match_finite_differences(result):
    assert result.max_rel_error < 1e-5, result.line()


def test_corrupted_backward_is_caught(monkeypatch):
    # a tanh whose backward forgets the (1 - y^2) factor
    def bad_tanh(a):
        y = np.tanh(a.data)
        return T._make(y, (a,), lambda g: (g,))

    rng = np.random.default_rng(0)
    res = check_function("bad_tanh", bad_tanh, [rng.standard_normal((3, 3))])
    assert not res.passed


def test_gradient_accumulates_over_reuse(f64):
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [3.0, -4.0])


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_all(T.scale(x, 2.0))
    T.backward(loss)
    with pytest.raises(BackwardError):
        T.backward(loss)


def test_backward_non_scalar_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(BackwardError):
        T.backward(T.scale(x, 2.0))


def test_backward_on_detached_loss_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(BackwardError):
        T.backward(T.sum_all(x).detach())


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    tape = T.new_tape()
    with T.no_grad():
        y = T.tanh(x)
    assert len(tape) == 0 and not y.requires_grad


def test_default_and_switched_dtype():
    assert Tensor([1.0]).data.dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert T.get_dtype() == np.float32


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.ones((4, 2))), np.array([0, 4]))


def test_embedding_backward_scatter_adds(f64):
    w = Tensor(np.zeros((3, 2)), requires_grad=True)
    T.backward(T.sum_all(T.embedding(w, np.array([1, 1, 2]))))
    np.testing.assert_allclose(w.grad, [[0, 0], [2, 2], [1, 1]])


def test_add_rejects_general_broadcast():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_cross_entropy_uniform_is_log_vocab(f64):
    loss = T.cross_entropy(Tensor(np.zeros((2, 3, 4))), np.zeros((2, 3), dtype=int))
    assert loss.item() == pytest.approx(np.log(4), abs=1e-12)


def test_cross_entropy_all_masked():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), dtype=int), np.zeros((1, 2), bool))


def test_cross_entropy_ignores_masked_targets(f64):
    logits = np.random.default_rng(0).standard_normal((1, 3, 5))
    m = np.array([[True, True, False]])
    a = T.cross_entropy(Tensor(logits), np.array([[1, 2, 0]]), m).item()
    b = T.cross_entropy(Tensor(logits), np.array([[1, 2, 4]]), m).item()
    assert a == b


def test_take_last_gathers(f64):
    x = Tensor(np.arange(12.0).reshape(1, 3, 4))
    y = T.take_last(x, np.array([[0, 3], [1, 1], [2, 0]]))
    np.testing.assert_array_equal(y.data, [[[0, 3], [5, 5], [10, 8]]])


finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_are_distributions(x):
    with T.precision(np.float64):
        y = T.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite))
def test_layer_norm_output_is_standardized(x):
    with T.precision(np.float64):
        d = x.shape[1]
        y = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), 1e-5).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-9)
    assert np.all(y.var(axis=1) <= 1.0 + 1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_add_mul_commute(a, b):
    with T.precision(np.float64):
        np.testing.assert_array_equal(T.add(Tensor(a), Tensor(b)).data, T.add(Tensor(b), Tensor(a)).data)
        np.testing.assert_array_equal(T.mul(Tensor(a), Tensor(b)).data, T.mul(Tensor(b), Tensor(a)).data)
