import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from carformer import autograd as ag
from carformer.gradcheck import OP_TOLERANCE, op_cases


@pytest.mark.parametrize("name", list(op_cases(np.random.default_rng(0))))
def test_op_gradient_matches_finite_differences(name, backend):
    f, inputs = op_cases(np.random.default_rng(11))[name]()
    assert ag.grad_check(f, inputs, step=1e-5) < OP_TOLERANCE


def test_reused_tensor_accumulates_all_paths():
    x = ag.parameter(np.array([[1.0, -2.0], [0.5, 3.0]]))
    # x appears in four places; adopted gradient buffers must not alias
    y = ag.tsum(ag.mul(ag.add(x, x), ag.reshape(ag.transpose(x, (1, 0)), (2, 2))) + x)
    ag.backward(y)
    # d/dx of sum(2 x * x^T) is 4 x^T; the trailing "+ x" adds 1
    np.testing.assert_allclose(x.grad, 4 * x.data.T + 1.0)


def test_broadcast_gradient_is_summed_over_leading_axes():
    a = ag.parameter(np.ones((4, 3)))
    b = ag.parameter(np.array([1.0, 2.0, 3.0]))
    ag.backward(ag.tsum(ag.mul(a, b)))
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])
    np.testing.assert_allclose(a.grad, np.tile([1.0, 2.0, 3.0], (4, 1)))


def test_only_suffix_broadcasting_is_allowed():
    with pytest.raises(ag.ShapeError):
        ag.add(ag.Tensor(np.ones((3, 4))), ag.Tensor(np.ones((3, 1))))
    with pytest.raises(ag.ShapeError):
        ag.matmul(ag.Tensor(np.ones((2, 3))), ag.Tensor(np.ones((4, 2))))


def test_backward_requires_scalar():
    x = ag.parameter(np.ones(3))
    with pytest.raises(ag.ShapeError):
        ag.backward(ag.mul(x, 2.0))


def test_graph_is_released_after_backward():
    x = ag.parameter(np.ones(3))
    y = ag.tsum(ag.mul(x, x))
    ag.backward(y)
    np.testing.assert_allclose(x.grad, [2.0, 2.0, 2.0])
    with pytest.raises(RuntimeError):
        ag.backward(y)


def test_no_grad_records_nothing():
    x = ag.parameter(np.ones(3))
    with ag.no_grad():
        y = ag.tsum(ag.mul(x, x))
    assert not y.requires_grad
    assert ag.is_grad_enabled()


def test_graph_order_is_topological():
    x = ag.parameter(np.ones((2, 2)))
    y = ag.tsum(ag.relu(ag.matmul(x, x)) + x)
    graph = ag.Graph.from_output(y)
    assert graph.is_topological()
    assert {"matmul", "relu", "add", "sum"} <= set(graph.ops())


def test_embedding_rejects_out_of_range_ids():
    table = ag.parameter(np.zeros((4, 2)))
    with pytest.raises(IndexError):
        ag.embedding_lookup(table, np.array([0, 4]))


def test_embedding_gradient_scatters_repeated_ids():
    table = ag.parameter(np.zeros((3, 2)))
    ag.backward(ag.tsum(ag.embedding_lookup(table, np.array([1, 1, 2]))))
    np.testing.assert_allclose(table.grad, [[0, 0], [2, 2], [1, 1]])


def test_cross_entropy_values_and_errors():
    logits = ag.Tensor(np.log(np.array([[0.25, 0.75], [0.5, 0.5]])))
    out = ag.cross_entropy(logits, np.array([1, 0]))
    np.testing.assert_allclose(out.data, [-np.log(0.75), np.log(2.0)])
    with pytest.raises(IndexError):
        ag.cross_entropy(logits, np.array([2, 0]))


def test_softmax_rejects_nan(backend):
    with pytest.raises(ag.NumericError):
        ag.softmax(ag.Tensor(np.array([[0.0, np.nan]])))


def test_masked_softmax_gives_exact_zeros(backend):
    x = ag.Tensor(np.array([[1.0, 2.0, 3.0]]))
    p = ag.softmax(ag.masked_fill(x, np.array([[False, True, False]]), -np.inf))
    assert p.data[0, 1] == 0.0
    assert abs(p.data.sum() - 1.0) < 1e-12


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)),
                     elements=st.floats(-300, 300, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(x=finite_rows, shift=st.floats(-50, 50))
def test_softmax_properties(x, shift):
    p = ag.softmax(ag.Tensor(x)).data
    assert np.all(np.isfinite(p)) and np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(ag.softmax(ag.Tensor(x + shift)).data, p, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(x=finite_rows)
def test_log_softmax_agrees_with_log_of_softmax(x):
    ls = ag.log_softmax(ag.Tensor(x)).data
    assert np.all(np.isfinite(ls))
    np.testing.assert_allclose(np.exp(ls).sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(x=arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
                elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_layer_norm_output_is_standardized(x):
    d = x.shape[1]
    y = ag.layer_norm(ag.Tensor(x), ag.Tensor(np.ones(d)), ag.Tensor(np.zeros(d)), eps=1e-12).data
    spread = x.std(axis=1)
    ok = spread > 1e-3
    np.testing.assert_allclose(y[ok].mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y[ok].std(axis=1), 1.0, atol=1e-6)


def test_layer_norm_checks_parameter_shapes():
    with pytest.raises(ag.ShapeError):
        ag.layer_norm(ag.Tensor(np.ones((2, 3))), ag.Tensor(np.ones(4)), ag.Tensor(np.zeros(4)))


def test_grad_check_detects_a_wrong_gradient():
    x = ag.parameter(np.array([0.3, -1.2, 2.0]))

    def broken_square(t):
        def backward(g):
            ag._accumulate(t, g * t.data)  # missing factor 2
        return ag._make(t.data ** 2, "broken", (t,), backward)

    assert ag.grad_check(lambda: ag.tsum(broken_square(x)), [x]) > 0.4
