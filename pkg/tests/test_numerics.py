import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pae import numerics as nx
from pae.errors import ContractError, ParameterError, ShapeError
from pae.numerics import Graph, Tensor, backward, grad_check


def leaf(data, name=None):
    return Tensor(np.array(data, dtype=float), requires_grad=True, name=name)


def central_diff(f, x, h=1e-5):
    """Independent finite-difference gradient of a scalar numpy function."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-12))


# --- matmul ---------------------------------------------------------------


def test_matmul_identity():
    b = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(nx.matmul(np.eye(3), b).data, b)


def test_matmul_scalar_case():
    assert nx.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        nx.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a0, b0 = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    w = rng.standard_normal((4, 3))
    a, b = leaf(a0), leaf(b0)
    with Graph() as g:
        loss = nx.sum(nx.mul(nx.matmul(a, b), w))
    backward(g, loss)
    assert rel_err(a.grad, central_diff(lambda x: np.sum((x @ b0) * w), a0)) < 1e-6
    assert rel_err(b.grad, central_diff(lambda x: np.sum((a0 @ x) * w), b0)) < 1e-6


def test_batched_matmul_against_weight_matches_loop():
    rng = np.random.default_rng(1)
    x0, w0 = rng.standard_normal((3, 4, 5)), rng.standard_normal((5, 2))
    x, w = leaf(x0), leaf(w0)
    with Graph() as g:
        loss = nx.sum(nx.square(nx.matmul(x, w)))
    backward(g, loss)
    expected_w = sum(2 * x0[i].T @ (x0[i] @ w0) for i in range(3))
    assert np.allclose(w.grad, expected_w, rtol=1e-12)
    assert np.allclose(x.grad, 2 * (x0 @ w0) @ w0.T, rtol=1e-12)


# --- softmax ----------------------------------------------------------------


def test_softmax_symmetric_row():
    assert np.allclose(nx.softmax_rows([[0.0, 0.0]]).data, [[0.5, 0.5]])


def test_softmax_no_overflow():
    y = nx.softmax_rows([[1000.0, 0.0]]).data
    assert np.all(np.isfinite(y))
    assert y[0, 0] == 1.0 and y[0, 1] < 1e-300


def test_softmax_jacobian_vs_finite_differences():
    rng = np.random.default_rng(2)
    x0, w = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))

    def f(x):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return np.sum(w * e / e.sum(axis=1, keepdims=True))

    x = leaf(x0)
    with Graph() as g:
        loss = nx.sum(nx.mul(nx.softmax_rows(x), w))
    backward(g, loss)
    assert rel_err(x.grad, central_diff(f, x0)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e6, 1e6)))
def test_softmax_rows_sum_to_one(x):
    y = nx.softmax_rows(x).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-9, rtol=0)


# --- layer norm -----------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    y = nx.layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4)).data
    assert np.allclose(y, 0.0)


def test_layer_norm_zero_gain_gives_beta():
    rng = np.random.default_rng(3)
    y = nx.layer_norm(rng.standard_normal((2, 5)), np.zeros(5), np.full(5, 1.5)).data
    assert np.all(y == 1.5)


def test_layer_norm_gradient_vs_finite_differences():
    rng = np.random.default_rng(4)
    x0, g0, b0 = rng.standard_normal((2, 6)), rng.standard_normal(6), rng.standard_normal(6)
    w = rng.standard_normal((2, 6))

    def ln(x, g, b):
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    x, gamma, beta = leaf(x0), leaf(g0), leaf(b0)
    with Graph() as g:
        loss = nx.sum(nx.mul(nx.layer_norm(x, gamma, beta), w))
    backward(g, loss)
    assert rel_err(x.grad, central_diff(lambda v: np.sum(ln(v, g0, b0) * w), x0)) < 1e-5
    assert rel_err(gamma.grad, central_diff(lambda v: np.sum(ln(x0, v, b0) * w), g0)) < 1e-5
    assert rel_err(beta.grad, central_diff(lambda v: np.sum(ln(x0, g0, v) * w), b0)) < 1e-5


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 7), elements=st.floats(-100, 100)))
def test_layer_norm_standardises_rows(x):
    spread = x.max(axis=1) - x.min(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = nx.layer_norm(x, np.ones(7), np.zeros(7), eps=0.0).data
    for row, s in zip(y, spread):
        if s > 1e-3:
            assert abs(row.mean()) < 1e-9
            assert abs(row.var() - 1.0) < 1e-6


# --- elementwise ---------------------------------------------------------------


def test_elementwise_basic_values():
    assert nx.elementwise("sigmoid", [0.0]).data[0] == 0.5
    assert nx.elementwise("tanh", [0.0]).data[0] == 0.0
    assert nx.elementwise("scale", [2.0], 3.0).data[0] == 6.0
    assert nx.elementwise("add", [1.0], [2.0]).data[0] == 3.0


def test_elementwise_binary_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.elementwise("mul", np.ones(3), np.ones(4))


def test_gelu_gradient_vs_finite_differences():
    from scipy.special import erf

    x0 = np.random.default_rng(5).standard_normal(10) * 2
    x = leaf(x0)
    with Graph() as g:
        loss = nx.sum(nx.gelu(x))
    backward(g, loss)
    numeric = central_diff(lambda v: np.sum(v * 0.5 * (1 + erf(v / np.sqrt(2)))), x0)
    assert rel_err(x.grad, numeric) < 1e-6


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "gelu"])
def test_unary_kinds_pass_grad_check(kind):
    x = leaf(np.random.default_rng(6).standard_normal((3, 4)), "x")
    w = np.random.default_rng(7).standard_normal((3, 4))
    report = grad_check(lambda: nx.sum(nx.mul(nx.elementwise(kind, x), w)), [x])
    assert report.worst < 1e-6


@pytest.mark.parametrize("kind", ["add", "mul"])
def test_binary_kinds_pass_grad_check(kind):
    rng = np.random.default_rng(8)
    a, b = leaf(rng.standard_normal(5), "a"), leaf(rng.standard_normal(5), "b")
    report = grad_check(lambda: nx.sum(nx.square(nx.elementwise(kind, a, b))), [a, b])
    assert report.worst < 1e-6


# --- dropout ------------------------------------------------------------------


def test_dropout_rate_zero_and_eval_are_identity():
    x = Tensor(np.random.default_rng(9).standard_normal((4, 4)))
    rng = np.random.default_rng(0)
    assert nx.dropout(x, 0.0, rng, training=True) is x
    out = nx.dropout(x, 0.1, rng, training=False)
    assert out is x and np.array_equal(out.data, x.data)


def test_dropout_zero_fraction_and_scaling():
    x = Tensor(np.ones(100_000))
    y = nx.dropout(x, 0.1, np.random.default_rng(10), training=True).data
    zero_frac = np.mean(y == 0.0)
    assert abs(zero_frac - 0.1) < 0.01
    assert np.allclose(y[y != 0], 1 / 0.9)


def test_dropout_rejects_rate_one():
    with pytest.raises(ParameterError):
        nx.dropout(Tensor(np.ones(3)), 1.0, np.random.default_rng(0), True)


# --- backward -----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(11).standard_normal((2, 3, 4)))
    with Graph() as g:
        loss = nx.sum(x)
    backward(g, loss)
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_quadratic_form():
    x0 = np.array([[1.0], [-2.0], [0.5]])
    x = leaf(x0)
    with Graph() as g:
        loss = nx.reshape(nx.matmul(nx.transpose(x, (1, 0)), x), ())
    backward(g, loss)
    assert np.allclose(x.grad, 2 * x0)


def test_backward_accumulates_across_calls():
    x = leaf([1.0, 2.0])
    with Graph() as g:
        loss = nx.sum(nx.square(x))
    backward(g, loss)
    backward(g, loss)
    assert np.allclose(x.grad, 2 * 2 * np.array([1.0, 2.0]))


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with Graph() as g:
        y = nx.square(x)
    with pytest.raises(ContractError):
        backward(g, y)


def test_graph_nodes_are_topologically_ordered():
    a, b = leaf([1.0]), leaf([2.0])
    with Graph() as g:
        c = a * b
        d = nx.tanh(c) + a
        nx.sum(d)
    position = {id(node.output): i for i, node in enumerate(g.nodes)}
    for i, node in enumerate(g.nodes):
        for inp in node.inputs:
            if id(inp) in position:
                assert position[id(inp)] < i


def test_no_recording_outside_graph():
    x = leaf([1.0])
    y = nx.square(x)
    assert y.is_leaf and not y.requires_grad


def test_slice_gradients_accumulate():
    x = leaf(np.arange(6.0).reshape(2, 3))
    with Graph() as g:
        loss = nx.sum(x[:, 0]) + nx.sum(x[:, 0]) + nx.sum(x[1])
    backward(g, loss)
    assert np.array_equal(x.grad, [[2, 0, 0], [3, 1, 1]])


def test_broadcast_concat_reshape_gradients():
    rng = np.random.default_rng(12)
    cls = leaf(rng.standard_normal((1, 3)), "cls")
    body = leaf(rng.standard_normal((2, 4, 3)), "body")
    pos = leaf(rng.standard_normal((5, 3)), "pos")
    w = rng.standard_normal((2, 5, 3))

    def f():
        seq = nx.concat([nx.broadcast_to(cls, (2, 1, 3)), body], axis=1) + pos
        return nx.sum(nx.mul(nx.tanh(seq), w))

    assert grad_check(f, [cls, body, pos]).worst < 1e-6


# --- grad_check ---------------------------------------------------------------


def test_grad_check_sum_of_squares():
    x = leaf(np.random.default_rng(13).standard_normal(7), "x")
    report = grad_check(lambda: nx.sum(nx.square(x)), [x])
    assert report.passed and report.worst < 1e-9


def test_grad_check_detects_nondeterminism():
    x = leaf([1.0, 2.0], "x")
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        grad_check(lambda: nx.sum(nx.dropout(x, 0.5, rng, training=True)), [x])


def test_grad_check_restores_state():
    x = Tensor([1.0, 2.0], requires_grad=False, name="x")
    grad_check(lambda: nx.sum(nx.square(x)), [x])
    assert not x.requires_grad and x.grad is None
    assert x.data.tolist() == [1.0, 2.0]


def test_log_softmax_and_mean_grad_check():
    x = leaf(np.random.default_rng(14).standard_normal((3, 4)), "x")
    w = np.random.default_rng(15).standard_normal((3, 4))
    assert grad_check(lambda: nx.mean(nx.mul(nx.log_softmax_rows(x), w)), [x]).worst < 1e-6


def test_forward_deterministic():
    rng = np.random.default_rng(16)
    x0 = rng.standard_normal((4, 4))
    a = nx.dropout(nx.gelu(x0), 0.3, np.random.default_rng(1), True).data
    b = nx.dropout(nx.gelu(x0), 0.3, np.random.default_rng(1), True).data
    assert np.array_equal(a, b)


def test_grad_check_flags_wrong_vjp():
    # an op whose recorded vjp is off by 1 % must fail the check
    x = leaf(np.random.default_rng(17).standard_normal(5), "x")

    def bad_square(t):
        return nx._record("bad_square", (t,), t.data**2, lambda g: (2.02 * t.data * g,))

    report = grad_check(lambda: nx.sum(bad_square(x)), [x])
    assert not report.passed and report.worst > 1e-3


def test_grad_check_floor_scores_tiny_gradients_absolutely():
    x = leaf([1e-9, 0.5], "x")
    report = grad_check(lambda: nx.sum(nx.scale(nx.square(x), 0.5)), [x])
    assert report.passed
