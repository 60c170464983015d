import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from t3slab import numerics as nx
from oracles import log_softmax_decimal


def leaf(a):
    return nx.Tensor(a, requires_grad=True)


def test_log_softmax_uniform():
    out = nx.forward_graph(nx.log_softmax, np.array([[0.0, 0.0]])).data
    np.testing.assert_allclose(out, [[math.log(0.5)] * 2], rtol=0, atol=1e-15)


def test_matmul_scalar():
    out = nx.forward_graph(nx.matmul, np.array([[2.0]]), np.array([[3.0]]))
    assert out.data.tolist() == [[6.0]]


def test_log_softmax_matches_high_precision():
    got = nx.log_softmax(nx.Tensor([[1.0, 2.0, 3.0]])).data[0]
    want = log_softmax_decimal([1.0, 2.0, 3.0])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_log_softmax_rows_normalized(rng):
    x = rng.normal(scale=5, size=(3, 4, 7))
    p = np.exp(nx.log_softmax(nx.Tensor(x)).data)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=0, atol=1e-12)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((4, 5))))


def test_rank_limit():
    with pytest.raises(nx.ShapeError):
        nx.Tensor(np.ones((1, 1, 1, 1)))


def test_square_grad():
    w = leaf([3.0])
    nx.backward(nx.total(nx.square(w)))
    assert w.grad.tolist() == [6.0]


def test_constant_loss_zero_grad():
    w = leaf([3.0, -1.0])
    loss = nx.add(nx.total(nx.scale(w, 0.0)), nx.Tensor(5.0))
    nx.backward(loss)
    assert w.grad.tolist() == [0.0, 0.0]


def test_backward_accumulates_across_graphs():
    w = leaf([2.0])
    for _ in range(3):
        nx.backward(nx.total(nx.square(w)))
    assert w.grad.tolist() == [12.0]


def test_backward_rejects_non_scalar_and_reuse():
    w = leaf([1.0, 2.0])
    with pytest.raises(nx.ShapeError):
        nx.backward(nx.square(w))
    loss = nx.total(nx.square(w))
    nx.backward(loss)
    with pytest.raises(nx.GraphError):
        nx.backward(loss)


def test_fd_linear_and_quadratic():
    g = nx.finite_diff_grad(lambda w: 5 * w[0], np.array([0.3]), epsilon=0.1)
    assert abs(g[0] - 5) < 1e-12
    g = nx.finite_diff_grad(lambda w: w[0] ** 2, np.array([1.0]), epsilon=1e-5)
    assert abs(g[0] - 2) < 1e-9


def test_fd_rejects_bad_inputs():
    with pytest.raises(ValueError):
        nx.finite_diff_grad(lambda w: w[0], np.array([1.0]), epsilon=0)
    with pytest.raises(nx.NonFiniteError):
        nx.finite_diff_grad(lambda w: float("nan") * w[0], np.array([0.0]), epsilon=1e-5)


def test_directional_derivative_examples():
    f = lambda w: 3 * w[0] - 4 * w[1]
    grad = np.array([3.0, -4.0])
    d = grad / np.linalg.norm(grad)
    assert abs(nx.directional_derivative(f, np.zeros(2), d) - 5.0) < 1e-9
    assert nx.directional_derivative(lambda w: w[0], np.zeros(2), np.array([0.0, 1.0])) == 0.0
    with pytest.raises(ValueError, match="zero norm"):
        nx.directional_derivative(f, np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError, match="unit"):
        nx.directional_derivative(f, np.zeros(2), np.array([1.0, 1.0]))


# per-op gradient checks: each program maps leaf tensors to a scalar
def _programs(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 4, 3))
    m = rng.normal(size=(4, 5))
    bias = rng.normal(size=(4,))
    wts = rng.normal(size=(2, 3, 4))
    ids = rng.integers(0, 5, size=(2, 3))
    pick_idx = rng.integers(0, 4, size=(2, 3))
    return {
        "add_broadcast": ([a, bias], lambda x, y: nx.weighted_sum(nx.add(x, y), wts)),
        "sub": ([a, a * 0.5 + 1], lambda x, y: nx.weighted_sum(nx.sub(x, y), wts)),
        "mul_broadcast": ([a, bias], lambda x, y: nx.weighted_sum(nx.mul(x, y), wts)),
        "tanh": ([a], lambda x: nx.weighted_sum(nx.tanh(x), wts)),
        "exp": ([a * 0.3], lambda x: nx.weighted_sum(nx.exp(x), wts)),
        # deep in the left tail GELU's gradient (~1e-10) is below finite-difference resolution
        "gelu": ([3 * np.tanh(a)], lambda x: nx.weighted_sum(nx.gelu(x), wts)),
        "matmul_batched": ([a, b], lambda x, y: nx.total(nx.square(nx.matmul(x, y)))),
        "matmul_shared": ([a, m], lambda x, y: nx.total(nx.tanh(nx.matmul(x, y)))),
        "transpose": ([a], lambda x: nx.weighted_sum(nx.transpose(x), np.swapaxes(wts, -1, -2))),
        "embed": ([rng.normal(size=(5, 4))], lambda t: nx.weighted_sum(nx.embed(t, ids), wts)),
        "log_softmax_pick": ([a], lambda x: nx.total(nx.pick(nx.log_softmax(x), pick_idx))),
        "softmax": ([a], lambda x: nx.weighted_sum(nx.softmax(x), wts)),
        "rmsnorm": ([a], lambda x: nx.weighted_sum(nx.rmsnorm(x), wts)),
    }


@pytest.mark.parametrize("seed", range(20))
def test_every_op_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, (arrays, prog) in _programs(rng).items():
        leaves = [leaf(x) for x in arrays]
        nx.backward(prog(*leaves))
        for i, x in enumerate(arrays):
            def f(v, i=i):
                args = [nx.Tensor(v if j == i else arrays[j]) for j in range(len(arrays))]
                return prog(*args).item()

            fd = nx.finite_diff_grad(f, x)
            err = nx.max_relative_error(leaves[i].grad.reshape(-1), fd)
            assert err < 1e-4, f"{name} input {i}: relative error {err}"


def test_forward_determinism(rng):
    x = rng.normal(size=(2, 3, 4))
    f = lambda t: nx.log_softmax(nx.gelu(t))
    assert nx.forward_graph(f, x).data.tobytes() == nx.forward_graph(f, x).data.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4), st.integers(0, 2**31))
def test_param_vector_roundtrip(shapes, seed):
    rng = np.random.default_rng(seed)
    pv = nx.ParamVector([(f"p{i}", rng.normal(size=s)) for i, s in enumerate(shapes)])
    back = pv.unflatten(pv.flatten())
    assert back.same_layout(pv)
    for k in pv:
        assert np.array_equal(back[k], pv[k])
    with pytest.raises(nx.ShapeError):
        pv.unflatten(np.zeros(pv.size + 1))
