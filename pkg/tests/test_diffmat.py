import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dese import diffmat as dm


def grads_of(loss_fn, *values):
    params = [dm.parameter(v) for v in values]
    with dm.Tape():
        loss = loss_fn(*params)
        dm.backward(loss)
    return [p.grad for p in params]


# ---- forward examples

def test_matmul_example():
    with dm.Tape():
        out = dm.forward_op("matmul", [dm.constant([[1, 2], [3, 4]]), dm.constant([[1], [1]])])
    np.testing.assert_array_equal(out.values, [[3], [7]])


def test_relu_example():
    with dm.Tape():
        out = dm.forward_op("relu", [dm.constant([[-1, 0, 2]])])
    np.testing.assert_array_equal(out.values, [[0, 0, 2]])


def test_row_softmax_example():
    with dm.Tape():
        out = dm.forward_op("row_softmax", [dm.constant([[0, 0]])])
    np.testing.assert_array_equal(out.values, [[0.5, 0.5]])


def test_forward_op_covers_parametrized_kinds():
    x = dm.constant([[-2.0, 3.0]])
    with dm.Tape():
        np.testing.assert_allclose(dm.forward_op("leaky_relu", [x], slope=0.1).values, [[-0.2, 3.0]])
        np.testing.assert_allclose(dm.forward_op("scalar_mul", [x], alpha=2.0).values, [[-4.0, 6.0]])
        np.testing.assert_allclose(dm.forward_op("log", [dm.constant([[1.0]])]).values, [[np.log(1 + 1e-12)]])
        np.testing.assert_allclose(dm.forward_op("mean_rows", [x]).values, [[0.5]])
        np.testing.assert_allclose(dm.forward_op("sum_cols", [dm.constant([[1, 2], [3, 4]])]).values, [[4, 6]])
        np.testing.assert_allclose(dm.forward_op("concat_cols", [x, x]).values, [[-2, 3, -2, 3]])
    with pytest.raises(ValueError, match="unknown op kind"):
        dm.forward_op("conv", [x])


def test_shape_error_names_kind_and_shapes():
    with pytest.raises(dm.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        dm.matmul(dm.constant(np.ones((2, 3))), dm.constant(np.ones((2, 3))))
    with pytest.raises(dm.ShapeError, match="elementwise_mul"):
        dm.elementwise_mul(dm.constant(np.ones((2, 3))), dm.constant(np.ones((3, 2))))


def test_non_finite_input_rejected():
    with pytest.raises(dm.NonFiniteError):
        dm.constant([[np.nan, 1.0]])
    with pytest.raises(dm.NonFiniteError):
        dm.parameter([[np.inf]])


def test_non_finite_output_rejected():
    with dm.Tape(), np.errstate(divide="ignore"), pytest.raises(dm.NonFiniteError, match="div"):
        dm.div(dm.constant([[1.0]]), dm.constant([[0.0]]))


def test_log_rejects_negative_input():
    with dm.Tape(), pytest.raises(ValueError):
        dm.log(dm.constant([[-1.0]]))


def test_log_of_zero_is_finite():
    with dm.Tape():
        out = dm.log(dm.constant([[0.0]]))
    assert out.values[0, 0] == pytest.approx(np.log(1e-12))


def test_sigmoid_is_stable_for_large_inputs():
    with dm.Tape():
        out = dm.sigmoid(dm.constant([[-800.0, 0.0, 800.0]]))
    np.testing.assert_allclose(out.values, [[0.0, 0.5, 1.0]])


def test_row_normalize_zero_row_modes():
    a = dm.constant([[1.0, 3.0], [0.0, 0.0]])
    with dm.Tape():
        keep = dm.row_normalize(a)
        uni = dm.row_normalize(a, zero_rows="uniform")
    np.testing.assert_allclose(keep.values, [[0.25, 0.75], [0, 0]])
    np.testing.assert_allclose(uni.values, [[0.25, 0.75], [0.5, 0.5]])


# ---- backward examples

def test_bilinear_backward_example():
    ga, gb = grads_of(lambda a, b: dm.sum_all(a @ b), [[1.0, 2.0]], [[3.0], [4.0]])
    np.testing.assert_array_equal(ga, [[3, 4]])
    np.testing.assert_array_equal(gb, [[1], [2]])


def test_relu_subgradient_convention():
    (g,) = grads_of(lambda x: dm.sum_all(dm.relu(x)), [[-1.0, 2.0]])
    np.testing.assert_array_equal(g, [[0, 1]])
    (g0,) = grads_of(lambda x: dm.sum_all(dm.relu(x)), [[0.0]])
    assert g0[0, 0] == 0.0


def test_leaky_relu_slope_at_zero():
    (g,) = grads_of(lambda x: dm.sum_all(dm.leaky_relu(x, 0.3)), [[0.0, -1.0, 1.0]])
    np.testing.assert_allclose(g, [[0.3, 0.3, 1.0]])


def test_backward_requires_scalar():
    x = dm.parameter(np.ones((2, 2)))
    with dm.Tape():
        y = x * 2.0
        with pytest.raises(dm.ShapeError):
            dm.backward(y)


def test_repeated_backward_accumulates_and_zero_grads_resets():
    x = dm.parameter([[1.0, 2.0]])
    for _ in range(2):
        with dm.Tape():
            dm.backward(dm.sum_all(x * x))
    np.testing.assert_allclose(x.grad, 2 * 2 * np.array([[1.0, 2.0]]))
    dm.zero_grads([x])
    np.testing.assert_array_equal(x.grad, np.zeros((1, 2)))


def test_fresh_leaf_grad_is_zero():
    x = dm.parameter(np.ones((3, 2)))
    np.testing.assert_array_equal(x.grad, np.zeros((3, 2)))


def test_tape_is_topological_and_backward_visits_in_reverse():
    x = dm.parameter([[1.0, -2.0]])
    visited = []
    original = dict(dm.BACKWARD_RULES)
    try:
        for kind, rule in original.items():
            dm.BACKWARD_RULES[kind] = (lambda r: lambda node, g: (visited.append(node.output.node_id), r(node, g))[1])(rule)
        with dm.Tape() as tape:
            loss = dm.sum_all(dm.relu(x * 3.0) + x)
            dm.backward(loss)
    finally:
        dm.BACKWARD_RULES.clear()
        dm.BACKWARD_RULES.update(original)
    ids = [n.output.node_id for n in tape.nodes]
    assert ids == sorted(ids)
    for n in tape.nodes:
        assert all(inp.node_id < n.output.node_id for inp in n.inputs)
    assert visited == ids[::-1]


# ---- finite differences

def test_fd_quadratic_is_exact_to_rounding(rng):
    p = dm.parameter(rng.normal(size=(3, 3)))
    assert dm.finite_diff_check(lambda ps: dm.sum_all(ps[0] * ps[0]), [p], 1e-6) < 1e-7


def test_fd_detects_nondeterminism(rng):
    p = dm.parameter(rng.normal(size=(2, 2)))
    calls = iter(range(1000))

    def f(ps):
        return dm.sum_all(ps[0]) * float(next(calls))

    with pytest.raises(ValueError, match="not deterministic"):
        dm.finite_diff_check(f, [p])


def test_fd_rejects_bad_step(rng):
    with pytest.raises(ValueError):
        dm.finite_diff_check(lambda ps: dm.sum_all(ps[0]), [dm.parameter([[1.0]])], 0.0)


def _away_from_kinks(rng, shape, low=0.1):
    return rng.uniform(low, 1.5, shape) * rng.choice([-1.0, 1.0], shape)


@pytest.mark.parametrize("build", [
    lambda a, b, c: dm.sum_all(a @ b),
    lambda a, b, c: dm.sum_all((a - c) * (a + c)),
    lambda a, b, c: dm.sum_all(dm.div(a, dm.sigmoid(c) + 0.5)),
    lambda a, b, c: dm.sum_all(dm.transpose(a) @ c),
    lambda a, b, c: dm.sum_all(dm.relu(a) * c) + dm.sum_all(dm.leaky_relu(c, 0.2)),
    lambda a, b, c: dm.sum_all(dm.log(dm.row_softmax(a @ b))),
    lambda a, b, c: dm.sum_all(dm.row_normalize(dm.sigmoid(a)) * c),
    lambda a, b, c: dm.sum_all(dm.row_normalize(dm.relu(a), zero_rows="uniform") * c),
    lambda a, b, c: dm.sum_all(dm.sqrt(a * a, eps=1e-12)),
    lambda a, b, c: dm.sum_all(dm.sum_rows(a) * dm.mean_rows(c)) + dm.sum_all(dm.sum_cols(a * c)),
    lambda a, b, c: dm.sum_all(dm.concat_cols([a, c]) @ dm.concat_cols([b.T, b.T]).T @ dm.constant(np.ones((2, 1)))),
    lambda a, b, c: dm.sum_all(dm.take_rows(a, [2, 0, 0, 1]) * 1.5),
    lambda a, b, c: dm.sum_all(dm.sigmoid(-dm.sqrt(dm.pair_sq_dist(a, [0, 1, 2], [1, 2, 0]), eps=1e-12))),
    lambda a, b, c: dm.sum_all(a + dm.constant(np.ones((1, 4)))) + dm.sum_all(c * dm.constant(np.ones((3, 1)))),
])
def test_primitive_gradients(build, rng):
    a = dm.parameter(_away_from_kinks(rng, (3, 4)))
    b = dm.parameter(_away_from_kinks(rng, (4, 2)))
    c = dm.parameter(_away_from_kinks(rng, (3, 4)))
    params = {"a": a, "b": b, "c": c}
    assert dm.finite_diff_check(lambda p: build(p["a"], p["b"], p["c"]), params) < 1e-5


def test_wrong_backward_rule_is_caught(rng, monkeypatch):
    a = dm.parameter(_away_from_kinks(rng, (3, 4)))
    monkeypatch.setitem(dm.BACKWARD_RULES, "relu", lambda node, g: (g,))
    assert dm.finite_diff_check(lambda p: dm.sum_all(dm.relu(p[0])), [a]) > 1e-3


# ---- properties

finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_row_softmax_rows_sum_to_one_and_positive(a):
    with dm.Tape():
        s = dm.row_softmax(dm.constant(a)).values
    assert np.max(np.abs(s.sum(axis=1) - 1.0)) < 1e-12
    assert np.all(s > 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5, allow_nan=False)),
       st.sampled_from([2.0, -2.0, 0.5, 4.0, -0.25, 1024.0]))
def test_backward_is_linear_in_loss_scale(x, alpha):
    # power-of-two scales keep the comparison exact in float64
    w = np.linspace(-1, 1, 12).reshape(4, 3)

    def loss_fn(p):
        return dm.sum_all(dm.sigmoid(p @ dm.constant(w)))

    p = dm.parameter(x)
    with dm.Tape():
        dm.backward(loss_fn(p))
    g1 = p.grad.copy()
    p.zero_grad()
    with dm.Tape():
        dm.backward(dm.scalar_mul(loss_fn(p), alpha))
    np.testing.assert_array_equal(p.grad, alpha * g1)
