import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from visprompt import tensor as T
from visprompt.errors import ContractError, DegenerateInputError, DimensionError
from visprompt.tensor import Tensor


def param(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_unit_selector():
    out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]]))
    np.testing.assert_array_equal(out.data, [[2.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum_matches_finite_differences():
    rng = np.random.default_rng(0)
    A, B = param(rng.normal(size=(3, 4))), param(rng.normal(size=(4, 2)))
    report = T.gradcheck(lambda: T.sum(T.matmul(A, B)), [A, B], rtol=1e-5)
    assert report["ok"], report


def test_relu_and_sigmoid_points():
    assert T.relu(Tensor([-1.0])).item() == 0.0
    assert T.sigmoid(Tensor([0.0])).item() == 0.5


def test_sigmoid_slope_at_zero():
    x = param([0.0])
    T.backward(T.sum(T.sigmoid(x)))
    assert x.grad[0] == pytest.approx(0.25, abs=1e-15)
    num = T.numerical_grad(lambda: T.sum(T.sigmoid(x)), x)
    assert num[0] == pytest.approx(0.25, abs=1e-10)


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-300)


def test_elementwise_dispatch_and_shape_errors():
    a, b = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
    np.testing.assert_array_equal(T.elementwise("add", a, b).data, [4.0, 2.0])
    np.testing.assert_array_equal(T.elementwise("mul", a, b).data, [3.0, -8.0])
    np.testing.assert_array_equal(T.elementwise("relu", a).data, [1.0, 0.0])
    np.testing.assert_array_equal(T.elementwise("scale", a, 2.0).data, [2.0, -4.0])
    with pytest.raises(DimensionError):
        T.add(a, Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 2))))


def test_gap_examples():
    np.testing.assert_array_equal(T.gap(Tensor(np.full((3, 5, 4), 1.5))).data, np.full(4, 1.5))
    m = np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1)
    np.testing.assert_array_equal(T.gap(Tensor(m)).data, [2.5])


def test_mean_over_batch_singleton():
    row = np.array([[0.3, -1.0, 2.0]])
    np.testing.assert_array_equal(T.mean_over_batch(Tensor(row)).data, row[0])


def test_empty_tensor_rejected():
    with pytest.raises(DegenerateInputError):
        Tensor(np.zeros((0, 3)))


def test_normalize_examples():
    np.testing.assert_allclose(T.normalize_l2(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=0, atol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(T.normalize_l2(Tensor(u)).data, u)
    with pytest.raises(DegenerateInputError):
        T.normalize_l2(Tensor(np.zeros(3)))


def test_normalize_gradcheck_random_8_vector():
    rng = np.random.default_rng(3)
    v = param(rng.normal(size=8))
    w = Tensor(rng.normal(size=8))
    report = T.gradcheck(lambda: T.sum(T.mul(T.normalize_l2(v), w)), [v], rtol=1e-5)
    assert report["ok"], report


def test_backward_of_sum_gives_ones():
    p = param(np.arange(6.0).reshape(2, 3))
    T.backward(T.sum(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_of_zero_times_p_gives_zeros():
    p = param([1.0, 2.0])
    T.backward(T.sum(T.scale(p, 0.0)))
    np.testing.assert_array_equal(p.grad, [0.0, 0.0])


def test_backward_requires_scalar():
    p = param([1.0, 2.0])
    with pytest.raises(ContractError):
        T.backward(T.scale(p, 2.0))


def test_backward_needs_connected_loss():
    with pytest.raises(ContractError):
        T.backward(T.sum(Tensor([1.0, 2.0])))


def test_unreachable_parameters_get_no_gradient():
    p, q = param([1.0]), param([2.0])
    T.backward(T.sum(T.scale(p, 3.0)))
    assert q.grad is None or not np.any(q.grad)


def test_backward_twice_accumulates_double():
    rng = np.random.default_rng(1)
    A = param(rng.normal(size=(3, 3)))

    def loss():
        return T.sum(T.sigmoid(T.matmul(A, A)))

    T.backward(loss())
    once = A.grad.copy()
    T.backward(loss())
    np.testing.assert_array_equal(A.grad, 2 * once)


def test_shared_node_visited_once():
    x = param([2.0])
    y = T.mul(x, x)
    z = T.add(y, y)
    T.backward(T.sum(z))
    assert x.grad[0] == 8.0
    order = T.topological_order(T.sum(z))
    assert len(order) == len({id(n) for n in order})


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))

    def f():
        h = T.tanh(T.matmul(Tensor(a), Tensor(b)))
        return T.log_softmax(T.normalize_l2(h), axis=-1).data

    assert f().tobytes() == f().tobytes()


def test_no_grad_records_nothing():
    p = param([1.0, 2.0])
    with T.no_grad():
        out = T.sum(T.scale(p, 2.0))
    assert not out.requires_grad
    assert T.grad_enabled()


def test_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def _op_cases(rng):
    """Scalar losses exercising every differentiable op."""
    a = param(rng.normal(size=(3, 4)))
    b = param(rng.normal(size=(3, 4)))
    c = param(rng.normal(size=(4, 2)))
    m = param(rng.normal(size=(2, 2, 2, 3)))
    w34, w3 = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=3))
    w2 = Tensor(rng.normal(size=(2, 3)))
    return {
        "matmul": (lambda: T.sum(T.mul(T.matmul(a, c), T.matmul(b, c))), [a, b, c]),
        "add_sub": (lambda: T.sum(T.mul(T.sub(T.add(a, b), a), w34)), [a, b]),
        "relu": (lambda: T.sum(T.mul(T.relu(T.add(a, Tensor(np.full((3, 4), 0.05)))), w34)), [a]),
        "sigmoid": (lambda: T.sum(T.mul(T.sigmoid(a), w34)), [a]),
        "tanh": (lambda: T.sum(T.mul(T.tanh(a), w34)), [a]),
        "abs": (lambda: T.sum(T.mul(T.absolute(a), w34)), [a]),
        "scale": (lambda: T.sum(T.mul(T.scale(a, -1.7), w34)), [a]),
        "sum_mean": (lambda: T.sum(T.mul(T.mean(T.mul(a, b), axis=1), w3)), [a, b]),
        "gap": (lambda: T.sum(T.mul(T.gap(m), w2)), [m]),
        "mean_over_batch": (lambda: T.sum(T.mul(T.mean_over_batch(T.tanh(a)), Tensor(np.arange(4.0)))), [a]),
        "normalize": (lambda: T.sum(T.mul(T.normalize_l2(a, axis=1), w34)), [a]),
        "log_softmax": (lambda: T.sum(T.mul(T.log_softmax(a, axis=-1), w34)), [a]),
        "reshape_expand": (
            lambda: T.sum(T.mul(T.expand(T.reshape(T.sum(a, axis=1), (3, 1)), (3, 4)), b)), [a, b]),
        "concat_stack": (
            lambda: T.sum(T.mul(T.concat([a, T.stack([T.sum(b, axis=0)], 0)], 0), T.concat([b, Tensor(np.ones((1, 4)))], 0))),
            [a, b]),
        "take_slice": (
            lambda: T.sum(T.mul(T.take(a, [2, 0, 2], 0), T.slice_axis(T.concat([b, b], 0), 1, 4, 0))), [a, b]),
    }


@pytest.mark.parametrize("name", sorted(_op_cases(np.random.default_rng(0))))
def test_every_op_passes_gradcheck_over_50_seeds(name):
    for seed in range(50):
        fn, params = _op_cases(np.random.default_rng(seed))[name]
        report = T.gradcheck(fn, params)
        assert report["ok"], (name, seed, report["failures"][:3])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-20, 20)))
def test_log_softmax_rows_exponentiate_to_one(x):
    out = T.log_softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-5, 5)).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_normalize_yields_unit_norm(v):
    assert np.linalg.norm(T.normalize_l2(Tensor(v)).data) == pytest.approx(1.0, abs=1e-12)
