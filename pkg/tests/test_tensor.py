import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ektm import tensor as tn
from ektm.errors import ContractError, DomainError, ShapeError
from opcases import OP_NAMES, case


# leaf -----------------------------------------------------------------------

def test_leaf_identity_matrix():
    t = tn.leaf([2, 2], [1, 0, 0, 1])
    assert t.shape == (2, 2)
    np.testing.assert_array_equal(t.data, np.eye(2))
    assert t.is_leaf and t.op == "leaf"


def test_leaf_zero_vector():
    t = tn.leaf([3], [0, 0, 0])
    np.testing.assert_array_equal(t.values, [0.0, 0.0, 0.0])


def test_leaf_length_mismatch():
    with pytest.raises(ShapeError):
        tn.leaf([2], [1, 2, 3])


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_leaf_rejects_non_finite(bad):
    with pytest.raises(DomainError):
        tn.leaf([2], [1.0, bad])


def test_values_are_row_major():
    t = tn.leaf([2, 3], range(6))
    assert t.values.tolist() == [0, 1, 2, 3, 4, 5]
    assert t.data.dtype == np.float64


# apply ----------------------------------------------------------------------

def test_sigmoid_zero():
    assert tn.apply("sigmoid", tn.tensor(0.0)).item() == 0.5


def test_softmax_rows_symmetric():
    out = tn.apply("softmax_rows", tn.tensor([[0.0, 0.0]]))
    np.testing.assert_array_equal(out.data, [[0.5, 0.5]])


def test_matmul_identity():
    a = tn.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tn.apply("matmul", tn.tensor(np.eye(2)), a).data, a.data)


def test_max_zero():
    assert tn.apply("max_zero", tn.tensor(-0.3)).item() == 0.0
    assert tn.apply("max_zero", tn.tensor(0.3)).item() == 0.3


def test_log_domain():
    with pytest.raises(DomainError):
        tn.apply("log", tn.tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        tn.apply("log", tn.tensor([-1.0]))


def test_shape_errors():
    with pytest.raises(ShapeError):
        tn.apply("matmul", tn.tensor(np.ones((2, 3))), tn.tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        tn.apply("add", tn.tensor(np.ones(3)), tn.tensor(np.ones(2)))
    with pytest.raises(ShapeError):
        tn.apply("dot", tn.tensor(np.ones(3)), tn.tensor(np.ones(2)))


def test_unknown_op():
    with pytest.raises(ContractError):
        tn.apply("conv2d", tn.tensor([1.0]))


def test_forward_values_match_numpy():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_array_equal(tn.matmul(tn.tensor(a), tn.tensor(b)).data, a @ b)
    np.testing.assert_allclose(tn.l2_norm(tn.tensor(a)).data, np.linalg.norm(a, axis=1), rtol=1e-15)
    np.testing.assert_allclose(tn.exp(tn.tensor(a)).data, np.exp(a), rtol=1e-15)


# detach ---------------------------------------------------------------------

def test_detach_product_gradient():
    x = tn.tensor([1.0, 2.0], requires_grad=True)
    g = tn.backward(tn.sum_all(tn.detach(x) * x))[x]
    np.testing.assert_array_equal(g, [1.0, 2.0])


def test_detach_product_matches_finite_differences():
    f = lambda x: tn.sum_all(tn.detach(x) * x)  # noqa: E731
    assert tn.grad_check(f, [np.array([1.0, 2.0])]) <= 1e-9


def test_detach_sum_has_zero_gradient():
    x = tn.tensor([1.0, 2.0, 3.0], requires_grad=True)
    out = tn.sum_all(tn.detach(x))
    assert not out.requires_grad
    g = tn.backward(out, [x])[x]
    np.testing.assert_array_equal(g, np.zeros(3))
    assert tn.grad_check(lambda t: tn.sum_all(tn.detach(t)), [x]) == 0.0


def test_detach_forward_is_bitwise_identity():
    rng = np.random.default_rng(0)
    x = tn.tensor(rng.normal(size=(5, 3)))
    assert tn.detach(x).data.tobytes() == x.data.tobytes()


# backward -------------------------------------------------------------------

def test_backward_sum():
    x = tn.tensor([1.0, -2.0, 5.0], requires_grad=True)
    np.testing.assert_array_equal(tn.backward(tn.sum_all(x))[x], [1.0, 1.0, 1.0])


def test_backward_sigmoid_at_zero():
    x = tn.tensor(0.0, requires_grad=True)
    assert tn.backward(tn.sigmoid(x))[x] == 0.25


def test_backward_sigmoid_matvec_vs_finite_differences():
    rng = np.random.default_rng(11)
    W, x = rng.normal(size=(3, 3)), rng.normal(size=(3, 1))
    f = lambda w, v: tn.sum_all(tn.sigmoid(tn.matmul(w, v)))  # noqa: E731
    assert tn.grad_check(f, [W, x]) <= 1e-6


def test_backward_non_scalar_root():
    x = tn.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        tn.backward(x * x)


def test_backward_accumulates_shared_subexpressions():
    x = tn.tensor([3.0], requires_grad=True)
    y = x * x
    g = tn.backward(tn.sum_all(y + y * x))[x]  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(g, [2 * 3 + 3 * 9])


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    w = tn.tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = tn.tensor(rng.normal(size=(6, 4)))

    def run():
        h = tn.softmax_rows(tn.matmul(x, w))
        return tn.backward(tn.sum_all(tn.log(h) * h))[w]

    assert run().tobytes() == run().tobytes()


def test_backward_unreachable_leaf_gets_zeros():
    a = tn.tensor([1.0, 2.0], requires_grad=True)
    b = tn.tensor([3.0], requires_grad=True)
    grads = tn.backward(tn.sum_all(a), [a, b])
    np.testing.assert_array_equal(grads[b], [0.0])


def test_no_grad_builds_no_graph():
    a = tn.tensor([1.0], requires_grad=True)
    with tn.no_grad():
        out = a * a
    assert not out.requires_grad and out.parents == ()


# grad_check -----------------------------------------------------------------

def test_grad_check_square():
    x = tn.tensor([1.0, 2.0, 3.0], requires_grad=True)
    np.testing.assert_array_equal(tn.backward(tn.sum_all(x * x))[x], [2.0, 4.0, 6.0])
    assert tn.grad_check(lambda t: tn.sum_all(t * t), [x]) <= 1e-8


def test_grad_check_contracts():
    with pytest.raises(ContractError):
        tn.grad_check(lambda t: t * t, [np.ones(2)])
    with pytest.raises(ContractError):
        tn.grad_check(lambda t: tn.sum_all(t), [np.ones(2)], eps=1e-2)
    with pytest.raises(ContractError):
        tn.grad_check(lambda t: tn.sum_all(t), [np.ones(2)], eps=0.0)


def test_grad_check_detects_a_wrong_gradient():
    # an op whose backward is off by a factor 2 must be caught
    def bad_square(t):
        return tn._node(t.data ** 2, "bad", (t,), lambda g: (g * t.data,))

    assert tn.grad_check(lambda t: tn.sum_all(bad_square(t)), [np.array([1.0, 2.0])]) > 0.3


def test_grad_check_float64_probe_option():
    x = np.array([0.5, -1.5])
    assert tn.grad_check(lambda t: tn.sum_all(tn.exp(t)), [x], probe_dtype=np.float64) <= 1e-8


def test_grad_check_report_subsampling():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50,))
    rep = tn.grad_check_report(lambda t: tn.sum_all(tn.sigmoid(t)), [x], max_coords=5)
    assert len(rep) == 1 and rep[0] <= 1e-8


@pytest.mark.parametrize("op", OP_NAMES)
def test_randomized_op_gradients(op):
    # the acceptance suite runs 100 trials per operator; 25 keep the unit suite quick
    rng = np.random.default_rng(sum(map(ord, op)))
    worst = max(tn.grad_check(*case(op, rng)) for _ in range(25))
    assert worst <= 1e-5


# properties -----------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = tn.softmax_rows(tn.tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_softmax_rows_large_spread_is_stable(x):
    p = tn.softmax_rows(tn.tensor(x * 40.0)).data  # spreads beyond exp's range
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# magnitudes below ~1e-154 square to zero, so they are left out
normable = st.one_of(st.just(0.0), st.floats(1e-100, 50), st.floats(-50, -1e-100))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=normable))
def test_l2_norm_nonnegative_zero_iff_zero(x):
    n = tn.l2_norm(tn.tensor(x)).item()
    assert n >= 0
    assert (n == 0) == bool(np.all(x == 0))


def test_l2_norm_gradient_at_zero_is_finite():
    x = tn.tensor(np.zeros(3), requires_grad=True)
    g = tn.backward(tn.l2_norm(x))[x]
    np.testing.assert_array_equal(g, np.zeros(3))


def test_gradient_shapes_match_leaves():
    rng = np.random.default_rng(2)
    a = tn.tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = tn.tensor(rng.normal(size=(3,)), requires_grad=True)
    grads = tn.backward(tn.sum_all(tn.relu(a + b)))
    assert grads[a].shape == a.shape and grads[b].shape == b.shape
