"""Autodiff core: finite-difference gradient checks and op contracts."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmlm import tensor as T
from advmlm.tensor import ContractViolation, NumericFault, Tensor

from conftest import grad_check

INSTANCES = 20
TOL = 1e-3


def _rng(seed):
    return np.random.default_rng(seed)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _w(rng, *shape):
    return rng.normal(size=shape)


IDS = np.array([[1, 3, 3], [6, 0, 1]])

# name -> (input factory, scalar builder).  Straight-through is excluded on
# purpose: its backward is not the derivative of its forward.

CASES = {
    "add_broadcast": (lambda r: [_w(r, 3, 4), _w(r, 4)], lambda a, b: ((a + b) * (a + b)).sum()),
    "sub": (lambda r: [_w(r, 2, 3), _w(r, 2, 3)], lambda a, b: ((a - b) * a).sum()),
    "mul_broadcast": (lambda r: [_w(r, 2, 3, 4), _w(r, 3, 1)], lambda a, b: (a * b).sum()),
    "div": (lambda r: [_w(r, 3, 3), 1.5 + r.random((3, 3))], lambda a, b: (a / b).sum()),
    "neg": (lambda r: [_w(r, 5)], lambda a: (-a * a).sum()),
    "exp": (lambda r: [_w(r, 4, 2)], lambda a: a.exp().sum()),
    "log": (lambda r: [0.5 + r.random((4, 2))], lambda a: a.log().sum()),
    "tanh": (lambda r: [_w(r, 6)], lambda a: a.tanh().sum()),
    "sigmoid": (lambda r: [_w(r, 6)], lambda a: (a.sigmoid() * a).sum()),
    "relu": (lambda r: [_away_from_zero(r, (8,))], lambda a: (a.relu() * a).sum()),
    "gelu": (lambda r: [_w(r, 3, 5)], lambda a: (T.gelu(a) * a).sum()),
    "maximum": (lambda r: [_away_from_zero(r, (10,))], lambda a: (T.maximum(a, 0.0) * a).sum()),
    "where": (
        lambda r: [_w(r, 4, 3), _w(r, 4, 3)],
        lambda a, b: (T.where(np.arange(12).reshape(4, 3) % 2 == 0, a, b) * a).sum(),
    ),
    "sum_axis": (lambda r: [_w(r, 3, 4)], lambda a: (a.sum(axis=0) * a.sum(axis=0)).sum()),
    "mean_keepdims": (lambda r: [_w(r, 3, 4)], lambda a: (a.mean(axis=1, keepdims=True) * a).sum()),
    "reshape_transpose": (lambda r: [_w(r, 2, 6)], lambda a: (a.reshape(3, 4).transpose(1, 0) * np.arange(12).reshape(4, 3)).sum()),
    "getitem_repeats": (lambda r: [_w(r, 5, 3)], lambda a: (a[np.array([0, 2, 2, 4])] * 2.0).sum() + (a[:, 1] * a[:, 1]).sum()),
    "concat": (lambda r: [_w(r, 2, 3), _w(r, 2, 2)], lambda a, b: (T.concat([a, b], axis=-1) * np.arange(10).reshape(2, 5)).sum()),
    "stack": (lambda r: [_w(r, 3), _w(r, 3)], lambda a, b: (T.stack([a, b * a], axis=0) * np.arange(6).reshape(2, 3)).sum()),
    "matmul_batched": (lambda r: [_w(r, 2, 3, 4), _w(r, 4, 5)], lambda a, b: ((a @ b) * (a @ b)).sum()),
    "softmax": (lambda r: [_w(r, 3, 5)], lambda a: (T.softmax(a, dim=-1) * np.arange(15).reshape(3, 5)).sum()),
    "log_softmax": (lambda r: [_w(r, 3, 5)], lambda a: (T.log_softmax(a, dim=-1) * np.arange(15).reshape(3, 5)).sum()),
    "masked_softmax": (
        lambda r: [_w(r, 2, 4)],
        lambda a: (T.masked_softmax(a, np.array([[1, 1, 0, 1], [0, 1, 1, 0]])) * np.arange(8).reshape(2, 4)).sum(),
    ),
    "layer_norm": (
        lambda r: [_w(r, 3, 6), 1 + 0.1 * _w(r, 6), 0.1 * _w(r, 6)],
        lambda x, w, b: (T.layer_norm(x, w, b) * np.arange(18).reshape(3, 6)).sum(),
    ),
    "embedding": (lambda r: [_w(r, 7, 3)], lambda t: (T.embedding(IDS, t) * T.embedding(IDS, t)).sum()),
}


def worst_op_error(name):
    make, build = CASES[name]
    return max(grad_check(build, make(_rng(seed))) for seed in range(INSTANCES))


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name, f64):
    worst = worst_op_error(name)
    assert worst <= TOL, f"{name}: max relative error {worst:.2e}"


def worst_gru_sequence_error():
    worst = 0.0
    for seed in range(INSTANCES):
        r = _rng(seed)
        B, S, H = 2, 4, 3
        mask = np.ones((B, S))
        mask[1, 3] = 0
        reverse = bool(seed % 2)
        coeff = r.normal(size=(B, S, H))

        def build(gi, w, b):
            return (T.gru_sequence(gi, w, b, mask, reverse=reverse) * coeff).sum()

        worst = max(worst, grad_check(build, [r.normal(size=(B, S, 3 * H)), 0.5 * r.normal(size=(3 * H, H)), 0.5 * r.normal(size=(3 * H,))]))
    return worst


def test_gru_sequence_gradient(f64):
    assert worst_gru_sequence_error() <= TOL


def test_straight_through_forward_is_hard_value():
    soft = Tensor(np.array([0.2, 0.7, 0.51]), requires_grad=True)
    out = T.straight_through((soft.data > 0.5).astype(float), soft)
    assert out.data.tolist() == [0.0, 1.0, 1.0]
    (out * np.array([1.0, 2.0, 3.0])).sum().backward()
    assert soft.grad.tolist() == [1.0, 2.0, 3.0]


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractViolation):
        (x * 2.0).backward()


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    assert x.grad.tolist() == [5.0]


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_log_of_nonpositive_raises():
    x = Tensor(np.array([1.0, 0.0]), requires_grad=True)
    with pytest.raises(NumericFault):
        T.log(x)


def test_division_by_zero_raises():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(NumericFault):
        x / Tensor(np.array([0.0]))


def test_embedding_rejects_out_of_range_ids():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    with pytest.raises(ContractViolation):
        T.embedding(np.array([0, 4]), table)


def test_masked_softmax_all_masked_row_is_zero():
    out = T.masked_softmax(Tensor(np.ones((2, 3))), np.array([[0, 0, 0], [1, 0, 1]]))
    assert out.data[0].tolist() == [0.0, 0.0, 0.0]
    np.testing.assert_allclose(out.data[1], [0.5, 0.0, 0.5])


def test_default_dtype_context():
    assert T.get_default_dtype() == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12))
def test_softmax_is_a_distribution(values):
    out = T.softmax(Tensor(values, dtype=np.float64), dim=-1).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=12))
def test_log_softmax_matches_log_of_softmax(values):
    x = Tensor(values, dtype=np.float64)
    np.testing.assert_allclose(np.exp(T.log_softmax(x).data), T.softmax(x).data, atol=1e-12)


def test_one_hot_rows():
    out = T.one_hot(np.array([[0, 2]]), 3).data
    assert out.tolist() == [[[1, 0, 0], [0, 0, 1]]]
