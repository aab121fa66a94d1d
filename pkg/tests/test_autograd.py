"""Finite-difference checks for every differentiable op, plus engine behaviour."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmdt import autograd as ag
from dmdt.autograd import Tensor, gradcheck, no_grad
from dmdt.errors import ContractError, DimensionError, InvalidMaskError

N_INSTANCES = 100
TOL = 1e-4


def away_from_zero(rng, shape, lo=0.05):
    x = rng.uniform(lo, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def rand_shape(rng, ndim=2, hi=4):
    return tuple(int(n) for n in rng.integers(1, hi + 1, ndim))


def run(case, n=N_INSTANCES, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        fn, arrays, kw = case(rng)
        worst = max(worst, *gradcheck(fn, arrays, rng, **kw))
    return worst


def _binary(op, positive_b=False):
    def case(rng):
        shape = rand_shape(rng)
        b_shape = shape if rng.random() < 0.5 else (1, shape[1])
        b = rng.uniform(0.5, 2.0, b_shape) if positive_b else rng.normal(size=b_shape)
        return op, [rng.normal(size=shape), b], {}
    return case


def _split_max(rng, shape):
    # keep the two operands apart so the winner never flips inside the FD step
    a = rng.normal(size=shape)
    return a, a + away_from_zero(rng, shape, 0.05)


CASES = {
    "add": _binary(ag.add),
    "sub": _binary(ag.sub),
    "mul": _binary(ag.mul),
    "div": _binary(ag.div, positive_b=True),
    "scale": lambda r: (lambda x: ag.scale(x, 2.5), [r.normal(size=rand_shape(r))], {}),
    "relu": lambda r: (ag.relu, [away_from_zero(r, rand_shape(r))], {}),
    "sigmoid": lambda r: (ag.sigmoid, [3 * r.normal(size=rand_shape(r))], {}),
    "exp": lambda r: (ag.exp, [r.normal(size=rand_shape(r))], {}),
    "log": lambda r: (ag.log, [r.uniform(0.2, 3.0, rand_shape(r))], {}),
    "abs": lambda r: (ag.abs_, [away_from_zero(r, rand_shape(r))], {}),
    "maximum": lambda r: (ag.maximum, list(_split_max(r, rand_shape(r))), {}),
    "minimum": lambda r: (ag.minimum, list(_split_max(r, rand_shape(r))), {}),
    "masked_fill": lambda r: (
        (lambda m: (lambda x: ag.masked_fill(x, m, -3.0)))(r.random((3, 4)) < 0.4),
        [r.normal(size=(3, 4))], {}),
    "sum": lambda r: ((lambda ax: (lambda x: ag.sum_(x, axis=ax)))(int(r.integers(0, 2))),
                      [r.normal(size=(3, 4))], {}),
    "sum_keepdims": lambda r: (lambda x: ag.sum_(x, axis=1, keepdims=True), [r.normal(size=(3, 4))], {}),
    "mean": lambda r: (lambda x: ag.mean(x, axis=0), [r.normal(size=(3, 4))], {}),
    "reshape": lambda r: (lambda x: ag.reshape(x, (4, 3)), [r.normal(size=(3, 4))], {}),
    "transpose": lambda r: (lambda x: ag.transpose(x, (2, 0, 1)), [r.normal(size=(2, 3, 4))], {}),
    "getitem_basic": lambda r: (lambda x: x[1:, ::2], [r.normal(size=(3, 4))], {}),
    "getitem_fancy": lambda r: (
        (lambda idx: (lambda x: ag.getitem(x, idx)))(r.integers(0, 3, 5)), [r.normal(size=(3, 4))], {}),
    "concat": lambda r: (lambda a, b: ag.concat([a, b], axis=1),
                         [r.normal(size=(2, 3)), r.normal(size=(2, 2))], {}),
    "split": lambda r: (lambda x: ag.mul(*ag.split(x, [2, 2], axis=1)), [r.normal(size=(3, 4))], {}),
    "broadcast_to": lambda r: (lambda x: ag.broadcast_to(x, (3, 4)), [r.normal(size=(1, 4))], {}),
    "matmul": lambda r: (ag.matmul, [r.normal(size=(3, 4)), r.normal(size=(4, 2))], {}),
    "matmul_batched_weight": lambda r: (ag.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))], {}),
    "matmul_batched": lambda r: (ag.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))], {}),
    "linear": lambda r: (ag.linear, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5)), r.normal(size=5)], {}),
    "softmax": lambda r: (ag.softmax, [2 * r.normal(size=(3, 5))], {}),
    "layer_norm": lambda r: (ag.layer_norm, [r.normal(size=(3, 6)), 1 + 0.3 * r.normal(size=6),
                                             r.normal(size=6)], {}),
    "masked_mean": lambda r: (
        (lambda m: (lambda x: ag.masked_mean(x, m)))(_mask(r, (2, 5))), [r.normal(size=(2, 5, 3))], {}),
    "masked_attention_weights": lambda r: (
        (lambda m: (lambda s: ag.masked_attention_weights(s, m)))(_mask(r, (2, 1, 5))),
        [r.normal(size=(2, 3, 5))], {}),
    "scaled_dot_attention": lambda r: (
        (lambda m: (lambda q, k, v: ag.scaled_dot_attention(q, k, v, m)))(_mask(r, (2, 1, 5))),
        [r.normal(size=(2, 3, 4)), r.normal(size=(2, 5, 4)), r.normal(size=(2, 5, 3))], {}),
    "embedding": lambda r: (
        (lambda ids: (lambda t: ag.embedding(t, ids)))(r.integers(0, 4, (2, 3))), [r.normal(size=(4, 3))], {}),
}


def _mask(rng, shape):
    m = rng.random(shape) < 0.6
    m[..., 0] = True
    return m


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradient_matches_finite_differences(name):
    assert run(CASES[name]) < TOL


def test_dropout_gradient_with_fixed_draws():
    def case(rng):
        seed = int(rng.integers(1 << 30))
        return (lambda x: ag.dropout(x, 0.3, True, np.random.default_rng(seed))), [rng.normal(size=(3, 4))], {}
    assert run(case) < TOL


def _off_lattice(rng, b, p, g, clamp_some=False):
    span = g - 1
    cells = rng.integers(0, span, (b, p, 2)) + rng.uniform(0.05, 0.95, (b, p, 2))
    coords = cells / span
    if clamp_some:
        out = rng.random((b, p, 2)) < 0.2
        coords = np.where(out, coords + rng.choice([-1.2, 1.2], (b, p, 2)), coords)
    return coords


def test_bilinear_gradient_wrt_coords_off_lattice():
    def case(rng):
        g = int(rng.integers(2, 6))
        return ag.bilinear_sample, [rng.normal(size=(2, g, g, 3)), _off_lattice(rng, 2, 4, g)], {}
    assert run(case) < TOL


def test_bilinear_gradient_wrt_grid_with_clamped_points():
    def case(rng):
        g = int(rng.integers(2, 6))
        return ag.bilinear_sample, [rng.normal(size=(2, g, g, 3)),
                                    _off_lattice(rng, 2, 5, g, clamp_some=True)], {}
    assert run(case) < TOL


def test_bilinear_gradient_unbatched_grid():
    def case(rng):
        g = int(rng.integers(2, 5))
        return ag.bilinear_sample, [rng.normal(size=(g, g, 2)), _off_lattice(rng, 3, 4, g)], {}
    assert run(case) < TOL


def test_clamped_coordinates_get_zero_gradient():
    grid = Tensor(np.arange(27, dtype=float).reshape(3, 3, 3), requires_grad=True)
    coords = Tensor(np.array([[[-0.4, 1.3], [0.3, 0.6]]]), requires_grad=True)
    ag.bilinear_sample(grid, coords).sum().backward()
    assert coords.grad[0, 0, 0] == 0.0 and coords.grad[0, 0, 1] == 0.0
    assert np.all(coords.grad[0, 1] != 0.0)


def test_leaf_gradients_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_shared_subexpression_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    # d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [6.0 + 27.0])


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array([0.5]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = ag.scale(y, 1.0)
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad


def test_shape_errors():
    with pytest.raises(DimensionError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        ag.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0)


def test_all_masked_row_is_rejected():
    with pytest.raises(InvalidMaskError):
        ag.masked_mean(Tensor(np.ones((1, 3, 2))), np.zeros((1, 3), bool))
    with pytest.raises(InvalidMaskError):
        ag.masked_attention_weights(Tensor(np.ones((1, 2, 3))), np.zeros((1, 1, 3), bool))


def test_softmax_golden():
    out = ag.softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data
    np.testing.assert_allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_is_shift_invariant_and_stable():
    x = np.array([1000.0, 1001.0, 1002.0])
    np.testing.assert_allclose(ag.softmax(Tensor(x)).data, ag.softmax(Tensor(x - 1000)).data)


def test_masked_weights_are_exactly_zero():
    w = ag.masked_attention_weights(Tensor(np.random.default_rng(0).normal(size=(2, 3, 4))),
                                    np.array([[[True, False, True, False]]] * 2)).data
    assert np.all(w[..., [1, 3]] == 0.0)
    np.testing.assert_allclose(w.sum(-1), 1.0)


def test_sigmoid_extremes_are_finite():
    out = ag.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_dropout_is_identity_in_eval():
    x = Tensor(np.ones(5))
    assert ag.dropout(x, 0.5, False, np.random.default_rng(0)) is x


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_masked_mean_ignores_padding_values(values):
    rng = np.random.default_rng(len(values))
    x = np.array(values)[None, :, None].repeat(2, -1)
    mask = np.ones((1, len(values)), bool)
    garbage = rng.normal(size=(1, 3, 2)) * 1e6
    garbage[0, 0, 0] = np.nan
    padded = np.concatenate([x, garbage], axis=1)
    pmask = np.concatenate([mask, np.zeros((1, 3), bool)], axis=1)
    a = ag.masked_mean(Tensor(x), mask).data
    b = ag.masked_mean(Tensor(padded), pmask).data
    np.testing.assert_array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_unbroadcast_matches_shape(a, b, c):
    g = np.ones((a, b, c))
    assert ag._unbroadcast(g, (1, c)).shape == (1, c)
    assert ag._unbroadcast(g, (b, 1)).sum() == a * b * c
