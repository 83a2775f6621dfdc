import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semiseq import _kernels
from semiseq import tensor as tn
from semiseq.tensor import Tape, Tensor

PRIMITIVE_TOL = 1e-4


def param(rng, *shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def check(loss_fn, tensors, tol=PRIMITIVE_TOL):
    a, n = tn.gradient_errors(loss_fn, tensors)
    err = tn.max_relative_error(a, n)
    assert err < tol, f"max relative error {err:.3g}"
    return err


def probe(out, rng):
    """Random fixed cotangent so every output entry reaches the loss."""
    return rng.uniform(-1, 1, out.shape)


# -- matmul -----------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tn.matmul(a, Tensor(np.eye(2))).data, a.data)
    np.testing.assert_array_equal(tn.matmul(Tensor(np.eye(2)), Tensor([[5.0], [7.0]])).data,
                                  [[5.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(tn.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_matmul_grad_of_sum_is_column_sums(rng):
    a, b = param(rng, 3, 4), param(rng, 4, 5)
    with Tape() as tape:
        tape.backward(tn.total(tn.matmul(a, b)))
    expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)
    check(lambda: tn.total(tn.matmul(a, b)), [a, b])


def test_matmul_batched_leading_axes(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    c = probe(np.empty((2, 3, 5)), rng)
    check(lambda: tn.weighted_sum(tn.matmul(a, b), c), [a, b])


# -- elementwise --------------------------------------------------------------

def test_sigmoid_and_tanh_at_zero():
    assert tn.sigmoid(Tensor(0.0)).item() == 0.5
    assert tn.tanh(Tensor(0.0)).item() == 0.0


def test_square_derivative_at_three():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        tape.backward(tn.mul(x, x))
    assert x.grad == pytest.approx(6.0, rel=1e-12)
    num = tn.numerical_grad(lambda: tn.mul(x, x).item(), x.data)
    assert float(num) == pytest.approx(6.0, rel=1e-8)


@pytest.mark.parametrize("op", ["tanh", "sigmoid", "exp"])
def test_unary_gradients(op, rng):
    a = param(rng, 3, 4)
    c = probe(a, rng)
    check(lambda: tn.weighted_sum(tn.elementwise(op, a), c), [a])


def test_log_gradient_on_positive_inputs(rng):
    a = param(rng, 3, 4, low=0.2, high=2.0)
    c = probe(a, rng)
    check(lambda: tn.weighted_sum(tn.log(a), c), [a])


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_log_domain_error(bad):
    with pytest.raises(tn.DomainError):
        tn.log(Tensor([1.0, bad]))


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_gradients(op, rng):
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    c = probe(a, rng)
    check(lambda: tn.weighted_sum(tn.elementwise(op, a, b), c), [a, b])


def test_binary_broadcast_gradient(rng):
    a, b = param(rng, 3, 4), param(rng, 4)
    c = probe(a, rng)
    check(lambda: tn.weighted_sum(tn.mul(a, b) + b, c), [a, b])


def test_scale_gradient(rng):
    a = param(rng, 5)
    check(lambda: tn.total(tn.elementwise("scale", a, -2.5)), [a])


def test_unknown_elementwise_op():
    with pytest.raises(ValueError):
        tn.elementwise("relu", Tensor(1.0))


# -- shape ops ------------------------------------------------------------------

def test_shape_op_gradients(rng):
    a, b = param(rng, 4, 3, 2), param(rng, 4, 3, 5)
    c1 = rng.uniform(-1, 1, (3, 7))
    c2 = rng.uniform(-1, 1, (2, 4, 3, 2))
    c3 = rng.uniform(-1, 1, (6, 4))
    check(lambda: tn.weighted_sum(tn.index(tn.concat([a, b], axis=-1), 1), c1), [a, b])
    check(lambda: tn.weighted_sum(tn.stack([a, a * a], axis=0), c2), [a])
    check(lambda: tn.weighted_sum(tn.reshape(a, (6, 4)), c3), [a])
    check(lambda: tn.weighted_sum(tn.index(a, slice(1, 3)), c2[0, 1:3]), [a])


def test_pick_gradient_and_shape_check(rng):
    a = param(rng, 3, 2, 5)
    ids = rng.integers(0, 5, (3, 2))
    np.testing.assert_array_equal(tn.pick(a, ids).data,
                                  np.take_along_axis(a.data, ids[..., None], -1)[..., 0])
    check(lambda: tn.weighted_sum(tn.pick(a, ids), np.arange(6.0).reshape(3, 2)), [a])
    with pytest.raises(tn.DimensionError):
        tn.pick(a, ids[:2])


# -- softmax --------------------------------------------------------------------

def test_softmax_equal_logits():
    np.testing.assert_allclose(tn.softmax_rows(Tensor(np.zeros((1, 4)))).data, [[0.25] * 4],
                               rtol=0, atol=1e-15)


def test_softmax_closed_form():
    y = tn.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
    np.testing.assert_allclose(y, [[0.25, 0.75]], rtol=1e-14)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = tn.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(tn.softmax_rows(Tensor(x + c)).data, y, atol=1e-12)


def test_softmax_extreme_logits_are_stable():
    y = tn.softmax_rows(Tensor([[1000.0, 0.0, -1000.0]])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [[1.0, 0.0, 0.0]], atol=1e-12)


def test_softmax_gradient_and_mask(rng):
    a = param(rng, 4, 5)
    c = probe(a, rng)
    check(lambda: tn.weighted_sum(tn.softmax_rows(a), c), [a])
    mask = np.array([1, 1, 0, 1, 0])
    y = tn.softmax_rows(a, mask).data
    assert np.all(y[:, [2, 4]] == 0.0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    check(lambda: tn.weighted_sum(tn.softmax_rows(a, mask), c), [a])


# -- lookup ---------------------------------------------------------------------

def test_lookup_examples(backend, rng):
    table = param(rng, 4, 3)
    np.testing.assert_array_equal(tn.lookup(table, [0]).data, table.data[:1])
    assert tn.lookup(table, np.array([], dtype=np.int64)).shape == (0, 3)
    g = rng.uniform(-1, 1, (2, 3))
    with Tape() as tape:
        tape.backward(tn.weighted_sum(tn.lookup(table, [2, 2]), g))
    np.testing.assert_allclose(table.grad[2], g[0] + g[1], rtol=1e-15)
    assert np.all(table.grad[[0, 1, 3]] == 0)


def test_lookup_out_of_range():
    with pytest.raises(IndexError):
        tn.lookup(Tensor(np.zeros((3, 2))), [0, 3])
    with pytest.raises(IndexError):
        tn.lookup(Tensor(np.zeros((3, 2))), [-1])


def test_lookup_gradient(backend, rng):
    table = param(rng, 6, 3)
    ids = np.array([[1, 5, 1], [0, 1, 2]])
    c = rng.uniform(-1, 1, (2, 3, 3))
    check(lambda: tn.weighted_sum(tn.lookup(table, ids), c), [table])


# -- dropout --------------------------------------------------------------------

def test_dropout_identity_cases(rng):
    a = Tensor(rng.normal(size=(10, 10)))
    assert tn.dropout(a, 0.0, True, rng) is a
    assert tn.dropout(a, 0.3, False, rng) is a


def test_dropout_monte_carlo():
    a = Tensor(np.ones(1_000_000))
    y = tn.dropout(a, 0.3, True, np.random.default_rng(7)).data
    assert abs(np.mean(y == 0) - 0.3) < 0.005
    np.testing.assert_allclose(y[y != 0], 1 / 0.7, rtol=1e-15)


def test_dropout_gradient_uses_same_mask(rng):
    a = param(rng, 20)
    seed = 3
    check(lambda: tn.total(tn.dropout(a, 0.3, True, np.random.default_rng(seed))), [a])


# -- fused recurrences ----------------------------------------------------------

@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_gradient(backend, reverse, rng):
    T, B, H = 5, 3, 4
    xw, wh = param(rng, T, B, 4 * H), param(rng, H, 4 * H, low=-1, high=1)
    h0, c0 = param(rng, B, H), param(rng, B, H)
    mask = np.ones((T, B))
    mask[3:, 1] = 0
    mask[1:, 2] = 0
    gh, gc = rng.uniform(-1, 1, (T, B, H)), rng.uniform(-1, 1, (T, B, H))

    def loss():
        hs, cs = tn.lstm(xw, wh, h0, c0, mask, reverse)
        return tn.weighted_sum(hs, gh) + tn.weighted_sum(cs, gc)

    check(loss, [xw, wh, h0, c0])


def test_lstm_padding_carries_state(backend, rng):
    T, B, H = 4, 2, 3
    xw, wh = param(rng, T, B, 4 * H), param(rng, H, 4 * H)
    h0, c0 = param(rng, B, H), param(rng, B, H)
    mask = np.array([[1, 1], [1, 0], [1, 0], [1, 0]], dtype=float)
    hs, cs = tn.lstm(xw, wh, h0, c0, mask)
    for t in range(1, T):
        np.testing.assert_array_equal(hs.data[t, 1], hs.data[0, 1])
        np.testing.assert_array_equal(cs.data[t, 1], cs.data[0, 1])


def test_lstm_shape_errors(rng):
    with pytest.raises(tn.DimensionError):
        tn.lstm(Tensor(np.zeros((2, 1, 8))), Tensor(np.zeros((3, 12))),
                Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))))


def test_attention_gradient(backend, rng):
    T, S, B, D, E = 3, 4, 2, 5, 6
    q, k, v = param(rng, T, B, D), param(rng, S, B, D), param(rng, S, B, E)
    mask = np.ones((S, B))
    mask[2:, 1] = 0
    c = rng.uniform(-1, 1, (T, B, E))
    check(lambda: tn.weighted_sum(tn.attention(q, k, v, mask)[0], c), [q, k, v])


def test_kernel_paths_agree(rng):
    if not _kernels._NUMBA_IMPORTED:
        pytest.skip("numba unavailable")
    T, B, H = 6, 3, 5
    xw, wh = rng.normal(size=(T, B, 4 * H)), rng.normal(size=(H, 4 * H)) * 0.5
    h0, c0 = rng.normal(size=(B, H)), rng.normal(size=(B, H))
    mask = np.ones((T, B))
    mask[4:, 0] = 0
    for reverse in (False, True):
        fwd = _kernels.lstm_forward_np(xw, wh, h0, c0, mask, reverse)
        gh, gc = rng.normal(size=(T, B, H)), rng.normal(size=(T, B, H))
        ba = _kernels.lstm_backward_np(gh, gc, wh, h0, c0, mask, reverse, *fwd)
        bb = _kernels.lstm_backward_nb(gh, gc, wh, h0, c0, mask, reverse, *fwd)
        for x, y in zip(ba, bb):
            np.testing.assert_allclose(x, y, rtol=1e-11, atol=1e-12)
    ids = rng.integers(0, 7, 40)
    gr = rng.normal(size=(40, 3))
    np.testing.assert_allclose(_kernels.scatter_rows_np(ids, gr, 7),
                               _kernels.scatter_rows_nb(ids, gr, 7), rtol=1e-13)


def test_set_backend_validates():
    with pytest.raises(ValueError):
        _kernels.set_backend("cuda")


# -- backward -------------------------------------------------------------------

def test_backward_identity_loss():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        tape.backward(tn.scale(x, 1.0))
    assert x.grad == 1.0


def test_backward_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = tn.tanh(x)
        with pytest.raises(ValueError):
            tape.backward(y)


def test_unreachable_tensor_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    z = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        unused = tn.tanh(z)
        tape.backward(tn.total(x))
    assert unused.shape == (2,)
    np.testing.assert_array_equal(z.grad, np.zeros(2))


def test_matmul_chain_matches_finite_differences(rng):
    a, b, c = param(rng, 3, 4), param(rng, 4, 4), param(rng, 4, 2)
    check(lambda: tn.total(tn.tanh(tn.matmul(tn.matmul(a, b), c))), [a, b, c])


def test_backward_is_bitwise_deterministic(rng):
    w = param(rng, 4, 8)
    x = rng.normal(size=(5, 4))

    def grads():
        w.grad = None
        with Tape() as tape:
            tape.backward(tn.total(tn.softmax_rows(tn.matmul(Tensor(x), w))
                                   * Tensor(rng_fixed)))
        return w.grad.copy()

    rng_fixed = np.random.default_rng(0).normal(size=(5, 8))
    assert grads().tobytes() == grads().tobytes()


def test_no_grad_records_nothing(rng):
    x = param(rng, 3)
    with Tape() as tape:
        with tn.no_grad():
            tn.tanh(x)
        assert len(tape) == 0


# -- sgd ------------------------------------------------------------------------

def test_sgd_zero_grad_leaves_params():
    p = Tensor([1.0, 2.0], requires_grad=True)
    p.grad = np.zeros(2)
    tn.sgd_step([p], 1.0, 5.0)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert p.grad is None


def test_sgd_plain_step():
    p = Tensor(1.0, requires_grad=True)
    p.grad = np.array(0.5)
    tn.sgd_step([p], 1.0)
    assert p.item() == 0.5


def test_sgd_clips_by_global_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([6.0, 8.0])
    norm = tn.sgd_step([p], 1.0, 5.0)
    assert norm == 10.0
    np.testing.assert_allclose(p.data, [-3.0, -4.0], rtol=1e-15)
