import math

import numpy as np
import pytest

from loca import tensor as T
from loca.errors import ContractError, ParameterError, ShapeError, TapeError


def fd_check(f, x, eps=1e-4, coords=None):
    return T.finite_difference_check(f, T.Tensor(x, dtype=np.float64), eps=eps, coords=coords)


def test_matmul_identity():
    m = np.array([[2.0, -1.0], [0.5, 3.0]], dtype=np.float32)
    eye = T.Tensor(np.eye(2, dtype=np.float32))
    out = T.matmul(eye, T.Tensor(m))
    np.testing.assert_allclose(out.data, m)


def test_matmul_hand_checked():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.Tensor([[1.0], [1.0]])
    np.testing.assert_allclose(T.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(7, 3))

    err_a = fd_check(lambda t: T.sum_all(T.matmul(t, T.Tensor(b, dtype=np.float64))), a)
    err_b = fd_check(lambda t: T.sum_all(T.matmul(T.Tensor(a, dtype=np.float64), t)), b)
    assert err_a < 1e-3 and err_b < 1e-3


def test_batched_matmul_gradients():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4, 5))
    b = rng.normal(size=(3, 5, 2))
    err = fd_check(lambda t: T.sum_all(T.matmul(t, T.Tensor(b, dtype=np.float64))), a)
    assert err < 1e-3
    err = fd_check(lambda t: T.sum_all(T.matmul(T.Tensor(a, dtype=np.float64), t)), b)
    assert err < 1e-3


def test_softmax_uniform_row():
    out = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], rtol=1e-6)


def test_softmax_analytic():
    out = T.softmax_rows(T.Tensor([[math.log(2.0), 0.0]]))
    np.testing.assert_allclose(out.data, [[2 / 3, 1 / 3]], rtol=1e-6)


def test_softmax_sharpens_as_temperature_drops():
    row = T.Tensor([[1.0, 0.0]])
    firsts = [T.softmax_rows(row, temperature=t).data[0, 0] for t in (1.0, 0.5, 0.1)]
    assert firsts[0] < firsts[1] < firsts[2] < 1.0 + 1e-6


def test_softmax_rows_sum_to_one_with_large_magnitudes():
    rng = np.random.default_rng(2)
    x = T.Tensor(rng.uniform(-1e4, 1e4, size=(6, 9)).astype(np.float32))
    out = T.softmax_rows(x)
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(6), atol=1e-6)


def test_softmax_temperature_validation():
    with pytest.raises(ParameterError):
        T.softmax_rows(T.Tensor([[1.0]]), temperature=0.0)


def test_layer_norm_constant_row_zeroes_out():
    x = T.Tensor(np.full((1, 5), 3.7, dtype=np.float32))
    g = T.Tensor(np.ones(5, dtype=np.float32))
    b = T.Tensor(np.zeros(5, dtype=np.float32))
    out = T.layer_norm(x, g, b, eps=1e-5)
    np.testing.assert_allclose(out.data, np.zeros((1, 5)), atol=1e-5)


def test_layer_norm_already_normalized_row():
    x = T.Tensor([[1.0, -1.0]])
    g = T.Tensor(np.ones(2))
    b = T.Tensor(np.zeros(2))
    out = T.layer_norm(x, g, b, eps=1e-10)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_gradients():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 8))
    gain = rng.normal(size=8)
    bias = rng.normal(size=8)

    def wrt_x(t):
        return T.sum_all(
            T.mul(
                T.layer_norm(t, T.Tensor(gain, dtype=np.float64), T.Tensor(bias, dtype=np.float64)),
                T.Tensor(rng_weights, dtype=np.float64),
            )
        )

    rng_weights = np.random.default_rng(4).normal(size=(4, 8))
    assert fd_check(wrt_x, x) < 1e-3

    def wrt_gain(t):
        return T.sum_all(
            T.mul(
                T.layer_norm(T.Tensor(x, dtype=np.float64), t, T.Tensor(bias, dtype=np.float64)),
                T.Tensor(rng_weights, dtype=np.float64),
            )
        )

    assert fd_check(wrt_gain, gain) < 1e-3


def test_cross_entropy_uniform_logits_hard_target():
    logits = T.Tensor(np.zeros((3, 196), dtype=np.float32))
    loss = T.cross_entropy_from_logits(logits, np.array([0, 5, 195]))
    assert abs(loss.item() - math.log(196)) < 1e-5
    assert abs(loss.item() - 5.2781) < 1e-3


def test_cross_entropy_perfect_prediction_goes_to_zero():
    logits = np.full((2, 4), -100.0, dtype=np.float32)
    logits[0, 1] = 100.0
    logits[1, 3] = 100.0
    loss = T.cross_entropy_from_logits(T.Tensor(logits), np.array([1, 3]))
    assert loss.item() < 1e-6


def test_cross_entropy_soft_target_equals_entropy():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 6))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    loss = T.cross_entropy_from_logits(T.Tensor(logits, dtype=np.float64), p)
    entropy = -(p * np.log(p)).sum(axis=1).mean()
    assert abs(loss.item() - entropy) < 1e-6


def test_cross_entropy_index_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy_from_logits(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_gradients():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(5, 7))
    hard = np.array([0, 1, 2, 3, 4])
    soft = np.full((5, 7), 1 / 7)
    assert fd_check(lambda t: T.cross_entropy_from_logits(t, hard), logits) < 1e-3
    assert fd_check(lambda t: T.cross_entropy_from_logits(t, soft), logits) < 1e-3


def test_backward_sum_gives_ones():
    x = T.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(x)
    T.backward(tape, loss)
    np.testing.assert_allclose(x.grad, np.ones((2, 3)))


def test_backward_half_square_gives_identity():
    x = T.Tensor(np.array([[1.0, -2.0], [0.5, 3.0]], dtype=np.float32), requires_grad=True)
    with T.Tape() as tape:
        loss = T.scale(T.sum_all(T.mul(x, x)), 0.5)
    T.backward(tape, loss)
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)


def test_backward_rejects_non_scalar_loss():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        T.backward(tape, y)


def test_double_backward_is_an_error():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(x)
    T.backward(tape, loss)
    with pytest.raises(TapeError):
        T.backward(tape, loss)


def test_backward_requires_loss_on_tape():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        T.sum_all(x)
    stray = T.Tensor(np.zeros(()))
    with pytest.raises(TapeError):
        T.backward(tape, stray)


def test_backward_is_additive():
    rng = np.random.default_rng(7)
    base = rng.normal(size=(3, 3)).astype(np.float32)

    def grad_of(fn):
        x = T.Tensor(base.copy(), requires_grad=True)
        with T.Tape() as tape:
            loss = fn(x)
        T.backward(tape, loss)
        return x.grad

    g_both = grad_of(lambda x: T.add(T.sum_all(T.mul(x, x)), T.sum_all(x)))
    g_sep = grad_of(lambda x: T.sum_all(T.mul(x, x))) + grad_of(lambda x: T.sum_all(x))
    np.testing.assert_allclose(g_both, g_sep, atol=1e-6)


def test_no_tape_means_no_grad():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    y = T.matmul(x, x)
    assert y.requires_grad is False
    assert x.grad is None


def test_fd_check_identity_sum():
    assert fd_check(lambda t: T.sum_all(t), np.ones(4)) < 1e-9


def test_fd_check_quadratic():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 3))
    assert fd_check(lambda t: T.sum_all(T.mul(t, t)), x, eps=1e-4) < 1e-6


def test_fd_check_softmax_ce_composite():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 5))
    tgt = np.array([0, 2, 4, 1])

    def f(t):
        return T.cross_entropy_from_logits(T.scale(t, 2.0), tgt)

    assert fd_check(f, x) < 1e-3


def test_fd_check_flags_nondeterministic_function():
    state = {"n": 0}

    def f(t):
        state["n"] += 1
        return T.scale(T.sum_all(t), float(state["n"]))

    with pytest.raises(ContractError):
        fd_check(f, np.ones(3))


def test_fd_check_eps_range():
    with pytest.raises(ParameterError):
        fd_check(lambda t: T.sum_all(t), np.ones(2), eps=1.0)


@pytest.mark.parametrize("shape", [(2, 3), (4, 4), (1, 7), (5, 2)])
def test_every_primitive_passes_gradient_check(shape):
    rng = np.random.default_rng(hash(shape) % 2**32)
    x = rng.normal(size=shape)
    w = rng.normal(size=shape)
    cases = {
        "add": lambda t: T.sum_all(T.add(t, T.Tensor(w, dtype=np.float64))),
        "add_bias": lambda t: T.sum_all(T.add(t, T.Tensor(w[0], dtype=np.float64))),
        "mul": lambda t: T.sum_all(T.mul(t, T.Tensor(w, dtype=np.float64))),
        "scale": lambda t: T.sum_all(T.scale(t, -1.7)),
        "transpose": lambda t: T.sum_all(T.mul(T.transpose(t), T.Tensor(w.T, dtype=np.float64))),
        "reshape": lambda t: T.sum_all(T.mul(T.reshape(t, (shape[1], shape[0])), T.Tensor(w.reshape(shape[1], shape[0]), dtype=np.float64))),
        "gelu": lambda t: T.sum_all(T.mul(T.gelu(t), T.Tensor(w, dtype=np.float64))),
        "softmax": lambda t: T.sum_all(T.mul(T.softmax_rows(t, 0.7), T.Tensor(w, dtype=np.float64))),
        "l2norm": lambda t: T.sum_all(T.mul(T.l2_normalize_rows(t), T.Tensor(w, dtype=np.float64))),
        "take_rows": lambda t: T.sum_all(T.take_rows(t, np.zeros(3, dtype=int))),
        "sum_rows": lambda t: T.sum_all(T.mul(T.sum_rows(t), T.Tensor(w[0], dtype=np.float64))),
        "log": lambda t: T.sum_all(T.log(T.add(T.mul(t, t), T.Tensor(np.ones(shape) * 0.5, dtype=np.float64)))),
        "concat": lambda t: T.sum_all(T.concat_rows([t, T.Tensor(w, dtype=np.float64)])),
    }
    for name, f in cases.items():
        err = fd_check(f, x)
        assert err < 1e-3, f"{name} gradient check failed on {shape}: {err}"


def test_assert_finite():
    T.assert_finite(T.Tensor(np.ones(3)), "ok")
    with pytest.raises(ContractError):
        T.assert_finite(T.Tensor(np.array([1.0, np.nan])), "bad")


def test_grad_buffer_shape_matches_values():
    x = T.Tensor(np.ones((2, 3)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(x)
    T.backward(tape, loss)
    assert x.grad.shape == x.data.shape
