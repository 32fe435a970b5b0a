import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcms.autodiff import ShapeError, Tensor, grad_check
from hcms.layers import LinearParams, LstmParams, LstmState, init_linear, init_lstm, linear_forward, lstm_step


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def zero_lstm(in_dim, H):
    return LstmParams(t64(np.zeros((4 * H, in_dim))), t64(np.zeros((4 * H, H))), t64(np.zeros(4 * H)))


def test_linear_identity_and_bias():
    p = LinearParams(t64(np.eye(2)), t64(np.zeros(2)))
    np.testing.assert_array_equal(linear_forward(p, t64([1.0, 2.0])).data, [1.0, 2.0])
    p = LinearParams(t64(np.zeros((1, 4))), t64([3.0]))
    np.testing.assert_array_equal(linear_forward(p, t64(np.random.default_rng(0).standard_normal(4))).data, [3.0])


def test_linear_against_hand_multiply():
    W = np.array([[0.5, -1.0], [2.0, 0.25], [-3.0, 1.5]])
    b = np.array([0.1, -0.2, 0.3])
    x = np.array([4.0, -2.0])
    expected = [0.5 * 4 + -1.0 * -2 + 0.1, 2.0 * 4 + 0.25 * -2 - 0.2, -3.0 * 4 + 1.5 * -2 + 0.3]
    out = linear_forward(LinearParams(t64(W), t64(b)), t64(x)).data
    np.testing.assert_array_equal(out, expected)


def test_linear_rejects_wrong_length():
    with pytest.raises(ShapeError):
        linear_forward(init_linear(3, 2, 0), Tensor(np.zeros(4, dtype=np.float32)))


def test_zero_cell_zero_state():
    s = lstm_step(zero_lstm(2, 1), t64([0.7, -1.0]), LstmState(t64([0.0]), t64([0.0])))
    assert s.h.data[0] == 0.0 and s.c.data[0] == 0.0


def test_zero_cell_with_memory():
    # all gates 0.5, candidate 0: c' = 0.5 * 2 = 1, h' = 0.5 * tanh(1)
    s = lstm_step(zero_lstm(2, 1), t64([0.7, -1.0]), LstmState(t64([0.0]), t64([2.0])))
    assert s.c.data[0] == 1.0
    assert s.h.data[0] == pytest.approx(0.380797, abs=1e-6)


def scalar_lstm(w_ih, w_hh, b, x, h, c):
    """Unit-by-unit transcript of the LSTM equations with plain floats."""
    H = len(h)
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    pre = []
    for r in range(4 * H):
        v = b[r]
        for j in range(len(x)):
            v += w_ih[r][j] * x[j]
        for j in range(H):
            v += w_hh[r][j] * h[j]
        pre.append(v)
    h2, c2 = [], []
    for u in range(H):
        i, f, g, o = sig(pre[u]), sig(pre[H + u]), math.tanh(pre[2 * H + u]), sig(pre[3 * H + u])
        c2.append(f * c[u] + i * g)
        h2.append(o * math.tanh(c2[-1]))
    return h2, c2


def test_random_cell_against_scalar_transcript():
    rng = np.random.default_rng(11)
    H, n = 4, 3
    w_ih, w_hh, b = rng.standard_normal((4 * H, n)), rng.standard_normal((4 * H, H)), rng.standard_normal(4 * H)
    x, h, c = rng.standard_normal(n), rng.standard_normal(H) * 0.5, rng.standard_normal(H)
    s = lstm_step(LstmParams(t64(w_ih), t64(w_hh), t64(b)), t64(x), LstmState(t64(h), t64(c)))
    h2, c2 = scalar_lstm(w_ih.tolist(), w_hh.tolist(), b.tolist(), x.tolist(), h.tolist(), c.tolist())
    np.testing.assert_allclose(s.h.data, h2, atol=1e-6)
    np.testing.assert_allclose(s.c.data, c2, atol=1e-6)


def test_batch_step_matches_rows():
    p = init_lstm(3, 5, seed=2)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4, 3)).astype(np.float32)
    S = LstmState(Tensor(rng.standard_normal((4, 5)).astype(np.float32)), Tensor(rng.standard_normal((4, 5)).astype(np.float32)))
    out = lstm_step(p, Tensor(X), S)
    for r in range(4):
        row = lstm_step(p, Tensor(X[r]), LstmState(Tensor(S.h.data[r]), Tensor(S.c.data[r])))
        np.testing.assert_allclose(out.h.data[r], row.h.data, rtol=1e-6, atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 20.0))
def test_hidden_strictly_inside_unit_interval(seed, spread):
    rng = np.random.default_rng(seed)
    H, n = 3, 2
    p = LstmParams(t64(rng.standard_normal((4 * H, n)) * spread), t64(rng.standard_normal((4 * H, H))), t64(rng.standard_normal(4 * H)))
    s = lstm_step(p, t64(rng.standard_normal(n)), LstmState(t64(rng.uniform(-1, 1, H)), t64(rng.standard_normal(H))))
    assert np.all(np.abs(s.h.data) < 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_saturated_forget_keeps_cell(seed):
    rng = np.random.default_rng(seed)
    H, n = 3, 2
    b = np.zeros(4 * H)
    b[:H] = -1e4  # input gate 0
    b[H : 2 * H] = 1e4  # forget gate 1
    p = LstmParams(t64(rng.standard_normal((4 * H, n))), t64(rng.standard_normal((4 * H, H))), t64(b))
    c = rng.standard_normal(H)
    s = lstm_step(p, t64(rng.standard_normal(n)), LstmState(t64(rng.uniform(-1, 1, H)), t64(c)))
    np.testing.assert_array_equal(s.c.data, c)


def test_lstm_gradients():
    rng = np.random.default_rng(4)
    H, n = 3, 2
    point = [rng.standard_normal((4 * H, n)), rng.standard_normal((4 * H, H)), rng.standard_normal(4 * H)]
    x, h, c = t64(rng.standard_normal(n)), t64(rng.standard_normal(H)), t64(rng.standard_normal(H))
    w = t64(rng.standard_normal(H))

    def fn(w_ih, w_hh, b):
        from hcms.autodiff import add, mul, sum_

        s = lstm_step(LstmParams(w_ih, w_hh, b), x, LstmState(h, c))
        return sum_(add(mul(s.h, w), s.c))

    assert grad_check(fn, point) < 1e-4


def test_init_determinism_and_range():
    a, b = init_linear(100, 7, seed=3), init_linear(100, 7, seed=3)
    assert a.weight.data.tobytes() == b.weight.data.tobytes()
    assert np.all(np.abs(a.weight.data) <= 0.1) and np.all(np.abs(a.bias.data) <= 0.1)
    p, q = init_lstm(100, 6, seed=9), init_lstm(100, 6, seed=9)
    for u, v in zip(p.tensors().values(), q.tensors().values()):
        assert u.data.tobytes() == v.data.tobytes()
    assert np.all(np.abs(p.w_ih.data) <= 0.1)


def test_forget_bias_block_is_one():
    p = init_lstm(5, 4, seed=0)
    np.testing.assert_array_equal(p.bias.data[4:8], 1.0)
    np.testing.assert_array_equal(p.bias.data[:4], 0.0)
    np.testing.assert_array_equal(p.bias.data[8:], 0.0)


def test_bad_dims():
    with pytest.raises(ValueError):
        init_lstm(0, 3)
    with pytest.raises(ShapeError):
        lstm_step(init_lstm(3, 2, 0), Tensor(np.zeros(4, dtype=np.float32)), LstmState.zeros(2))
