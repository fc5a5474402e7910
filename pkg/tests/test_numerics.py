import zlib
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biflow import numerics as nx
from biflow.numerics import Tensor

from conftest import central_diff, rel_err

F64 = np.float64


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad)


def check_op(fn, arrays, tol=1e-6):
    """Autodiff gradient of sum(fn(...) * probe) vs central differences."""
    probe_rng = np.random.default_rng(len(arrays))
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    probe = probe_rng.standard_normal(out_shape)

    def scalar(*arrs):
        with nx.no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * probe))

    ts = [t64(a) for a in arrays]
    loss = nx.tsum(fn(*ts) * Tensor(probe))
    ad = nx.grad(loss, ts)
    fd = central_diff(scalar, [a.copy() for a in arrays])
    return max(rel_err(x, y) for x, y in zip(ad, fd))


def away_from(x, points, margin=1e-2):
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.sign(x - p + 1e-12) * margin * 2, x)
    return x


def _rand(rng, shape, low=-2.0, high=2.0):
    return rng.uniform(low, high, size=shape)


PRIMITIVES = {
    "add": (lambda a, b: a + b, lambda r: [_rand(r, (3, 4)), _rand(r, (4,))]),
    "sub": (lambda a, b: a - b, lambda r: [_rand(r, (2, 3)), _rand(r, (2, 1))]),
    "mul": (lambda a, b: a * b, lambda r: [_rand(r, (3, 2)), _rand(r, (3, 2))]),
    "div": (lambda a, b: a / b, lambda r: [_rand(r, (4,)), _rand(r, (4,), 0.5, 2.0)]),
    "neg": (lambda a: -a, lambda r: [_rand(r, (5,))]),
    "power": (lambda a: a ** 3, lambda r: [_rand(r, (5,))]),
    "square": (lambda a: nx.square(a), lambda r: [_rand(r, (2, 3))]),
    "exp": (lambda a: nx.exp(a), lambda r: [_rand(r, (2, 3))]),
    "log": (lambda a: nx.log(a), lambda r: [_rand(r, (2, 3), 0.3, 3.0)]),
    "sqrt": (lambda a: nx.sqrt(a), lambda r: [_rand(r, (2, 3), 0.3, 3.0)]),
    "tanh": (lambda a: nx.tanh(a), lambda r: [_rand(r, (6,))]),
    "sigmoid": (lambda a: nx.sigmoid(a), lambda r: [_rand(r, (6,))]),
    "silu": (lambda a: nx.silu(a), lambda r: [_rand(r, (6,))]),
    "relu": (lambda a: nx.relu(a), lambda r: [away_from(_rand(r, (6,)), [0.0])]),
    "clamp": (lambda a: nx.clamp(a, -1.0, 1.0), lambda r: [away_from(_rand(r, (6,)), [-1.0, 1.0])]),
    "sum_axis": (lambda a: nx.tsum(a, axis=1), lambda r: [_rand(r, (2, 3, 2))]),
    "sum_keep": (lambda a: nx.tsum(a, axis=-1, keepdims=True), lambda r: [_rand(r, (3, 4))]),
    "mean": (lambda a: nx.mean(a, axis=0), lambda r: [_rand(r, (4, 3))]),
    "reshape": (lambda a: a.reshape(3, 4) * a.reshape(3, 4), lambda r: [_rand(r, (2, 6))]),
    "transpose": (lambda a: a.transpose(2, 0, 1), lambda r: [_rand(r, (2, 3, 4))]),
    "getitem_slice": (lambda a: a[:, ::-1] * a[:, 1:2], lambda r: [_rand(r, (3, 4))]),
    "getitem_fancy": (lambda a: a[np.array([0, 2, 2, 1])], lambda r: [_rand(r, (3, 2))]),
    "flip": (lambda a: nx.flip(a, 1) * a, lambda r: [_rand(r, (2, 5))]),
    "concat": (lambda a, b: nx.concat([a, b], axis=1), lambda r: [_rand(r, (2, 3)), _rand(r, (2, 2))]),
    "stack": (lambda a, b: nx.stack([a, b], axis=0) * 2.0, lambda r: [_rand(r, (3,)), _rand(r, (3,))]),
    "where": (lambda a, b: nx.where(np.array([True, False, True]), a, b),
              lambda r: [_rand(r, (2, 3)), _rand(r, (2, 3))]),
    "matmul": (lambda a, b: a @ b, lambda r: [_rand(r, (2, 3, 4)), _rand(r, (4, 2))]),
    "softmax": (lambda a: nx.softmax(a, axis=-1), lambda r: [_rand(r, (3, 4))]),
    "causal_attention": (lambda q, k, v: nx.causal_attention(q, k, v),
                         lambda r: [_rand(r, (4, 3)), _rand(r, (4, 3)), _rand(r, (4, 3))]),
    "bidirectional_attention": (lambda q, k, v: nx.attention(q, k, v, causal=False),
                                lambda r: [_rand(r, (2, 3, 2)), _rand(r, (2, 5, 2)),
                                           _rand(r, (2, 5, 2))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_central_differences(name):
    fn, gen = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(check_op(fn, gen(rng)) for _ in range(100))
    assert worst < 1e-6, f"{name}: worst relative error {worst:.2e}"


def test_grad_of_square_and_exp_trivial():
    x = t64(3.0)
    assert nx.grad(x * x, [x])[0] == pytest.approx(6.0)
    y = t64(0.0)
    assert nx.grad(nx.exp(y), [y])[0] == pytest.approx(1.0)


def test_random_composite_graph_matches_finite_differences(np_rng):
    for _ in range(20):
        a, b = np_rng.standard_normal((3, 2)), np_rng.standard_normal((2, 3))

        def f(x, y):
            return nx.tsum(nx.tanh(x @ y) * nx.exp(x.mean(axis=1, keepdims=True)) - nx.square(y).sum())

        assert check_op(f, [a, b]) < 1e-6


def test_grad_rejects_non_scalar_loss():
    x = t64(np.ones(3))
    with pytest.raises(ValueError):
        nx.grad(x * 2.0, [x])


def test_unreached_input_gets_zero_gradient_and_warning():
    x, y = t64(np.ones(2)), t64(np.ones(3))
    with pytest.warns(nx.UnreachedInputWarning):
        gx, gy = nx.grad(nx.tsum(x * x), [x, y])
    assert np.array_equal(gy, np.zeros(3))
    assert np.allclose(gx, 2.0)


def test_detach_blocks_gradient():
    x = t64(np.array([1.0, 2.0]))
    loss = nx.tsum(x * x.detach())
    assert np.allclose(nx.grad(loss, [x])[0], [1.0, 2.0])


def test_tape_is_freed_after_sweep():
    x = t64(np.ones(2))
    h = x * 2.0
    loss = nx.tsum(h)
    nx.grad(loss, [x])
    assert h._parents == () and loss._parents == ()


def test_backward_accumulates_into_leaves():
    w = t64(np.array([1.0, -1.0]))
    nx.tsum(w * w).backward()
    nx.tsum(w * 3.0).backward()
    assert np.allclose(w.grad, [2.0 + 3.0, -2.0 + 3.0])


def test_float32_default_and_float64_selectable():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.array([1.0]), dtype=np.float64).dtype == np.float64
    a = Tensor(np.ones(2, dtype=np.float32))
    assert (a * 2.5).dtype == np.float32


# -- rng ------------------------------------------------------------------------

def test_gaussian_same_seed_identical():
    a = nx.gaussian(nx.Rng(7), (100,))
    b = nx.gaussian(nx.Rng(7), (100,))
    assert np.array_equal(a.data, b.data)


def test_gaussian_moments_at_1e5():
    x = nx.gaussian(nx.Rng(11), (100_000,), dtype=np.float64).data
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.02


def test_gaussian_empty_shape():
    assert nx.gaussian(nx.Rng(0), (0,)).shape == (0,)


def test_split_streams_are_reproducible_and_distinct():
    r1, r2 = nx.Rng(3), nx.Rng(3)
    c1, c2 = r1.split(), r2.split()
    assert np.array_equal(c1.normal((5,)), c2.normal((5,)))
    assert not np.array_equal(nx.Rng(3).normal((5,)), nx.Rng(3).split().normal((5,)))


def test_rng_state_roundtrip():
    r = nx.Rng(5)
    r.normal((3,))
    st_ = r.get_state()
    a = r.normal((4,))
    r.set_state(st_)
    assert np.array_equal(a, r.normal((4,)))


# -- attention ------------------------------------------------------------------

def test_attention_single_token_returns_v():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.standard_normal((1, 4))) for _ in range(3))
    assert np.allclose(nx.causal_attention(q, k, v).data, v.data)


def test_attention_uniform_logits_average_prefix():
    q = Tensor(np.zeros((3, 2)))
    k = Tensor(np.zeros((3, 2)))
    v = Tensor(np.array([[1.0, 0.0], [3.0, 6.0], [5.0, 3.0]]))
    out = nx.causal_attention(q, k, v).data
    assert np.allclose(out[2], [3.0, 3.0])
    assert np.allclose(out[1], [2.0, 3.0])


def test_attention_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        nx.causal_attention(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ValueError):
        nx.causal_attention(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))))


def test_attention_future_value_perturbation_leaves_past_unchanged():
    rng = np.random.default_rng(1)
    q, k, v = (rng.standard_normal((6, 3)) for _ in range(3))
    base = nx.causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    v2 = v.copy()
    v2[4] += 10.0
    out = nx.causal_attention(Tensor(q), Tensor(k), Tensor(v2)).data
    assert np.array_equal(out[:4], base[:4])
    assert not np.allclose(out[4], base[4])


@pytest.mark.parametrize("T", [1, 2, 5, 9, 16])
def test_attention_jacobian_zero_for_future_positions(T):
    rng = np.random.default_rng(T)
    q, k, v = (t64(rng.standard_normal((T, 3))) for _ in range(3))
    out = nx.causal_attention(q, k, v)
    for t in range(T):
        loss = nx.tsum(out[t])
        gq, gk, gv = nx.grad(loss, [q, k, v], retain_graph=True)
        for g in (gq, gk, gv):
            assert np.all(g[t + 1:] == 0.0)


# -- adam -----------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    st_ = nx.adam_init(p)
    new, _, applied = nx.adam_step(p, [np.zeros(2)], st_, lr=0.1)
    assert applied and np.array_equal(new[0], p[0])


def test_adam_first_step_is_signed_lr():
    p = [np.array([0.5, 0.5, 0.5])]
    g = [np.array([3.0, -0.2, 1e-3])]
    new, st_, _ = nx.adam_step(p, g, nx.adam_init(p), lr=0.01, betas=(0.9, 0.95))
    step = new[0] - p[0]
    expected = -0.01 * g[0] / (np.abs(g[0]) + 1e-8)
    assert np.allclose(step, expected, rtol=1e-12, atol=0)
    assert st_.step == 1


def test_adam_lr_zero_keeps_params():
    p = [np.array([1.0, 2.0])]
    new, _, _ = nx.adam_step(p, [np.array([0.3, -4.0])], nx.adam_init(p), lr=0.0)
    assert np.array_equal(new[0], p[0])


def test_adam_skips_non_finite():
    p = [np.array([1.0])]
    st_ = nx.adam_init(p)
    new, st2, applied = nx.adam_step(p, [np.array([np.nan])], st_, lr=0.1)
    assert not applied and st2.skipped == 1 and np.array_equal(new[0], p[0])


def test_adam_matches_reference_sequence():
    """Three steps against a hand-rolled transcription of the update rule."""
    p = np.array([0.3, -0.7])
    grads = [np.array([0.1, 0.2]), np.array([-0.3, 0.05]), np.array([0.2, -0.1])]
    st_ = nx.adam_init([p])
    cur = [p]
    m = v = np.zeros(2)
    ref = p.copy()
    for t, g in enumerate(grads, start=1):
        cur, st_, _ = nx.adam_step(cur, [g], st_, lr=1e-2, betas=(0.9, 0.95))
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        ref = ref - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
    assert np.allclose(cur[0], ref, rtol=0, atol=1e-15)


def test_ema_decay_zero_tracks_params():
    ema = nx.EMA.of({"w": np.zeros(2)}, decay=0.0)
    ema.update({"w": np.array([1.0, 2.0])})
    assert np.array_equal(ema.shadow["w"], [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_clamp_bounds_property(vals):
    out = nx.clamp(Tensor(np.array(vals)), -1.0, 1.0).data
    assert np.all(out <= 1.0) and np.all(out >= -1.0)


def test_row_invariant_matmul_is_batch_size_independent():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((64, 64)).astype(np.float32))
    x = rng.standard_normal((200, 64)).astype(np.float32)
    with nx.row_invariant():
        full = (Tensor(x) @ w).data
        for m in (1, 3, 17):
            assert np.array_equal((Tensor(x[:m]) @ w).data, full[:m])
