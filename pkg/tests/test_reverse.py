import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from biflow import numerics as nx
from biflow.data import make_dataset
from biflow.flow import FlowConfig, ForwardModel
from biflow.inverse import EvalCounter
from biflow.numerics import Linear, Rng, Tensor
from biflow.reverse import (LossConfig, ReverseConfig, ReverseModel, ReverseTrainConfig, TrajectoryStats,
                            adaptive_weight, distance, guided_block, hidden_align_loss, hidden_distill_loss,
                            naive_loss, register_metric, reverse_pass, sample_reverse, train_reverse,
                            trajectory_normalize, training_pass, unguided_recovery, weighted)

from conftest import central_diff, random_flow, rel_err


def rev_model(strategy="hidden_align", tokens=3, token_dim=2, blocks=3, dtype=np.float32, seed=0, **kw):
    cfg = ReverseConfig.for_strategy(strategy, tokens=tokens, token_dim=token_dim, blocks=blocks,
                                     width=16, num_classes=2, **kw)
    return ReverseModel(cfg, Rng(seed), dtype)


# -- architecture --------------------------------------------------------------------

def test_layouts():
    m = rev_model("hidden_align")
    assert [m.state_dim(j) for j in range(4)] == [2, 16, 16, 2]
    assert len(m.heads) == 2 and m.head(0)(Tensor(np.ones((1, 3, 2)))).data.tolist() == np.ones((1, 3, 2)).tolist()
    d = rev_model("hidden_distill")
    assert [d.state_dim(j) for j in range(4)] == [2, 2, 2, 2]
    assert all(b.residual for b in d.blocks)
    assert not hasattr(rev_model("naive"), "heads")
    with pytest.raises(ValueError):
        ReverseConfig.for_strategy("telepathy", tokens=2, token_dim=1, blocks=1)
    with pytest.raises(ValueError):
        ReverseConfig(tokens=0, token_dim=1, blocks=1)


@pytest.mark.parametrize("denoise", [True, False])
def test_one_pass_block_count(denoise):
    m = rev_model(denoise=denoise)
    c = EvalCounter()
    z = Rng(0).normal((4, 3, 2), dtype=np.float32)
    traj = reverse_pass(z, 1, 0.5, 1.0, m, c)
    assert c.block_calls == m.num_block_evals == 3 + int(denoise)
    assert traj.x_prime.shape == (4, 3, 2)
    assert [h.shape[-1] for h in traj.hiddens] == [2, 16, 16]


def test_sample_reverse():
    m = rev_model()
    assert sample_reverse(m, 0, 0, Rng(0)).shape == (0, 3, 2)
    a = sample_reverse(m, 5, [0, 1, 0, 1, 2], Rng(1), w=1.0)
    assert np.array_equal(a, sample_reverse(m, 5, [0, 1, 0, 1, 2], Rng(1), w=1.0))
    with pytest.raises(ValueError):
        sample_reverse(m, 2, 5, Rng(0))


# -- guidance algebra ---------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (4, 3), elements=finite),
       st.floats(0, 20))
def test_unguided_recovery_inverts_guided_block(cond, uncond, w):
    # the unconditional branch is itself guided output; with null label its guided value equals uncond
    g = guided_block(cond, uncond, w)
    rec = unguided_recovery(g, uncond, w)
    scale = max(1.0, np.max(np.abs(cond)), np.max(np.abs(uncond))) * (1 + w)
    assert np.max(np.abs(rec - cond)) <= 1e-12 * scale


def test_guided_block_stops_gradient():
    c = Tensor(np.ones(3), requires_grad=True)
    u = Tensor(np.full(3, 2.0), requires_grad=True)
    out = guided_block(c, u, 1.5)
    with pytest.warns(nx.UnreachedInputWarning):
        gc, gu = nx.grad(nx.tsum(out), [c, u])
    np.testing.assert_allclose(gc, 2.5)
    assert np.all(gu == 0)


def test_training_pass_at_zero_scale_equals_reverse_pass():
    m = rev_model(dtype=np.float64)
    z = Rng(0).normal((4, 3, 2), dtype=np.float64)
    lab = np.array([0, 1, 2, 0])
    zero = np.zeros(4)
    a = training_pass(Tensor(z), lab, zero, zero, m)
    b = reverse_pass(z, lab, zero, zero, m)
    assert np.array_equal(a.x_prime.data, b.x_prime.data)


def test_training_pass_recovers_conditional_output():
    """With trained-in guidance tokens, the recovered output of each block is
    (G(h|c,w) + w G(h|0,w)) / (1 + w)."""
    m = rev_model(blocks=1, dtype=np.float64, denoise=False)
    z = Rng(0).normal((3, 3, 2), dtype=np.float64)
    lab = np.array([0, 1, 2])
    w = np.array([0.5, 2.0, 1.0])
    out = training_pass(Tensor(z), lab, w, np.zeros(3), m).x_prime.data
    with nx.no_grad():
        c = m.blocks[0](Tensor(z), m.cond_tokens(lab, w, np.zeros(3))).data
        u = m.blocks[0](Tensor(z), m.cond_tokens(np.full(3, 2), w, np.zeros(3))).data
    expect = (c + w[:, None, None] * u) / (1 + w[:, None, None])
    np.testing.assert_allclose(out, expect, rtol=1e-12, atol=1e-14)
    # rows whose label is already null are returned unchanged
    np.testing.assert_allclose(out[2], c[2], rtol=1e-12, atol=1e-14)


# -- losses ---------------------------------------------------------------------------

def test_distance_metrics():
    a = Tensor(np.ones((2, 3, 2)))
    b = Tensor(np.zeros((2, 3, 2)))
    assert distance(a, b).data.tolist() == [1.0, 1.0]
    assert distance(a, b, "sse").data.tolist() == [6.0, 6.0]
    with pytest.raises(ValueError):
        distance(a, b, "wasserstein")
    with pytest.raises(ValueError):
        distance(a, Tensor(np.zeros((2, 3))))
    register_metric("l1", lambda x, y: nx.tsum(nx.sqrt(nx.square(x - y) + 1e-12), axis=(1, 2)))
    np.testing.assert_allclose(distance(a, b, "l1").data, 6.0, rtol=1e-6)


def test_loss_reductions():
    rng = Rng(0)
    states = [rng.normal((4, 3, 2), dtype=np.float64) for _ in range(3)]
    hiddens = [Tensor(rng.normal((4, 3, 2), dtype=np.float64)) for _ in range(3)]
    identity = [None] + [lambda h: h] * 2
    assert hidden_align_loss(states, hiddens, identity).data == hidden_distill_loss(states, hiddens).data
    assert hidden_distill_loss(states[:1], hiddens[:1]).data == naive_loss(states[0], hiddens[0]).data
    assert hidden_align_loss(states, [Tensor(s) for s in states], identity).data == 0.0
    with pytest.raises(ValueError):
        hidden_align_loss(states, hiddens, [lambda h: h] * 3)
    with pytest.raises(ValueError):
        hidden_distill_loss(states, hiddens[:2])
    bad = [None, lambda h: h[..., :1], lambda h: h]
    with pytest.raises(ValueError):
        hidden_align_loss(states, hiddens, bad)


def test_adaptive_weight_examples():
    assert adaptive_weight(np.array([0.7]), 1e-3, 0.0)[0] == 1.0
    assert adaptive_weight(np.array([0.0]), 1e-3, 2.0)[0] == pytest.approx(1e6)
    assert adaptive_weight(np.array([0.5]), 1e-3, 1.0)[0] == pytest.approx(1.996007984031936, rel=1e-12)
    with pytest.raises(ValueError):
        adaptive_weight(np.array([-0.1]))
    with pytest.raises(ValueError):
        adaptive_weight(np.array([0.1]), c_hat=0.0)


def test_adaptive_weight_is_stop_gradient():
    x = Tensor(Rng(0).normal((5, 2), dtype=np.float64), requires_grad=True)
    d = nx.tsum(nx.square(x), axis=1)
    (g,) = nx.grad(weighted(d, 1e-3, 2.0), [x])
    w = adaptive_weight(d.data, 1e-3, 2.0)
    np.testing.assert_allclose(g, w[:, None] * 2 * x.data / 5, rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_hidden_align_gradient_wrt_head(seed):
    rng = Rng(seed)
    heads = [None, Linear(4, 2, rng, np.float64)]
    states = [rng.normal((3, 2, 2), dtype=np.float64) for _ in range(2)]
    hiddens = [Tensor(rng.normal((3, 2, 2), dtype=np.float64)), Tensor(rng.normal((3, 2, 4), dtype=np.float64))]
    w = heads[1].weight

    def f(wv):
        old = w.data
        w.data = wv
        with nx.no_grad():
            v = float(hidden_align_loss(states, hiddens, heads).data)
        w.data = old
        return v

    (ad,) = nx.grad(hidden_align_loss(states, hiddens, heads), [w])
    (fd,) = central_diff(f, [w.data.copy()], eps=1e-6)
    assert rel_err(ad, fd) < 1e-5


# -- trajectory normalisation -------------------------------------------------------

def test_trajectory_stats():
    rng = Rng(0)
    states = [rng.normal((100, 3, 2), dtype=np.float64) * s for s in (0.5, 2.0, 7.0)]
    assert all(np.array_equal(a, b) for a, b in zip(trajectory_normalize(states, TrajectoryStats.ones(3)), states))
    stats = TrajectoryStats.from_states(states)
    normed = trajectory_normalize(states, stats)
    np.testing.assert_allclose(TrajectoryStats.from_states(normed).mean_sq, 1.0, rtol=1e-12)
    again = trajectory_normalize(normed, TrajectoryStats.from_states(normed))
    for a, b in zip(again, normed):
        np.testing.assert_allclose(a, b, rtol=1e-12)
    with pytest.raises(ValueError):
        TrajectoryStats([1.0, 0.0])
    with pytest.raises(ValueError):
        trajectory_normalize(states, TrajectoryStats.ones(2))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(strategy="x")
    with pytest.raises(ValueError):
        LossConfig(trajectory_norm="x")
    with pytest.raises(ValueError):
        LossConfig(p=-1)


# -- training -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def setup():
    ds = make_dataset("two_moons", 512, Rng(0))
    fwd = random_flow(1, tokens=2, token_dim=1, blocks=2, dtype=np.float32, num_classes=2, width=8)
    return ds, fwd


@pytest.mark.parametrize("strategy", ["naive", "hidden_distill", "hidden_align"])
def test_train_reverse_log_and_frozen_forward(setup, strategy, tmp_path):
    ds, fwd = setup
    before = {k: v.copy() for k, v in fwd.state_dict().items()}
    rev = rev_model(strategy, tokens=2, token_dim=1, blocks=2)
    path = tmp_path / "rev.csv"
    res = train_reverse(ds.samples, ds.labels, fwd, rev, LossConfig(strategy=strategy),
                        ReverseTrainConfig(steps=6, batch=64, log_every=3, w_max=2.0, wd_max=1.0),
                        Rng(2), eval_data=(ds.samples[:64], ds.labels[:64]), log_path=str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == ("step,loss_total,loss_align_0,loss_align_1,loss_recon,w_mean,wd_mean,"
                        "recon_mse_eval")
    assert len(lines) == 3 and res.steps == 6
    for k, v in fwd.state_dict().items():
        assert np.array_equal(v, before[k])
    if strategy == "naive":
        assert res.log[-1]["loss_align_0"] == 0.0


def test_train_reverse_deterministic(setup):
    ds, fwd = setup
    outs = []
    for _ in range(2):
        res = train_reverse(ds.samples, ds.labels, fwd, rev_model(tokens=2, token_dim=1, blocks=2),
                            LossConfig(), ReverseTrainConfig(steps=4, batch=32, w_max=1.0), Rng(5))
        outs.append(res.model.state_dict())
    for k in outs[0]:
        assert np.array_equal(outs[0][k], outs[1][k])


def test_train_reverse_rejects_block_mismatch(setup):
    ds, fwd = setup
    with pytest.raises(ValueError):
        train_reverse(ds.samples, ds.labels, fwd, rev_model(tokens=2, token_dim=1, blocks=3),
                      LossConfig(), ReverseTrainConfig(steps=1), Rng(0))
