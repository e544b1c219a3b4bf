"""Acceptance suite: one test per release criterion, one PASS line each.

Run with `pytest tests/test_acceptance.py -v -s`. The two learning
criteria train real agents on Catch and dominate the runtime; everything
else finishes in seconds.
"""

import time

import numpy as np
import pytest
from scipy import stats

from qforge.agent import (
    AdamW,
    AgentConfig,
    LossSelector,
    TrainState,
    compute_loss,
    decay_epsilon,
    td_target,
    train,
)
from qforge.cli import main
from qforge.envs import CatchEnv, make_env
from qforge.errors import NotReadyError
from qforge.gradcheck import check_gradients
from qforge.layers import (
    AttentionPooling,
    GatedEncoder,
    GatedTXLLayer,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    PositionalEmbedding,
)
from qforge.models import ModelConfig, build_model
from qforge.replay import SequenceReplayBuffer, Transition, UniformReplayBuffer
from qforge.tensor import Tensor


def ok(criterion, detail=""):
    print(f"\ncriterion {criterion}: PASS {detail}".rstrip())


def tiny_model_cfg(variant):
    base = dict(
        variant=variant,
        frames=2,
        actions=3,
        input_hw=(12, 12),
        conv=((4, 3, 2), (6, 3, 1)),
        fc=(8, 8, 8) if variant == "dtqn_vit" else (8, 8),
        patch=4,
        embed=8,
        depth=2,
        heads=2,
        ff_dim=16,
    )
    return ModelConfig(**base)


# 1. Gradient integrity ----------------------------------------------------------------


def test_c01_gradient_integrity():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    worst = {}

    lin = Linear(5, 3, rng)
    x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    worst["linear"] = check_gradients(
        lambda: (lin(x) ** 2).sum(), [("x", x)] + lin.parameters(), rng
    )

    ln = LayerNorm(6)
    x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    worst["layer_norm"] = check_gradients(
        lambda: (ln(x) ** 2).sum(), [("x", x)] + ln.parameters(), rng
    )

    mha = MultiHeadAttention(8, 2, rng)
    x = Tensor(rng.standard_normal((2, 4, 8)), requires_grad=True)
    coeffs = Tensor(rng.standard_normal((2, 4, 8)))
    worst["attention"] = check_gradients(
        lambda: (mha(x) * coeffs).sum(), [("x", x)] + mha.parameters(), rng,
        max_per_param=4,
    )

    gtl = GatedTXLLayer(8, 2, 16, rng)
    x = Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)
    worst["gated_layer"] = check_gradients(
        lambda: (gtl(x) ** 2).sum(), [("x", x)] + gtl.parameters(), rng,
        max_per_param=4,
    )

    enc = GatedEncoder([GatedTXLLayer(8, 2, 16, rng) for _ in range(2)])
    x = Tensor(rng.standard_normal((1, 3, 8)), requires_grad=True)
    worst["encoder_2_layers"] = check_gradients(
        lambda: (enc(x) ** 2).sum(),
        [("x", x)] + [p for layer in enc.layers for p in layer.parameters()],
        rng,
        max_per_param=3,
    )

    pool = AttentionPooling(6, rng)
    x = Tensor(rng.standard_normal((2, 4, 6)), requires_grad=True)
    worst["attention_pooling"] = check_gradients(
        lambda: (pool(x) ** 2).sum(), [("x", x)] + pool.parameters(), rng
    )

    pe = PositionalEmbedding(6, 4, rng)
    x = Tensor(rng.standard_normal((2, 6, 4)), requires_grad=True)
    worst["positional"] = check_gradients(
        lambda: (pe(x) ** 2).sum(), [("x", x)] + pe.parameters(), rng
    )

    for variant in ("dcqn", "dtqn_vit", "dtqn_proj", "conv_transformer"):
        model = build_model(tiny_model_cfg(variant), rng)
        xin = rng.standard_normal((2, 2, 12, 12))
        worst[variant] = check_gradients(
            lambda: model.q_values(xin, training=variant == "dcqn").sum(),
            model.parameters(),
            rng,
            max_per_param=3,
        )

    elapsed = time.monotonic() - t0
    for name, err in worst.items():
        assert err < 1e-4, f"{name}: relative error {err:.3e} >= 1e-4"
    assert elapsed < 120.0
    ok(1, f"(worst rel err {max(worst.values()):.2e} over {len(worst)} checks, "
          f"{elapsed:.1f}s)")


# 2. Architecture shape suite ------------------------------------------------------------


def test_c02_architecture_shapes():
    rng = np.random.default_rng(1)
    cases = 0
    for variant in ("dcqn", "dtqn_vit", "dtqn_proj", "conv_transformer"):
        for batch, frames, actions in ((1, 1, 2), (2, 3, 4), (4, 4, 6)):
            cfg = ModelConfig(
                variant=variant, frames=frames, actions=actions,
                conv=((8, 8, 4), (16, 4, 2)), fc=(32, 16, 8), patch=16,
                embed=16, depth=1, heads=2, ff_dim=32,
            )
            model = build_model(cfg, rng)
            x = rng.standard_normal((batch, frames, 84, 84))
            q = model.q_values(x, training=(variant == "dcqn" and batch > 1))
            assert q.shape == (batch, actions)
            cases += 1
    for frames, patch in ((1, 16), (2, 16), (4, 16), (3, 12)):
        cfg = ModelConfig(
            variant="dtqn_vit", frames=frames, actions=3, patch=patch,
            embed=16, depth=1, heads=2, ff_dim=32, fc=(16, 16, 16),
        )
        model = build_model(cfg, np.random.default_rng(2))
        assert model.seq_len == frames * (84 // patch) ** 2
        if patch == 16:
            assert model.seq_len == 25 * frames
        cases += 1
    ok(2, f"({cases} shape cases)")


# 3. Gated layer fidelity -----------------------------------------------------------------


def test_c03_gated_layer_zero_gate_oracle():
    rng = np.random.default_rng(3)
    layers = [GatedTXLLayer(6, 2, 12, rng, dropout=0.0) for _ in range(2)]
    for layer in layers:
        for _, p in layer.gate1.parameters() + layer.gate2.parameters():
            p.data = np.zeros_like(p.data)
    enc = GatedEncoder(layers)
    x = np.random.default_rng(4).standard_normal((2, 4, 6))
    # manual step-through: sigmoid(0) = 0.5 added after each sublayer, so
    # each layer reduces to LayerNorm(input + 0.5 + 0.5) with unit gain
    h = x
    for _ in range(2):
        z = h + 1.0
        mu = z.mean(axis=-1, keepdims=True)
        h = (z - mu) / np.sqrt(z.var(axis=-1, keepdims=True) + 1e-5)
    err = np.abs(enc(Tensor(x)).data - h).max()
    assert err <= 1e-12
    ok(3, f"(max abs err {err:.2e})")


# 4. Optimizer oracle ------------------------------------------------------------------------


def test_c04_adamw_three_step_trace():
    lr, wd, b1, b2, eps = 0.1, 0.04, 0.9, 0.999, 1e-8
    grads = [0.3, -0.2, 0.5]
    # hand-computed trace, scalar arithmetic only
    theta, m, v = 1.0, 0.0, 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * (mhat / (vhat**0.5 + eps) + wd * theta)
        trace.append(theta)

    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([("p", p)], lr=lr, weight_decay=wd)
    worst = 0.0
    for g, expect in zip(grads, trace):
        p.grad = np.array([g])
        opt.step()
        worst = max(worst, abs(float(p.data[0]) - expect))
    assert worst <= 1e-12

    # lambda = 0 reduces to plain Adam
    theta, m, v = 1.0, 0.0, 0.0
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([("p", p)], lr=lr, weight_decay=0.0)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
        p.grad = np.array([g])
        opt.step()
        worst = max(worst, abs(float(p.data[0]) - theta))
    assert worst <= 1e-12
    ok(4, f"(max abs trace err {worst:.2e})")


# 5. Schedule reproduction ---------------------------------------------------------------------


def test_c05_epsilon_schedule():
    cfg = AgentConfig(eps_start=1.0, eps_end=0.1, n_episodes=10_000)
    # the documented rate is a rounded decimal; the strict bound is on epsilon
    assert cfg.decay_rate == pytest.approx(0.999769741, abs=5e-8)
    assert cfg.decay_rate == pytest.approx(0.1 ** 1e-4, abs=1e-15)
    eps = 1.0
    for _ in range(10_000):
        eps = decay_epsilon(eps, cfg)
    assert abs(eps - 0.1) < 1e-9
    ok(5, f"(rate {cfg.decay_rate:.9f}, eps after 10000 decays {eps:.12f})")


# 6. Loss functions -----------------------------------------------------------------------------


def test_c06_loss_closed_forms():
    delta = 1.0
    errors = [-3.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0]  # both branches + e = delta
    for e in errors:
        pred = Tensor(np.array([e]))
        y = np.zeros(1)
        mse = compute_loss(pred, y, "mse").item()
        hub = compute_loss(pred, y, "huber", delta).item()
        assert mse == pytest.approx(e * e, abs=1e-12)
        if abs(e) <= delta:
            assert hub == pytest.approx(0.5 * e * e, abs=1e-12)
        else:
            assert hub == pytest.approx(delta * (abs(e) - 0.5 * delta), abs=1e-12)
    # boundary e = delta: the two branches agree
    assert compute_loss(Tensor(np.array([1.0])), np.zeros(1), "huber").item() == 0.5
    ok(6, f"({len(errors)} hand values, both branches and the boundary)")


# 7. Replay properties -----------------------------------------------------------------------------


def test_c07_replay_properties():
    # FIFO eviction exactness
    buf = UniformReplayBuffer(3, (1,))
    for i in range(5):
        s = np.array([float(i)])
        buf.add(Transition(s, 0, float(i), s, False))
    assert [t.reward for t in buf.entries()] == [2.0, 3.0, 4.0]

    # chi-squared uniformity at 99% over >= 1e4 draws
    buf = UniformReplayBuffer(10, (1,))
    for i in range(10):
        s = np.array([float(i)])
        buf.add(Transition(s, 0, 0.0, s, False))
    rng = np.random.default_rng(5)
    counts = np.zeros(10)
    draws = 20_000
    for _ in range(draws // 10):
        ids = buf.sample(10, rng)["states"][:, 0].astype(int)
        counts += np.bincount(ids, minlength=10)
    chi2 = ((counts - draws / 10) ** 2 / (draws / 10)).sum()
    crit = stats.chi2.ppf(0.99, df=9)
    assert chi2 < crit

    # sequence buffer: round-trip bit-exactness and [B, L, ...] contract
    seq = SequenceReplayBuffer(4, (2, 3), batch_size=1, seq_len=5)
    rng2 = np.random.default_rng(6)
    states = rng2.standard_normal((5, 2, 3))
    nexts = rng2.standard_normal((5, 2, 3))
    actions = np.array([0, 1, 0, 1, 1])
    rewards = rng2.standard_normal(5)
    dones = np.array([0.0, 0.0, 0.0, 0.0, 1.0])
    seq.add(states, actions, rewards, nexts, dones)
    batch = seq.sample(np.random.default_rng(7))
    assert batch["states"].shape == (1, 5, 2, 3)
    assert batch["actions"].shape == (1, 5, 1)
    assert batch["dones"].shape == (1, 5, 1)
    np.testing.assert_array_equal(batch["states"][0], states)
    np.testing.assert_array_equal(batch["next_states"][0], nexts)
    np.testing.assert_array_equal(batch["rewards"][0, :, 0], rewards)
    with pytest.raises(NotReadyError):
        SequenceReplayBuffer(4, (2, 3), batch_size=2, seq_len=5).sample(rng2)
    ok(7, f"(chi2 {chi2:.1f} < {crit:.1f}, bit-exact sequence round trip)")


# 8. Determinism -----------------------------------------------------------------------------------


def test_c08_determinism_200_episodes(tmp_path):
    argv = ["train", "--preset", "catch-dcqn-desk", "--seed", "42",
            "--set", "agent.n_episodes=200"]
    durations = []
    for sub in ("a", "b"):
        t0 = time.monotonic()
        assert main(argv + ["--out", str(tmp_path / sub)]) == 0
        durations.append(time.monotonic() - t0)
    blob_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    blob_b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert blob_a == blob_b
    assert blob_a.count(b"\n") == 201  # header + 200 rows
    assert max(durations) < 300.0  # < 5 min CPU per run
    ok(8, f"(byte-identical metrics.csv, {durations[0]:.0f}s + {durations[1]:.0f}s)")


# 9. Learning: convolutional network -----------------------------------------------------------------


def random_baseline(episodes=2000, seed=0):
    """Monte-Carlo oracle: mean Catch reward of the uniform-random policy."""
    rng = np.random.default_rng(seed)
    env = CatchEnv(seed=seed)
    total = 0.0
    for _ in range(episodes):
        env.reset(int(rng.integers(1 << 30)))
        done = False
        while not done:
            _, r, done = env.step(int(rng.integers(3)))
        total += r
    return total / episodes


def test_c09_dcqn_learns_catch(tmp_path):
    from qforge.cli import load_preset

    t0 = time.monotonic()
    preset = load_preset("catch-dcqn-desk")
    acfg = AgentConfig(**{**preset["agent"], "early_stop_eval": 0.9})
    mcfg = ModelConfig.from_dict(preset["model"])
    assert acfg.n_episodes <= 2000
    summary = train(acfg, mcfg, preset["env"], seed=42, out_dir=tmp_path)
    elapsed = time.monotonic() - t0
    assert summary["last_eval_avg_reward"] is not None
    assert summary["last_eval_avg_reward"] >= 0.9, (
        f"eval {summary['last_eval_avg_reward']} < 0.9 "
        f"after {summary['episodes']} episodes"
    )
    assert elapsed < 1800.0
    ok(9, f"(eval {summary['last_eval_avg_reward']:.2f} at episode "
          f"{summary['episodes']}, {elapsed:.0f}s)")


# 10. Learning: transformer network -------------------------------------------------------------------


def test_c10_dtqn_learns_catch(tmp_path):
    from qforge.cli import load_preset

    t0 = time.monotonic()
    baseline = random_baseline()
    threshold = baseline + 0.5 * (1.0 - baseline)  # optimal reward is 1.0
    preset = load_preset("catch-dtqn-proj-desk")
    acfg = AgentConfig(**{**preset["agent"], "early_stop_eval": threshold})
    mcfg = ModelConfig.from_dict(preset["model"])
    assert acfg.n_episodes <= 3000
    summary = train(acfg, mcfg, preset["env"], seed=42, out_dir=tmp_path)
    elapsed = time.monotonic() - t0
    assert summary["last_eval_avg_reward"] is not None
    assert summary["last_eval_avg_reward"] >= threshold, (
        f"eval {summary['last_eval_avg_reward']} < threshold {threshold:.3f} "
        f"(random baseline {baseline:.3f}) after {summary['episodes']} episodes"
    )
    assert elapsed < 3600.0
    ok(10, f"(eval {summary['last_eval_avg_reward']:.2f} >= {threshold:.3f}, "
           f"random baseline {baseline:.3f}, episode {summary['episodes']}, "
           f"{elapsed:.0f}s)")


# 11. Target-network contract ----------------------------------------------------------------------------


def test_c11_target_network_contract():
    mcfg = tiny_model_cfg("dcqn")
    acfg = AgentConfig(lr=1e-3, batch_size=8, replay_capacity=64, warmup=8,
                       loss_mode="mse", n_episodes=1)
    state = TrainState(acfg, mcfg, seed=8)
    rng = np.random.default_rng(9)
    for i in range(16):
        s = rng.standard_normal((2, 12, 12))
        state.buffer.add(Transition(s, i % 3, 1.0, s, i % 2 == 0))

    # after sync: bit-identical
    from qforge.agent import sync_target

    sync_target(state.policy, state.target)
    for (_, pp), (_, tp) in zip(state.policy.parameters(), state.target.parameters()):
        np.testing.assert_array_equal(pp.data, tp.data)

    # between syncs: target constant while the policy moves
    before = [tp.data.copy() for _, tp in state.target.parameters()]
    for _ in range(10):
        state.learn_step()
    moved = any(
        not np.array_equal(pp.data, tb)
        for (_, pp), tb in zip(state.policy.parameters(), before)
    )
    assert moved, "policy parameters did not move"
    for tb, (_, tp) in zip(before, state.target.parameters()):
        np.testing.assert_array_equal(tb, tp.data)

    # TD targets carry no gradient into the target network
    batch = state.buffer.sample(8, np.random.default_rng(10))
    y = td_target(batch, state.target, acfg.gamma)
    assert isinstance(y, np.ndarray)
    assert all(tp.grad is None for _, tp in state.target.parameters())
    ok(11, "(sync bit-identity, inter-sync constancy, detached targets)")


# 12. Loss-selector rules -----------------------------------------------------------------------------------


def test_c12_loss_selector_rules():
    # flat Huber stream: exactly one huber -> mse transition
    sel = LossSelector("huber", window=10, tau_flat=1e-3, tau_vol=5.0)
    for step in range(40):
        sel.update(1.0, step)
    assert [(t["from"], t["to"], t["rule"]) for t in sel.transitions] == [
        ("huber", "mse", "flat")
    ]  # exactly one switch; the flat stream must not bounce back from mse
    assert sel.transitions[0]["step"] == 9

    # volatile MSE stream: mse -> huber on relative std
    sel = LossSelector("mse", window=50, tau_flat=1e-3, tau_vol=5.0)
    for step in range(29):
        sel.update(0.0, step)
    sel.update(1000.0, 29)
    assert sel.mode == "huber"
    assert sel.transitions == [
        {"step": 29, "from": "mse", "to": "huber", "rule": "volatility",
         "stat": sel.transitions[0]["stat"]}
    ]
    assert sel.transitions[0]["stat"] > 5.0

    # NaN in MSE: immediate mse -> huber
    sel = LossSelector("mse", window=10, tau_flat=1e-3, tau_vol=5.0)
    sel.update(0.5, 0)
    sel.update(float("nan"), 1)
    assert sel.mode == "huber"
    assert [t["rule"] for t in sel.transitions] == ["nan"]

    # benign decreasing stream: no transitions at all
    sel = LossSelector("huber", window=10, tau_flat=1e-3, tau_vol=5.0)
    for step, v in enumerate(np.linspace(2.0, 0.2, 60)):
        sel.update(float(v), step)
    assert sel.transitions == []
    ok(12, "(flat, volatile, NaN, and benign streams)")
