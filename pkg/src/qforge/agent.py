"""Training and evaluation engine.

Epsilon-greedy control, one-step TD targets from a periodically synced
target network, Huber/MSE loss with an online loss-mode selector, AdamW
updates, and deterministic greedy evaluation at a fixed cadence.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .envs import FrameStack, make_env, preprocess_frame
from .errors import ConfigError, NumericError
from .metrics import CsvMetricsWriter, MetricsRow
from .models import ModelConfig, build_model, copy_parameters, save_checkpoint
from .replay import SequenceReplayBuffer, Transition, UniformReplayBuffer
from .tensor import Tensor, where

logger = logging.getLogger(__name__)

LOSS_MODES = ("huber", "mse", "auto")


@dataclass
class AgentConfig:
    lr: float = 1e-4
    gamma: float = 0.99
    batch_size: int = 32
    replay_capacity: int = 1_000_000
    target_sync: int = 500  # steps between target-network syncs
    n_episodes: int = 10_000
    eps_start: float = 1.0
    eps_end: float = 0.1
    # episodes over which the exponential schedule reaches eps_end;
    # None means n_episodes (the schedule-from-duration formula)
    eps_decay_episodes: int | None = None
    weight_decay: float = 0.01
    loss_mode: str = "auto"
    huber_delta: float = 1.0
    eval_period: int = 500  # episodes between deterministic evals
    eval_episodes: int = 5
    warmup: int = 1_000  # minimum buffered transitions before learning
    selector_window: int = 500
    tau_flat: float = 1e-3
    tau_vol: float = 5.0
    grad_clip: float = 10.0
    seq_len: int = 8
    use_seq_buffer: bool = False
    buffer_dtype: str = "float64"
    deterministic_timing: bool = False
    # stop once a periodic eval reaches this average reward; None disables
    early_stop_eval: float | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"discount must be in (0,1], got {self.gamma}")
        if not 0.0 < self.eps_end <= self.eps_start <= 1.0:
            raise ConfigError(
                f"need 0 < eps_end <= eps_start <= 1, got {self.eps_end}, {self.eps_start}"
            )
        if self.target_sync < 1:
            raise ConfigError(f"target sync period must be >= 1, got {self.target_sync}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss mode must be one of {LOSS_MODES}")
        if self.replay_capacity < self.batch_size:
            raise ConfigError("replay capacity must be >= batch size")

    @property
    def decay_rate(self) -> float:
        n = self.eps_decay_episodes or self.n_episodes
        return (self.eps_end / self.eps_start) ** (1.0 / n)

    def to_dict(self) -> dict:
        return asdict(self)


def decay_epsilon(eps: float, cfg: AgentConfig) -> float:
    """One per-episode exponential decay step, clamped at eps_end."""
    return max(cfg.eps_end, eps * cfg.decay_rate)


def select_action(state_stack, q_net, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over q_net; argmax ties break to the lowest index."""
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(q_net.cfg.actions))
    q = q_net.q_values(np.asarray(state_stack)[None]).data[0]
    return int(np.argmax(q))


def td_target(batch: dict, target_net, gamma: float) -> np.ndarray:
    """Bellman targets r + gamma * (1-done) * max_a' Q_target(s', a').

    Computed outside the differentiation graph: no gradient can reach the
    target network.
    """
    q_next = target_net.q_values(batch["next_states"]).data
    return batch["rewards"] + gamma * (1.0 - batch["dones"]) * q_next.max(axis=1)


def compute_loss(pred: Tensor, y: np.ndarray, mode: str, delta: float = 1.0) -> Tensor:
    """Mean MSE or Huber loss over the batch; NaN inputs raise NumericError."""
    if np.isnan(pred.data).any() or np.isnan(np.asarray(y)).any():
        raise NumericError("NaN encountered in loss inputs")
    e = pred - Tensor(y)
    if mode == "mse":
        return (e * e).mean()
    if mode == "huber":
        abs_e = e.abs()
        quad = e * e * 0.5
        lin = (abs_e - 0.5 * delta) * delta
        return where(np.abs(e.data) <= delta, quad, lin).mean()
    raise ConfigError(f"unknown loss mode {mode!r}")


class LossSelector:
    """Online replacement for watch-the-loss-and-restart mode switching.

    In a Huber phase, a full window whose relative range stays below
    tau_flat means the loss is flat: switch to MSE. In an MSE phase, a NaN
    or a relative standard deviation above tau_vol means instability:
    switch back to Huber. Every transition is logged with the triggering
    statistic.
    """

    def __init__(self, mode: str, window: int, tau_flat: float, tau_vol: float,
                 enabled: bool = True):
        self.mode = mode
        self.enabled = enabled
        self.tau_flat = tau_flat
        self.tau_vol = tau_vol
        self.window = deque(maxlen=window)
        self.transitions: list = []

    def update(self, loss_value: float, step: int) -> str:
        self.window.append(loss_value)
        if not self.enabled:
            return self.mode
        vals = np.array(self.window)
        if self.mode == "mse":
            if np.isnan(vals).any():
                self._switch("huber", "nan", float("nan"), step)
            elif len(vals) >= 2:
                rel_std = vals.std() / max(abs(vals.mean()), 1e-12)
                if rel_std > self.tau_vol:
                    self._switch("huber", "volatility", rel_std, step)
        elif self.mode == "huber" and len(vals) == self.window.maxlen:
            if not np.isnan(vals).any():
                rel_range = (vals.max() - vals.min()) / max(abs(vals.mean()), 1e-12)
                if rel_range < self.tau_flat:
                    self._switch("mse", "flat", rel_range, step)
        return self.mode

    def _switch(self, new_mode: str, rule: str, stat: float, step: int):
        logger.info(
            "loss mode %s -> %s at step %d (%s rule, statistic %.6g)",
            self.mode, new_mode, step, rule, stat,
        )
        self.transitions.append(
            {"step": step, "from": self.mode, "to": new_mode, "rule": rule, "stat": stat}
        )
        self.mode = new_mode
        self.window.clear()


class AdamW:
    """Adam with decoupled weight decay over named parameters."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for _, p in self.params]
        self.v = [np.zeros(p.shape) for _, p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, (_, p) in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= self.lr * (
                mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            )

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def sync_target(policy, target):
    copy_parameters(policy, target)


def evaluate(policy, env_name: str, episodes: int = 5, base_seed: int = 42,
             eval_index: int = 0) -> float:
    """Mean total reward over fully greedy episodes, deterministically seeded."""
    env = make_env(env_name, seed=base_seed)
    totals = []
    for i in range(episodes):
        frame = env.reset(seed=base_seed + 1_000_000 + eval_index * 1_000 + i)
        stack = FrameStack(policy.cfg.frames)
        state = stack.reset(preprocess_frame(frame))
        total, done = 0.0, False
        while not done:
            q = policy.q_values(state[None]).data[0]
            frame, reward, done = env.step(int(np.argmax(q)))
            state = stack.push(preprocess_frame(frame))
            total += reward
        totals.append(total)
    return float(np.mean(totals))


class TrainState:
    """Everything the learn step mutates, bundled for inspection/tests."""

    def __init__(self, acfg: AgentConfig, mcfg: ModelConfig, seed: int):
        self.acfg = acfg
        self.mcfg = mcfg
        ss = np.random.SeedSequence(seed)
        init_rng, self.action_rng, self.replay_rng = (
            np.random.default_rng(s) for s in ss.spawn(3)
        )
        self.policy = build_model(mcfg, init_rng)
        self.target = build_model(mcfg, np.random.default_rng(0))
        copy_parameters(self.policy, self.target)
        dtype = np.dtype(acfg.buffer_dtype)
        state_shape = (mcfg.frames, *mcfg.input_hw)
        self.buffer = UniformReplayBuffer(acfg.replay_capacity, state_shape, dtype=dtype)
        self.seq_buffer = (
            SequenceReplayBuffer(
                max(acfg.replay_capacity // max(acfg.seq_len, 1), acfg.batch_size),
                state_shape,
                acfg.batch_size,
                acfg.seq_len,
                dtype=dtype,
            )
            if acfg.use_seq_buffer
            else None
        )
        self.optimizer = AdamW(self.policy.parameters(), acfg.lr, acfg.weight_decay)
        initial_mode = "huber" if acfg.loss_mode in ("huber", "auto") else "mse"
        self.selector = LossSelector(
            initial_mode,
            acfg.selector_window,
            acfg.tau_flat,
            acfg.tau_vol,
            enabled=acfg.loss_mode == "auto",
        )
        self.epsilon = acfg.eps_start
        self.global_step = 0
        self.episode = 0

    def learn_step(self) -> float:
        """One sampled gradient update; returns the loss (NaN skips the step)."""
        acfg = self.acfg
        batch = self.buffer.sample(acfg.batch_size, self.replay_rng)
        y = td_target(batch, self.target, acfg.gamma)
        qs = self.policy.q_values(batch["states"], training=True)
        pred = qs[np.arange(acfg.batch_size), batch["actions"]]
        try:
            loss = compute_loss(pred, y, self.selector.mode, acfg.huber_delta)
            loss_value = loss.item()
        except NumericError:
            loss_value = float("nan")
        if np.isfinite(loss_value):
            self.optimizer.zero_grad()
            loss.backward()
            clip_grad_norm(self.optimizer.params, acfg.grad_clip)
            self.optimizer.step()
        self.selector.update(loss_value, self.global_step)
        return loss_value


def train(
    acfg: AgentConfig,
    mcfg: ModelConfig,
    env_name: str,
    seed: int = 42,
    out_dir=None,
    log_every: int = 50,
) -> dict:
    """Full training run; writes metrics.csv and checkpoints under out_dir.

    Returns a summary dict with the final evaluation score, checkpoint
    paths, and the loss-selector transition log.
    """
    env = make_env(env_name, seed=seed)
    if env.spec.action_count != mcfg.actions:
        raise ConfigError(
            f"model has {mcfg.actions} actions but env {env_name!r} has "
            f"{env.spec.action_count}"
        )
    state = TrainState(acfg, mcfg, seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    checkpoints = []
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        writer = CsvMetricsWriter(out_dir / "metrics.csv")

    warm = max(acfg.batch_size, acfg.warmup)
    last_eval = None
    eval_index = 0
    try:
        for ep in range(acfg.n_episodes):
            frame = env.reset(seed=seed + ep)
            stack = FrameStack(mcfg.frames)
            obs = stack.reset(preprocess_frame(frame))
            ep_reward, ep_steps = 0.0, 0
            losses, step_times = [], []
            env_time = 0.0
            seq_states, seq_actions, seq_rewards, seq_next, seq_dones = [], [], [], [], []
            done = False
            while not done:
                action = select_action(obs, state.policy, state.epsilon, state.action_rng)
                t0 = time.perf_counter()
                frame, reward, done = env.step(action)
                nxt = stack.push(preprocess_frame(frame))
                env_time += time.perf_counter() - t0
                state.buffer.add(Transition(obs, action, reward, nxt, done))
                if state.seq_buffer is not None:
                    seq_states.append(obs)
                    seq_actions.append(action)
                    seq_rewards.append(reward)
                    seq_next.append(nxt)
                    seq_dones.append(1.0 if done else 0.0)
                obs = nxt
                ep_reward += reward
                ep_steps += 1
                state.global_step += 1
                if len(state.buffer) >= warm:
                    t1 = time.perf_counter()
                    losses.append(state.learn_step())
                    step_times.append(time.perf_counter() - t1)
                if state.global_step % acfg.target_sync == 0:
                    sync_target(state.policy, state.target)
            if state.seq_buffer is not None:
                # non-overlapping windows; remainder shorter than L is dropped
                L = acfg.seq_len
                for k in range(len(seq_states) // L):
                    sl = slice(k * L, (k + 1) * L)
                    state.seq_buffer.add(
                        np.array(seq_states[sl]),
                        np.array(seq_actions[sl]),
                        np.array(seq_rewards[sl]),
                        np.array(seq_next[sl]),
                        np.array(seq_dones[sl]),
                    )

            eval_avg = None
            if (ep + 1) % acfg.eval_period == 0:
                eval_avg = evaluate(
                    state.policy, env_name, acfg.eval_episodes, seed, eval_index
                )
                eval_index += 1
                last_eval = eval_avg
                logger.info("episode %d eval avg reward %.4f", ep + 1, eval_avg)
                if out_dir is not None:
                    path = out_dir / f"checkpoint_ep{ep + 1:06d}.qck"
                    save_checkpoint(state.policy, path)
                    checkpoints.append(str(path))

            finite = [x for x in losses if np.isfinite(x)]
            row = MetricsRow(
                episode=ep + 1,
                total_reward=ep_reward,
                mean_loss=float(np.mean(finite)) if finite else None,
                epsilon=state.epsilon,
                steps=ep_steps,
                env_time_s=0.0 if acfg.deterministic_timing else env_time,
                step_time_ms=(
                    0.0
                    if acfg.deterministic_timing
                    else (float(np.mean(step_times)) * 1e3 if step_times else None)
                ),
                eval_avg_reward=eval_avg,
                loss_mode=state.selector.mode,
            )
            if writer is not None:
                writer.write(row)
            if log_every and (ep + 1) % log_every == 0:
                logger.info(
                    "episode %d/%d reward %.2f eps %.3f mode %s",
                    ep + 1, acfg.n_episodes, ep_reward, state.epsilon,
                    state.selector.mode,
                )
            state.epsilon = decay_epsilon(state.epsilon, acfg)
            state.episode = ep + 1
            if (
                acfg.early_stop_eval is not None
                and eval_avg is not None
                and eval_avg >= acfg.early_stop_eval
            ):
                logger.info("early stop: eval %.4f >= %.4f", eval_avg,
                            acfg.early_stop_eval)
                break
    finally:
        if writer is not None:
            writer.close()

    final_path = None
    if out_dir is not None:
        final_path = out_dir / "checkpoint_final.qck"
        save_checkpoint(state.policy, final_path)
        checkpoints.append(str(final_path))
    return {
        "episodes": state.episode,
        "final_epsilon": state.epsilon,
        "last_eval_avg_reward": last_eval,
        "checkpoints": checkpoints,
        "loss_transitions": state.selector.transitions,
        "global_steps": state.global_step,
    }
