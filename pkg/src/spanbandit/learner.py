"""Bandit learners: online policy gradient and offline clipped-IPS.

Both learners average per-example gradients over batches of ``batch_size``
and apply one ascent step per batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import feedback, metrics
from .dataset import Dataset
from .feedback import FeedbackLogError, FeedbackRecord, RewardConfig
from .metrics import LearningCurvePoint, RegretTracker, update_regret
from .policy import PolicyConfig, SpanPolicy, linear_lr

DEFAULT_LR = {"online": 15.0, "offline": 10.0}


@dataclass(frozen=True)
class LearnerConfig:
    mode: str = "online"
    batch_size: int = 40
    lr: float | None = None
    horizon: int | None = None
    offline_epochs: int = 3
    clip_low: float = 0.0
    clip_high: float = 1.0
    seed: int = 0
    checkpoints: int = 9

    def __post_init__(self):
        if self.mode not in DEFAULT_LR:
            raise ValueError(f"unknown learner mode {self.mode!r}")
        if self.lr is None:
            object.__setattr__(self, "lr", DEFAULT_LR[self.mode])
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode == "offline" and self.offline_epochs < 1:
            raise ValueError("offline_epochs must be >= 1")
        if self.clip_low > self.clip_high:
            raise ValueError("clip_low must not exceed clip_high")
        if self.checkpoints < 2:
            raise ValueError("checkpoints must be >= 2")
        if self.horizon is not None and self.horizon < 0:
            raise ValueError("horizon must be >= 0")


class UpdateInfo(NamedTuple):
    """Passed to ``on_update`` right after each parameter step."""

    epoch: int
    batch: int
    lr: float
    rewards: np.ndarray
    weights: np.ndarray  # importance weights (all ones online)


UpdateHook = Callable[[UpdateInfo, SpanPolicy], None]


def clipped_weight(pi: float, propensity: float, low: float = 0.0, high: float = 1.0) -> float:
    """Importance ratio ``pi / propensity`` clipped to ``[low, high]``."""
    return min(max(pi / propensity, low), high)


def checkpoint_steps(total: int, count: int) -> list[int]:
    return sorted({k * total // (count - 1) for k in range(count)})


@dataclass
class _Stats:
    reward_cfg: RewardConfig
    tracker: RegretTracker = None
    positives: int = 0

    def __post_init__(self):
        self.tracker = RegretTracker(oracle_reward_per_step=self.reward_cfg.positive)

    def observe(self, reward: float) -> None:
        self.tracker = update_regret(self.tracker, reward)
        self.positives += reward == self.reward_cfg.positive

    def point(self, steps: int, evaluation: tuple[float, float]) -> LearningCurvePoint:
        rate = self.positives / self.tracker.steps if self.tracker.steps else 0.0
        return LearningCurvePoint(steps, evaluation[0], evaluation[1], self.tracker.cumulative, rate)


def _horizon(stream: Dataset, cfg: LearnerConfig) -> int:
    return len(stream) if cfg.horizon is None else min(cfg.horizon, len(stream))


def run_online(
    policy: SpanPolicy,
    stream: Dataset,
    reward_cfg: RewardConfig,
    cfg: LearnerConfig,
    eval_set: Dataset,
    policy_cfg: PolicyConfig = PolicyConfig(),
    on_update: UpdateHook | None = None,
) -> tuple[SpanPolicy, list[LearningCurvePoint], list[FeedbackRecord]]:
    """Single pass over ``stream`` in order; each reward feeds exactly one update."""
    if cfg.mode != "online":
        raise ValueError("run_online needs an online LearnerConfig")
    policy = policy.copy()
    T = _horizon(stream, cfg)
    marks = set(checkpoint_steps(T, cfg.checkpoints))
    reward_rng = np.random.default_rng(reward_cfg.seed)
    decode_rng = np.random.default_rng(cfg.seed)
    stats = _Stats(reward_cfg)
    curve = [stats.point(0, metrics.evaluate(policy, eval_set, policy_cfg))]
    records: list[FeedbackRecord] = []

    buf = np.zeros_like(policy.params)
    batch_rewards: list[float] = []
    n_updates = 0
    for t in range(1, T + 1):
        ex = stream[t - 1]
        pred = policy.decode(ex, policy_cfg, decode_rng)
        reward = feedback.simulate_reward(ex, pred.span, reward_cfg, reward_rng)
        records.append(FeedbackRecord(ex.id, pred.span, pred.propensity, reward, t))
        stats.observe(reward)
        if reward != 0.0:
            policy.accumulate_log_prob_grad(ex, pred.span, buf, reward, policy_cfg)
        batch_rewards.append(reward)
        if len(batch_rewards) == cfg.batch_size or t == T:
            policy.params += (cfg.lr / len(batch_rewards)) * buf
            buf[:] = 0.0
            if on_update is not None:
                rewards = np.array(batch_rewards)
                on_update(UpdateInfo(0, n_updates, cfg.lr, rewards, np.ones_like(rewards)), policy)
            n_updates += 1
            batch_rewards = []
        if t in marks:
            curve.append(stats.point(t, metrics.evaluate(policy, eval_set, policy_cfg)))
    return policy, curve, records


def collect_feedback(
    policy: SpanPolicy,
    stream: Dataset,
    reward_cfg: RewardConfig,
    cfg: LearnerConfig,
    policy_cfg: PolicyConfig = PolicyConfig(),
) -> list[FeedbackRecord]:
    """Log predictions, propensities and rewards with parameters frozen."""
    reward_rng = np.random.default_rng(reward_cfg.seed)
    decode_rng = np.random.default_rng(cfg.seed)
    records = []
    for t in range(1, _horizon(stream, cfg) + 1):
        ex = stream[t - 1]
        pred = policy.decode(ex, policy_cfg, decode_rng)
        reward = feedback.simulate_reward(ex, pred.span, reward_cfg, reward_rng)
        records.append(FeedbackRecord(ex.id, pred.span, pred.propensity, reward, t))
    return records


def replay(
    log: Sequence[FeedbackRecord],
    policy: SpanPolicy,
    cfg: LearnerConfig,
    examples: Dataset,
    policy_cfg: PolicyConfig = PolicyConfig(),
    on_update: UpdateHook | None = None,
    on_epoch: Callable[[int, SpanPolicy], None] | None = None,
) -> SpanPolicy:
    """Offline clipped-IPS updates over a logged feedback sequence.

    For ``offline_epochs`` sweeps, each batch reweights its rewards by
    ``clip(pi(span) / propensity, clip_low, clip_high)`` with ``pi`` evaluated
    at the parameters current when the batch is processed.  The learning rate
    decays linearly from ``cfg.lr`` to 0 over all batch updates.
    """
    for rec in log:
        if not (rec.propensity > 0 and math.isfinite(rec.propensity)):
            raise FeedbackLogError(f"step {rec.step}: non-positive propensity {rec.propensity!r}")
    resolved = [examples.by_id(rec.example_id) for rec in log]
    policy = policy.copy()
    if not log:
        return policy
    B = cfg.batch_size
    n_batches = -(-len(log) // B)
    total = cfg.offline_epochs * n_batches
    buf = np.zeros_like(policy.params)
    u = 0
    for epoch in range(cfg.offline_epochs):
        for b in range(n_batches):
            lo, hi = b * B, min((b + 1) * B, len(log))
            weights = np.empty(hi - lo)
            rewards = np.empty(hi - lo)
            # all ratios of a batch use the parameters from before its step
            probs = [math.exp(policy.log_prob(resolved[k], log[k].span, policy_cfg)) for k in range(lo, hi)]
            buf[:] = 0.0
            for k in range(lo, hi):
                w = clipped_weight(probs[k - lo], log[k].propensity, cfg.clip_low, cfg.clip_high)
                weights[k - lo] = w
                rewards[k - lo] = log[k].reward
                scaled = w * log[k].reward
                if scaled != 0.0:
                    policy.accumulate_log_prob_grad(resolved[k], log[k].span, buf, scaled, policy_cfg)
            lr = linear_lr(cfg.lr, u, total)
            policy.params += (lr / (hi - lo)) * buf
            if on_update is not None:
                on_update(UpdateInfo(epoch, b, lr, rewards, weights), policy)
            u += 1
        if on_epoch is not None:
            on_epoch(epoch, policy)
    return policy


def run_offline(
    policy: SpanPolicy,
    stream: Dataset,
    reward_cfg: RewardConfig,
    cfg: LearnerConfig,
    eval_set: Dataset,
    policy_cfg: PolicyConfig = PolicyConfig(),
    on_update: UpdateHook | None = None,
) -> tuple[SpanPolicy, list[LearningCurvePoint], list[FeedbackRecord]]:
    """Log feedback for the whole stream with frozen parameters, then replay it.

    The curve holds the initial evaluation followed by one point per epoch;
    regret and positive rate come from the logging pass only.
    """
    if cfg.mode != "offline":
        raise ValueError("run_offline needs an offline LearnerConfig")
    records = collect_feedback(policy, stream, reward_cfg, cfg, policy_cfg)
    stats = _Stats(reward_cfg)
    curve = [stats.point(0, metrics.evaluate(policy, eval_set, policy_cfg))]
    for rec in records:
        stats.observe(rec.reward)
    T = len(records)

    def epoch_point(epoch, current):
        curve.append(stats.point(T, metrics.evaluate(current, eval_set, policy_cfg)))

    trained = replay(records, policy, cfg, stream, policy_cfg, on_update=on_update, on_epoch=epoch_point)
    return trained, curve, records
