"""Simulated user feedback derived from gold annotations."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .dataset import Example, Span
from .metrics import UndefinedStatistic

LOG_FIELDS = ("step", "example_id", "start", "end", "propensity", "reward")


class FeedbackLogError(ValueError):
    """Raised for unreadable or corrupt feedback logs."""


@dataclass(frozen=True)
class RewardConfig:
    mode: str = "exact"
    positive: float = 1.0
    negative: float = -0.1
    noise_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exact", "f1"):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        if not self.positive > self.negative:
            raise ValueError("positive reward must exceed negative reward")
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise ValueError(f"noise_ratio must be in [0, 1], got {self.noise_ratio}")
        if self.mode == "f1" and self.noise_ratio > 0:
            raise ValueError("reward flip noise is only defined for the exact (binary) reward")


@dataclass(frozen=True)
class FeedbackRecord:
    example_id: str
    span: Span
    propensity: float
    reward: float
    step: int


def flip(reward: float, cfg: RewardConfig) -> float:
    """Swap the binary reward class."""
    return cfg.negative if reward == cfg.positive else cfg.positive


def simulate_reward(ex: Example, pred: Span, cfg: RewardConfig, rng: np.random.Generator) -> float:
    """Reward a predicted span against ``ex.gold_span``.

    Noise consumes one uniform draw from ``rng`` per call when ``noise_ratio > 0``
    and none otherwise.
    """
    gold = ex.gold_span
    if cfg.mode == "exact":
        reward = cfg.positive if pred == gold else cfg.negative
        if cfg.noise_ratio > 0 and rng.random() < cfg.noise_ratio:
            reward = flip(reward, cfg)
        return reward
    f1 = metrics.token_f1(pred, [gold], ex)
    return f1 if f1 > 0 else cfg.negative


def positive_rate(records: Sequence[FeedbackRecord], cfg: RewardConfig) -> float:
    if not records:
        raise UndefinedStatistic("positive rate of an empty feedback log")
    return sum(r.reward == cfg.positive for r in records) / len(records)


def write_log(records: Sequence[FeedbackRecord], path: str | Path) -> None:
    """Tab-separated, one record per line; floats carry 17 significant digits."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in records:
            w.writerow(
                [r.step, r.example_id, r.span.start, r.span.end, format(r.propensity, ".17g"), format(r.reward, ".17g")]
            )


def read_log(path: str | Path) -> list[FeedbackRecord]:
    records = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            return records
        if tuple(header) != LOG_FIELDS:
            raise FeedbackLogError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, 2):
            try:
                step, ex_id, start, end, prop, reward = row
                records.append(FeedbackRecord(ex_id, Span(int(start), int(end)), float(prop), float(reward), int(step)))
            except ValueError as err:
                raise FeedbackLogError(f"{path}:{lineno}: {err}") from err
    return records
