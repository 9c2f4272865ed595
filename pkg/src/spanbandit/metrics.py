"""Span-level F1 / exact match, regret accounting, and curve/summary CSVs."""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset, Example, Span, normalize_tokens
from .policy import PolicyConfig, SpanPolicy

CURVE_HEADER = ("steps", "f1", "em", "cum_regret", "avg_regret", "positive_rate")
SUMMARY_HEADER = ("run", "initial_f1", "final_f1", "delta_f1", "initial_em", "final_em", "delta_em")


class UndefinedStatistic(ValueError):
    """Raised when a mean/rate is requested over zero observations."""


def bag_f1(pred_tokens: Sequence[str], gold_tokens: Sequence[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_tokens)
    recall = same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: Span, golds: Sequence[Span], ex: Example) -> float:
    """Max over ``golds`` of normalized bag-of-tokens F1."""
    p = normalize_tokens(ex.span_tokens(pred))
    return max(bag_f1(p, normalize_tokens(ex.span_tokens(g))) for g in golds)


def exact_match(pred: Span, golds: Sequence[Span], ex: Example) -> int:
    return int(any(pred == g for g in golds))


@dataclass(frozen=True)
class RegretTracker:
    cumulative: float = 0.0
    steps: int = 0
    oracle_reward_per_step: float = 1.0

    @property
    def average(self) -> float:
        return self.cumulative / self.steps if self.steps else 0.0


def update_regret(tracker: RegretTracker, observed_reward: float) -> RegretTracker:
    return replace(
        tracker,
        cumulative=tracker.cumulative + (tracker.oracle_reward_per_step - observed_reward),
        steps=tracker.steps + 1,
    )


def regret_from_rewards(rewards: Iterable[float], oracle: float = 1.0) -> RegretTracker:
    tracker = RegretTracker(oracle_reward_per_step=oracle)
    for r in rewards:
        tracker = update_regret(tracker, r)
    return tracker


def evaluate(policy: SpanPolicy, eval_set: Dataset, cfg: PolicyConfig = PolicyConfig()) -> tuple[float, float]:
    """Mean F1 and EM of argmax decodes against all annotated answers."""
    if len(eval_set) == 0:
        raise UndefinedStatistic("cannot evaluate on an empty dataset")
    cfg = replace(cfg, mode="argmax")
    f1 = np.empty(len(eval_set))
    em = np.empty(len(eval_set))
    for k, ex in enumerate(eval_set):
        span = policy.decode(ex, cfg).span
        f1[k] = token_f1(span, ex.answers, ex)
        em[k] = exact_match(span, ex.answers, ex)
    return float(f1.mean()), float(em.mean())


@dataclass(frozen=True)
class LearningCurvePoint:
    steps_observed: int
    eval_f1: float
    eval_em: float
    cumulative_regret: float
    positive_rate_so_far: float

    @property
    def average_regret(self) -> float:
        return self.cumulative_regret / self.steps_observed if self.steps_observed else 0.0


def _fmt(x: float) -> str:
    return format(x, ".17g")


def write_curve(points: Sequence[LearningCurvePoint], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for p in points:
            w.writerow(
                [
                    p.steps_observed,
                    _fmt(p.eval_f1),
                    _fmt(p.eval_em),
                    _fmt(p.cumulative_regret),
                    _fmt(p.average_regret),
                    _fmt(p.positive_rate_so_far),
                ]
            )


def read_curve(path: str | Path) -> list[LearningCurvePoint]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        LearningCurvePoint(
            int(r["steps"]), float(r["f1"]), float(r["em"]), float(r["cum_regret"]), float(r["positive_rate"])
        )
        for r in rows
    ]


def summary_row(run: str, curve: Sequence[LearningCurvePoint]) -> list[str]:
    first, last = curve[0], curve[-1]
    return [
        run,
        _fmt(first.eval_f1),
        _fmt(last.eval_f1),
        _fmt(last.eval_f1 - first.eval_f1),
        _fmt(first.eval_em),
        _fmt(last.eval_em),
        _fmt(last.eval_em - first.eval_em),
    ]


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0.0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise UndefinedStatistic("no values")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def write_summary(rows: Sequence[Sequence[str]], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)

