"""Span policies: a differentiable start/end scorer plus decoding.

A policy scores every context position twice (start logits and end logits).
Start and end distributions are independent softmaxes, so the probability of
span ``(i, j)`` is ``p_start(i) * p_end(j)``.  Subclasses supply ``score`` and
``backprop``; decoding, log-probabilities and their gradients are shared.
"""
from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels
from .dataset import Dataset, Example, Span, normalize_tokens

CHECKPOINT_VERSION = 1
DEFAULT_HASH_BITS = 18
FEATURE_FAMILIES = ("in_question", "norm_in_question", "position", "token", "prev_token", "next_token")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(text: str) -> int:
    """64-bit FNV-1a over the UTF-8 bytes of ``text``."""
    h = _FNV_OFFSET
    for b in text.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class PolicyConfig:
    max_span_len: int = 30
    mode: str = "argmax"

    def __post_init__(self):
        if self.max_span_len < 1:
            raise ValueError("max_span_len must be >= 1")
        if self.mode not in ("argmax", "sample"):
            raise ValueError(f"unknown decode mode {self.mode!r}")


class Prediction(NamedTuple):
    span: Span
    log_prob: float
    propensity: float


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x)
    shifted = x - m
    return shifted - math.log(np.sum(np.exp(shifted)))


def _window(n: int, start: int, max_len: int) -> slice:
    return slice(start, min(n, start + max_len))


class SpanPolicy(ABC):
    """Base class for differentiable span scorers over a flat parameter vector."""

    params: np.ndarray

    @abstractmethod
    def score(self, ex: Example) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(start_logits, end_logits)``, each of length ``len(ex.context)``."""

    @abstractmethod
    def backprop(
        self, ex: Example, d_start: np.ndarray, d_end: np.ndarray, out: np.ndarray, scale: float = 1.0
    ) -> None:
        """Add ``scale * J^T [d_start; d_end]`` to ``out``, J being d logits / d params."""

    @abstractmethod
    def copy(self) -> "SpanPolicy":
        ...

    def distributions(self, ex: Example) -> tuple[np.ndarray, np.ndarray]:
        start, end = self.score(ex)
        return log_softmax(start), log_softmax(end)

    def decode(self, ex: Example, cfg: PolicyConfig = PolicyConfig(), rng=None) -> Prediction:
        log_ps, log_pe = self.distributions(ex)
        if cfg.mode == "argmax":
            i, j = _kernels.best_span(log_ps, log_pe, cfg.max_span_len)
            lp = float(log_ps[i] + log_pe[j])
        else:
            if rng is None:
                raise ValueError("sample mode needs an rng")
            i = int(rng.choice(len(log_ps), p=np.exp(log_ps)))
            win = _window(len(log_pe), i, cfg.max_span_len)
            cond = log_softmax(log_pe[win])
            j = i + int(rng.choice(len(cond), p=np.exp(cond)))
            lp = float(log_ps[i] + cond[j - i])
        return Prediction(Span(int(i), int(j)), lp, math.exp(lp))

    def log_prob(self, ex: Example, span: Span, cfg: PolicyConfig = PolicyConfig()) -> float:
        """Log-probability of ``span`` under the distribution ``cfg.mode`` decodes from.

        In argmax mode this is ``log p_start(i) + log p_end(j)``; in sample mode
        the end term is renormalized over the ends reachable from ``i``.
        """
        log_ps, log_pe = self.distributions(ex)
        if cfg.mode == "sample":
            win = _window(len(log_pe), span.start, cfg.max_span_len)
            return float(log_ps[span.start] + log_softmax(log_pe[win])[span.end - span.start])
        return float(log_ps[span.start] + log_pe[span.end])

    def accumulate_log_prob_grad(
        self,
        ex: Example,
        span: Span,
        out: np.ndarray,
        scale: float = 1.0,
        cfg: PolicyConfig = PolicyConfig(),
    ) -> None:
        """``out += scale * grad log pi(span | ex)``."""
        log_ps, log_pe = self.distributions(ex)
        d_start = -np.exp(log_ps)
        d_start[span.start] += 1.0
        if cfg.mode == "sample":
            win = _window(len(log_pe), span.start, cfg.max_span_len)
            d_end = np.zeros_like(log_pe)
            d_end[win] = -np.exp(log_softmax(log_pe[win]))
        else:
            d_end = -np.exp(log_pe)
        d_end[span.end] += 1.0
        self.backprop(ex, d_start, d_end, out, scale)

    def log_prob_grad(self, ex: Example, span: Span, cfg: PolicyConfig = PolicyConfig()) -> np.ndarray:
        out = np.zeros_like(self.params)
        self.accumulate_log_prob_grad(ex, span, out, 1.0, cfg)
        return out


class Features(NamedTuple):
    """Per-position sparse features in CSR layout (``rows`` repeats row ids)."""

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    rows: np.ndarray


def _position_bucket(i: int) -> int:
    return i if i < 4 else 2 + int(math.log2(i))


def feature_strings(ex: Example, families: Sequence[str]) -> list[list[str]]:
    """Feature names for every context position of ``ex``."""
    ctx = ex.context
    n = len(ctx)
    qset = set(ex.question)
    nq = set(normalize_tokens(ex.question))
    norm = [tuple(normalize_tokens([t])) for t in ctx]
    rows = []
    for i in range(n):
        feats = []
        for off in (-1, 0, 1):
            k = i + off
            if not 0 <= k < n:
                continue
            if "in_question" in families and ctx[k] in qset:
                feats.append(f"inq{off:+d}")
            if "norm_in_question" in families and norm[k] and all(t in nq for t in norm[k]):
                feats.append(f"ninq{off:+d}")
        if "position" in families:
            feats.append(f"pos:{_position_bucket(i)}")
        if "token" in families:
            feats.append(f"tok:{ctx[i]}")
        if "prev_token" in families:
            feats.append(f"prev:{ctx[i - 1] if i > 0 else '<s>'}")
        if "next_token" in families:
            feats.append(f"next:{ctx[i + 1] if i + 1 < n else '</s>'}")
        rows.append(feats)
    return rows


class LinearSpanPolicy(SpanPolicy):
    """Linear start/end scorer over hashed indicator features.

    ``params`` holds the start weights followed by the end weights, each a
    block of ``2 ** hash_bits`` entries.  Feature names hash with 64-bit
    FNV-1a reduced modulo the block size.
    """

    def __init__(
        self,
        hash_bits: int = DEFAULT_HASH_BITS,
        features: Sequence[str] = FEATURE_FAMILIES,
        params: np.ndarray | None = None,
        _cache: dict | None = None,
    ):
        unknown = set(features) - set(FEATURE_FAMILIES)
        if unknown:
            raise ValueError(f"unknown feature families: {sorted(unknown)}")
        self.hash_bits = int(hash_bits)
        self.dim = 1 << self.hash_bits
        self.features = tuple(features)
        if params is None:
            params = np.zeros(2 * self.dim)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (2 * self.dim,):
            raise ValueError(f"params must have shape ({2 * self.dim},)")
        self.params = params
        self._cache = {} if _cache is None else _cache
        self._hashes: dict[str, int] = {}

    def _hash(self, name: str) -> int:
        h = self._hashes.get(name)
        if h is None:
            h = self._hashes[name] = fnv1a_64(name) % self.dim
        return h

    def featurize(self, ex: Example) -> Features:
        key = (ex.id, ex.question, ex.context)
        feats = self._cache.get(key)
        if feats is None:
            names = feature_strings(ex, self.features)
            counts = [len(r) for r in names]
            indptr = np.zeros(len(names) + 1, dtype=np.int64)
            np.cumsum(counts, out=indptr[1:])
            indices = np.array([self._hash(f) for r in names for f in r], dtype=np.int64)
            values = np.ones(len(indices))
            rows = np.repeat(np.arange(len(names), dtype=np.int64), counts)
            feats = self._cache[key] = Features(indptr, indices, values, rows)
        return feats

    def clear_cache(self) -> None:
        self._cache.clear()

    def score(self, ex):
        f = self.featurize(ex)
        start = _kernels.csr_rowdot(f.indptr, f.indices, f.values, f.rows, self.params, 0)
        end = _kernels.csr_rowdot(f.indptr, f.indices, f.values, f.rows, self.params, self.dim)
        return start, end

    def backprop(self, ex, d_start, d_end, out, scale=1.0):
        f = self.featurize(ex)
        _kernels.csr_scatter_add(f.indptr, f.indices, f.values, f.rows, scale * d_start, out, 0)
        _kernels.csr_scatter_add(f.indptr, f.indices, f.values, f.rows, scale * d_end, out, self.dim)

    def copy(self) -> "LinearSpanPolicy":
        return LinearSpanPolicy(self.hash_bits, self.features, self.params.copy(), _cache=self._cache)

    def save(self, path: str | Path) -> None:
        meta = {
            "format": "spanbandit.linear",
            "version": CHECKPOINT_VERSION,
            "hash_bits": self.hash_bits,
            "hash": "fnv1a64",
            "features": list(self.features),
        }
        with Path(path).open("wb") as fh:
            np.savez(fh, params=self.params, meta=np.array(json.dumps(meta, sort_keys=True)))

    @classmethod
    def load(cls, path: str | Path) -> "LinearSpanPolicy":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            params = data["params"].copy()
        if meta.get("format") != "spanbandit.linear":
            raise ValueError(f"{path}: not a linear span policy checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        return cls(meta["hash_bits"], meta["features"], params)


# ---------------------------------------------------------------------------
# supervised initialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SupInitConfig:
    epochs: int = 10
    lr: float = 0.5
    batch_size: int = 10
    seed: int = 0
    schedule: str = "linear"
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.schedule not in ("linear", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def linear_lr(base: float, step: int, total: int) -> float:
    return base * (1.0 - step / total)


def supervised_init(
    policy: SpanPolicy,
    train: Dataset,
    cfg: SupInitConfig = SupInitConfig(),
    loss_log: list | None = None,
) -> SpanPolicy:
    """Fit ``policy`` to the gold spans of ``train`` by mini-batch ascent on mean log-likelihood.

    Returns a new policy; the input is left untouched.  If ``loss_log`` is
    given, the mean negative log-likelihood at the start of every epoch and
    after the last one is appended to it.
    """
    if len(train) == 0:
        raise ValueError("supervised_init needs a non-empty training set")
    policy = policy.copy()
    rng = np.random.default_rng(cfg.seed)
    n = len(train)
    n_batches = -(-n // cfg.batch_size)
    total = cfg.epochs * n_batches
    buf = np.zeros_like(policy.params)
    step = 0
    for _ in range(cfg.epochs):
        if loss_log is not None:
            loss_log.append(mean_nll(policy, train))
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for b in range(n_batches):
            batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            buf[:] = 0.0
            for idx in batch:
                ex = train[int(idx)]
                policy.accumulate_log_prob_grad(ex, ex.gold_span, buf)
            lr = linear_lr(cfg.lr, step, total) if cfg.schedule == "linear" else cfg.lr
            policy.params += (lr / len(batch)) * buf
            step += 1
    if loss_log is not None and cfg.epochs:
        loss_log.append(mean_nll(policy, train))
    return policy


def mean_nll(policy: SpanPolicy, data: Dataset) -> float:
    return -float(np.mean([policy.log_prob(ex, ex.gold_span) for ex in data]))
