"""Annotated span datasets: loading, synthesis, sampling, normalization.

Spans are 0-indexed and inclusive on both ends, everywhere (in memory and in
files).  Tokenization splits on whitespace and splits each punctuation
character off as its own token.
"""
from __future__ import annotations

import json
import logging
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_MAX_CONTEXT_TOKENS = 800
ARTICLES = frozenset({"a", "an", "the"})

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class DatasetError(ValueError):
    """Raised for malformed dataset files or invalid dataset operations."""


@dataclass(frozen=True)
class Span:
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid span ({self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start + 1

    def fits(self, n: int) -> bool:
        return self.end < n


@dataclass(frozen=True)
class Example:
    """One question/context pair.

    ``gold_span`` is the span used by the reward simulator; ``answers`` holds
    every annotated span (``answers[0] == gold_span``) for evaluation.
    """

    id: str
    question: tuple[str, ...]
    context: tuple[str, ...]
    gold_span: Span
    answers: tuple[Span, ...] = ()

    def __post_init__(self):
        if not self.question:
            raise ValueError(f"example {self.id!r}: empty question")
        if not self.context:
            raise ValueError(f"example {self.id!r}: empty context")
        if not self.answers:
            object.__setattr__(self, "answers", (self.gold_span,))
        n = len(self.context)
        for span in self.answers:
            if not span.fits(n):
                raise ValueError(
                    f"example {self.id!r}: span ({span.start}, {span.end}) "
                    f"outside context of length {n}"
                )
        if self.answers[0] != self.gold_span:
            raise ValueError(f"example {self.id!r}: answers[0] must be gold_span")

    def span_tokens(self, span: Span) -> tuple[str, ...]:
        return self.context[span.start : span.end + 1]


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]
    name: str = ""
    n_dropped: int = 0
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        examples = tuple(self.examples)
        object.__setattr__(self, "examples", examples)
        index = {}
        for i, ex in enumerate(examples):
            if ex.id in index:
                raise DatasetError(f"duplicate example id {ex.id!r} in {self.name!r}")
            index[ex.id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, i: int) -> Example:
        return self.examples[i]

    @property
    def ids(self) -> list[str]:
        return [ex.id for ex in self.examples]

    def by_id(self, example_id: str) -> Example:
        try:
            return self.examples[self._index[example_id]]
        except KeyError:
            raise KeyError(f"unknown example id {example_id!r}") from None

    def subset(self, indices: Iterable[int], name: str | None = None) -> "Dataset":
        return Dataset(
            tuple(self.examples[i] for i in indices),
            name=self.name if name is None else name,
        )


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def normalize_tokens(tokens: Sequence[str]) -> list[str]:
    """Lowercase, strip punctuation, collapse whitespace and drop articles."""
    text = " ".join(tok.lower().translate(_PUNCT_TABLE) for tok in tokens)
    return [tok for tok in text.split() if tok not in ARTICLES]


# ---------------------------------------------------------------------------
# MRQA-style JSON lines
# ---------------------------------------------------------------------------


def _parse_record(record: dict, max_context_tokens: int) -> Example | None:
    ex_id = record["id"]
    if not isinstance(ex_id, str):
        raise TypeError("'id' must be a string")
    question = tuple(tokenize(record["question"]))
    context = tuple(tokenize(record["context"]))
    answers = record["answers"]
    if not isinstance(answers, list) or not answers:
        raise ValueError("'answers' must be a non-empty list")
    spans = []
    for ans in answers:
        start, end = ans["token_start"], ans["token_end"]
        if not (isinstance(start, int) and isinstance(end, int)):
            raise TypeError("token_start/token_end must be integers")
        if not 0 <= start <= end < len(context):
            raise ValueError(
                f"answer span ({start}, {end}) outside context of {len(context)} tokens"
            )
        spans.append(Span(start, end))
    context = context[:max_context_tokens]
    if not spans[0].fits(len(context)):
        return None
    kept = tuple(s for s in spans if s.fits(len(context)))
    return Example(ex_id, question, context, kept[0], kept)


def load_mrqa(
    path: str | Path,
    max_context_tokens: int = DEFAULT_MAX_CONTEXT_TOKENS,
    name: str | None = None,
) -> Dataset:
    """Read a JSON-lines file of ``{id, question, context, answers}`` records.

    Contexts are truncated to ``max_context_tokens``; records whose first
    answer no longer fits are dropped and counted in ``Dataset.n_dropped``.
    """
    path = Path(path)
    examples = []
    dropped = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                ex = _parse_record(json.loads(line), max_context_tokens)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise DatasetError(f"{path}:{lineno}: malformed record: {err}") from err
            if ex is None:
                dropped += 1
            else:
                examples.append(ex)
    if dropped:
        logger.info("%s: dropped %d examples with answers past truncation", path, dropped)
    return Dataset(tuple(examples), name=name or path.stem, n_dropped=dropped)


def write_mrqa(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset in the format read by :func:`load_mrqa`.

    Token sequences are joined with single spaces, which re-tokenizes to the
    same tokens for any sequence produced by :func:`tokenize`.
    """
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in dataset:
            record = {
                "id": ex.id,
                "question": " ".join(ex.question),
                "context": " ".join(ex.context),
                "answers": [
                    {
                        "text": " ".join(ex.span_tokens(s)),
                        "token_start": s.start,
                        "token_end": s.end,
                    }
                    for s in ex.answers
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic key-token span task.

    Each context holds ``1 + n_decoys`` units ``k a_1 .. a_m k`` (an answer
    block bracketed by two copies of a key token) scattered among filler
    words, and the question names every one of those keys.  A fixed half of the key
    inventory is *active* (drawn once per ``grammar_seed``); each example has
    exactly one active key among its units, and the gold span is that key's
    block.  Telling the active key apart is lexical knowledge about the key
    itself, so it has to be learned key by key.

    ``vocab_size`` counts every token type: ``n_keys`` keys plus the
    remaining filler words.  ``domain`` prefixes the filler words (keys are
    shared across domains); a different ``grammar_seed`` redraws the active
    set.  ``question_overlap`` copies that many filler words from
    the context into the question.
    """

    vocab_size: int = 200
    n_examples: int = 1000
    context_length: int = 40
    seed: int = 0
    n_keys: int = 70
    n_decoys: int = 2
    question_overlap: int = 0
    answer_len: tuple[int, int] = (1, 3)
    domain: str = "a"
    grammar_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "answer_len", tuple(self.answer_len))
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        if self.context_length < 2:
            raise ValueError("context_length must be >= 2")
        if self.n_examples < 0:
            raise ValueError("n_examples must be >= 0")
        if self.n_decoys < 0 or self.question_overlap < 0:
            raise ValueError("n_decoys and question_overlap must be >= 0")
        lo, hi = self.answer_len
        if not 1 <= lo <= hi:
            raise ValueError("answer_len must satisfy 1 <= lo <= hi")
        if not re.fullmatch(r"[a-z]+", self.domain):
            raise ValueError("domain must be lowercase ascii letters")

    @property
    def key_count(self) -> int:
        # at least two keys (one active, one inactive) and one filler word
        return max(2, min(self.n_keys, self.vocab_size - 1))

    def active_keys(self) -> np.ndarray:
        """Boolean mask over key ids; exactly half (rounded up) are active."""
        n = self.key_count
        rng = np.random.default_rng([self.grammar_seed, 0x5EED])
        mask = np.zeros(n, dtype=bool)
        mask[rng.permutation(n)[: (n + 1) // 2]] = True
        return mask


_KEY_RE = re.compile(r"k\d+")


def synth_task(spec: SynthSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    n_words = spec.vocab_size - spec.key_count
    words = [f"{spec.domain}w{w}" for w in range(n_words)]
    active = spec.active_keys()
    on, off = np.flatnonzero(active), np.flatnonzero(~active)
    qwords = ("what", "goes", "with")
    L = spec.context_length
    lo, hi = spec.answer_len

    examples = []
    for e in range(spec.n_examples):
        key = int(rng.choice(on))
        n_dec = min(spec.n_decoys, len(off))
        decoys = [int(k) for k in rng.choice(off, size=n_dec, replace=False)]
        lengths = [int(x) for x in rng.integers(lo, hi + 1, size=1 + n_dec)]
        # shrink until the units fit: drop decoys, shorten answers, and as a
        # last resort (contexts of 2) drop the gold unit's closer
        while sum(lengths) + 2 * len(lengths) > L and len(lengths) > 1:
            lengths.pop()
            decoys.pop()
        while lengths[0] + 2 > L and lengths[0] > 1:
            lengths[0] -= 1
        gold_closed = lengths[0] + 2 <= L
        units = []
        for u, (k, m) in enumerate(zip([key] + decoys, lengths)):
            body = [f"k{k}"] + [words[i] for i in rng.integers(0, n_words, size=m)]
            if u > 0 or gold_closed:
                body.append(f"k{k}")
            units.append(body)
        order = rng.permutation(len(units))
        gaps = rng.multinomial(L - sum(map(len, units)), [1.0 / (len(units) + 1)] * (len(units) + 1))
        ctx: list[str] = []
        gold = None
        for slot, u in enumerate(order):
            ctx.extend(words[i] for i in rng.integers(0, n_words, size=gaps[slot]))
            if u == 0:
                gold = Span(len(ctx) + 1, len(ctx) + lengths[0])
            ctx.extend(units[u])
        ctx.extend(words[i] for i in rng.integers(0, n_words, size=gaps[-1]))
        plain = sorted(set(ctx) & set(words))
        n_ov = min(spec.question_overlap, len(plain))
        overlap = [plain[i] for i in rng.choice(len(plain), size=n_ov, replace=False)] if n_ov else []
        question = list(qwords) + [f"k{k}" for k in [key] + decoys] + overlap
        question = [question[i] for i in rng.permutation(len(question))]
        examples.append(
            Example(
                id=f"{spec.domain}-{spec.seed}-{e}",
                question=tuple(question),
                context=tuple(ctx),
                gold_span=gold,
            )
        )
    return Dataset(tuple(examples), name=f"synth-{spec.domain}")


def resolve_synth(ex: Example, spec: SynthSpec) -> Span:
    """Recover the gold span of a synthetic example from its surface tokens.

    Finds the single active key named by the question and occurring in the
    context, and returns the tokens between its first occurrence and the
    next one (or the end of the context).
    """
    active = spec.active_keys()
    qkeys = {t for t in ex.question if _KEY_RE.fullmatch(t) and active[int(t[1:])]}
    hits = [i for i, t in enumerate(ex.context) if t in qkeys]
    if not 1 <= len(hits) <= 2 or len({ex.context[i] for i in hits}) != 1:
        raise ValueError(f"{ex.id}: expected one active key, found {hits}")
    start = hits[0] + 1
    end = hits[1] - 1 if len(hits) == 2 else len(ex.context) - 1
    return Span(start, end)


def few_shot_subset(dataset: Dataset, k: int, seed: int) -> Dataset:
    """Sample ``k`` examples without replacement, keeping dataset order."""
    if k < 0 or k > len(dataset):
        raise DatasetError(f"cannot sample {k} examples from {len(dataset)}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(dataset), size=k, replace=False))
    return dataset.subset(chosen.tolist())
