"""Shared domain types and the versioned line-oriented record format.

Every type here is an immutable value object: numpy payloads are copied on
construction and marked read-only, so instances can be shared freely across
worker threads or processes.

Record format (one JSON object per line, UTF-8). Field order is fixed so that
serialization round-trips byte-exactly. See README section "Record formats"
for the field-by-field description.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

RECORD_VERSION = 1

QUESTION_TYPES = ("extractive", "abstractive", "yesno")


class InvariantError(ValueError):
    """A domain object violates one of its declared invariants."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


class RecordError(ValueError):
    """A serialized record cannot be parsed."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (position {position})"
        super().__init__(message)
        self.position = position


class AlignmentError(ValueError):
    """Two sequences that must be index-aligned have different lengths."""


class ConfigurationError(ValueError):
    """A configuration is internally inconsistent or infeasible."""


class NumericalError(RuntimeError):
    """A computation produced a non-finite value."""


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LanguageTag:
    """Opaque language identifier; equality is exact string match."""

    code: str

    def __post_init__(self):
        if not self.code:
            raise InvariantError("code", "language code must be non-empty")


@dataclass(frozen=True, eq=False)
class GlyphImage:
    """A text-bearing image as a grid of glyph identifiers.

    Cells hold integers in [0, glyph_vocab); glyph 0 is conventionally blank.
    """

    grid: np.ndarray
    width: int
    height: int
    glyph_vocab: int

    def __eq__(self, other):
        if not isinstance(other, GlyphImage):
            return NotImplemented
        return (
            (self.width, self.height, self.glyph_vocab)
            == (other.width, other.height, other.glyph_vocab)
            and np.array_equal(self.grid, other.grid)
        )

    def __hash__(self):
        return hash((self.width, self.height, self.glyph_vocab, self.grid.tobytes()))

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvariantError("width", "grid dimensions must be positive")
        if self.glyph_vocab <= 0:
            raise InvariantError("glyph_vocab", "glyph vocabulary must be positive")
        grid = _frozen_array(self.grid, dtype=np.int64)
        if grid.shape != (self.height, self.width):
            raise InvariantError(
                "grid",
                f"shape {grid.shape} does not match height x width "
                f"({self.height}, {self.width})",
            )
        if grid.min(initial=0) < 0 or grid.max(initial=0) >= self.glyph_vocab:
            raise InvariantError(
                "grid", f"glyph ids must lie in [0, {self.glyph_vocab})"
            )
        object.__setattr__(self, "grid", grid)

    def cells_row_major(self) -> np.ndarray:
        return self.grid.reshape(-1)


@dataclass(frozen=True, eq=False)
class VisualTokens:
    """A sequence of fixed-dimension visual embeddings."""

    embeddings: np.ndarray
    noisy: bool = False

    def __eq__(self, other):
        if not isinstance(other, VisualTokens):
            return NotImplemented
        return self.noisy == other.noisy and np.array_equal(
            self.embeddings, other.embeddings
        )

    def __hash__(self):
        return hash((self.noisy, self.embeddings.tobytes()))

    def __post_init__(self):
        emb = _frozen_array(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise InvariantError(
                "embeddings", "expected a non-empty 2-D array of token vectors"
            )
        object.__setattr__(self, "embeddings", emb)

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class NoiseSpec:
    """Parameters of the Gaussian corruption used for the no-image baseline."""

    mean: float = 0.0
    stddev: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.stddev < 0:
            raise InvariantError("stddev", "standard deviation must be >= 0")


@dataclass(frozen=True)
class VQASample:
    """One question over one glyph image, with its gold answer."""

    image: GlyphImage
    question: tuple[int, ...]
    question_lang: LanguageTag
    gold_answer: tuple[int, ...]
    answer_lang: LanguageTag
    qtype: str
    sample_id: str

    def __post_init__(self):
        object.__setattr__(self, "question", tuple(int(t) for t in self.question))
        object.__setattr__(
            self, "gold_answer", tuple(int(t) for t in self.gold_answer)
        )
        if not self.question:
            raise InvariantError("question", "question must be non-empty")
        if not self.gold_answer:
            raise InvariantError("gold_answer", "gold answer must be non-empty")
        if self.qtype not in QUESTION_TYPES:
            raise InvariantError(
                "qtype", f"unknown question type {self.qtype!r}; "
                f"expected one of {QUESTION_TYPES}"
            )
        if not self.sample_id:
            raise InvariantError("sample_id", "sample id must be non-empty")


_PROB_SUM_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class StepDistribution:
    """Probability vector over the token vocabulary for one generation step."""

    probs: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, StepDistribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())

    def __post_init__(self):
        probs = _frozen_array(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise InvariantError("probs", "expected a non-empty 1-D vector")
        if probs.min() < 0:
            raise InvariantError("probs", "probabilities must be non-negative")
        total = float(probs.sum())
        if abs(total - 1.0) > _PROB_SUM_TOL:
            raise InvariantError(
                "probs", f"probabilities sum to {total!r}, expected 1 within "
                f"{_PROB_SUM_TOL}"
            )
        object.__setattr__(self, "probs", probs)

    @property
    def vocab_size(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class SequenceDistribution:
    """Per-step distributions of a generated sequence plus the emitted tokens."""

    steps: tuple[StepDistribution, ...]
    realized_tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(
            self, "realized_tokens", tuple(int(t) for t in self.realized_tokens)
        )
        if len(self.steps) != len(self.realized_tokens):
            raise InvariantError(
                "realized_tokens",
                f"{len(self.realized_tokens)} tokens for {len(self.steps)} steps",
            )
        for i, (step, tok) in enumerate(zip(self.steps, self.realized_tokens)):
            if not 0 <= tok < step.vocab_size:
                raise InvariantError(
                    "realized_tokens", f"token {tok} out of vocabulary at step {i}"
                )
            if step.probs[tok] <= 0.0:
                raise InvariantError(
                    "realized_tokens",
                    f"realized token {tok} has zero probability at step {i}",
                )

    def __len__(self) -> int:
        return len(self.steps)

    def matrix(self) -> np.ndarray:
        """Steps stacked as a (length, vocab) array; empty gives shape (0, 0)."""
        if not self.steps:
            return np.zeros((0, 0))
        return np.stack([s.probs for s in self.steps])


_MI_TOL = 1e-9


@dataclass(frozen=True)
class MIReport:
    """Entropy bookkeeping for one sample: noise baseline, conditional, and MI.

    ``mi`` is an estimator difference and may be negative. ``cond_len`` and
    ``uncond_len`` record the lengths of the underlying decoded sequences so
    per-token means can be reconstructed.
    """

    sample_id: str
    h_uncond: float
    h_cond: float
    mi: float
    correct: bool
    cond_len: int = 0
    uncond_len: int = 0

    def __post_init__(self):
        if self.h_uncond < 0:
            raise InvariantError("h_uncond", "entropy must be non-negative")
        if self.h_cond < 0:
            raise InvariantError("h_cond", "entropy must be non-negative")
        if abs(self.mi - (self.h_uncond - self.h_cond)) > _MI_TOL:
            raise InvariantError(
                "mi", "mi must equal h_uncond - h_cond within 1e-9"
            )

    def h_cond_per_token(self) -> float:
        return self.h_cond / self.cond_len if self.cond_len else 0.0


# ---------------------------------------------------------------------------
# Line-oriented record format
# ---------------------------------------------------------------------------

def _dump_line(payload: dict) -> str:
    # Insertion order of the payload dict fixes the on-disk field order.
    return json.dumps(payload, ensure_ascii=False, separators=(", ", ": "))


def serialize_sample(sample: VQASample) -> str:
    """Encode a sample as one JSON line; inverse of :func:`deserialize_sample`."""
    payload = {
        "v": RECORD_VERSION,
        "id": sample.sample_id,
        "qtype": sample.qtype,
        "question_lang": sample.question_lang.code,
        "answer_lang": sample.answer_lang.code,
        "question": list(sample.question),
        "gold_answer": list(sample.gold_answer),
        "image": {
            "width": sample.image.width,
            "height": sample.image.height,
            "glyph_vocab": sample.image.glyph_vocab,
            "grid": sample.image.grid.tolist(),
        },
    }
    return _dump_line(payload)


_SAMPLE_FIELDS = (
    "v", "id", "qtype", "question_lang", "answer_lang",
    "question", "gold_answer", "image",
)


def deserialize_sample(record: str) -> VQASample:
    """Parse one record line back into a :class:`VQASample`.

    Malformed JSON raises :class:`RecordError` with the character position;
    well-formed records that violate type invariants raise
    :class:`InvariantError` naming the offending field.
    """
    try:
        payload = json.loads(record)
    except json.JSONDecodeError as exc:
        raise RecordError(f"malformed record: {exc.msg}", position=exc.pos) from exc
    if not isinstance(payload, dict):
        raise RecordError("record is not a JSON object")
    missing = [f for f in _SAMPLE_FIELDS if f not in payload]
    if missing:
        raise RecordError(f"record missing fields: {', '.join(missing)}")
    if payload["v"] != RECORD_VERSION:
        raise RecordError(f"unsupported record version {payload['v']!r}")
    img = payload["image"]
    for f in ("width", "height", "glyph_vocab", "grid"):
        if f not in img:
            raise RecordError(f"image record missing field: {f}")
    image = GlyphImage(
        grid=np.array(img["grid"], dtype=np.int64),
        width=img["width"],
        height=img["height"],
        glyph_vocab=img["glyph_vocab"],
    )
    return VQASample(
        image=image,
        question=tuple(payload["question"]),
        question_lang=LanguageTag(payload["question_lang"]),
        gold_answer=tuple(payload["gold_answer"]),
        answer_lang=LanguageTag(payload["answer_lang"]),
        qtype=payload["qtype"],
        sample_id=payload["id"],
    )


def write_sample_records(samples: Iterable[VQASample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(serialize_sample(sample))
            fh.write("\n")


def read_sample_records(path) -> list[VQASample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(deserialize_sample(line))
    return out


def write_json_records(payloads: Iterable[Mapping], path) -> None:
    """Write pre-ordered dict payloads as JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for payload in payloads:
            fh.write(_dump_line(dict(payload)))
            fh.write("\n")


def read_json_records(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise RecordError(
                    f"malformed record on line {i + 1}: {exc.msg}", position=exc.pos
                ) from exc
    return out
