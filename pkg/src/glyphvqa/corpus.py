"""QA-pair curation: candidate generation, filter chain, translation gate.

The filter chain mirrors a three-stage funnel:

1. confidence: drop pairs whose self-rated confidence is below 7 (a score of
   exactly 7 is kept);
2. similarity: drop near-duplicate questions, keeping at most one pair out
   of any group whose pairwise Jaccard similarity exceeds 0.1 (survivor =
   highest confidence, then lexicographically smallest id);
3. consistency: re-answer every question and keep the pair if the normalized
   edit distance between the answers is at most 0.5, or failing that if the
   judge's consistency verdict scores at least 7.

All stages are deterministic given a deterministic QA client. Stage three is
the only one that talks to a backend, so its per-pair verdicts can be
checkpointed and a rerun after a transient failure resumes instead of
re-asking.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import QUESTION_TYPES, InvariantError, RecordError
from .providers import EmbeddingClient, PromptBundle, QAClient, fill_template

log = logging.getLogger(__name__)

PAIR_RECORD_VERSION = 1


@dataclass(frozen=True)
class CandidateQAPair:
    """A generated question/answer with its self-rated confidence."""

    pair_id: str
    question: str
    answer: str
    confidence: int
    qtype: str
    source_page_id: str = ""
    lang: str = "en"

    def __post_init__(self):
        if not self.pair_id:
            raise InvariantError("pair_id", "must be non-empty")
        if not self.question.strip():
            raise InvariantError("question", "must be non-empty")
        if not self.answer.strip():
            raise InvariantError("answer", "must be non-empty")
        if not isinstance(self.confidence, int) or not 1 <= self.confidence <= 10:
            raise InvariantError("confidence", "must be an integer in [1, 10]")
        if self.qtype not in QUESTION_TYPES:
            raise InvariantError("qtype", f"expected one of {QUESTION_TYPES}")


def pair_payload(pair: CandidateQAPair) -> dict:
    return {
        "v": PAIR_RECORD_VERSION,
        "id": pair.pair_id,
        "qtype": pair.qtype,
        "lang": pair.lang,
        "source_page_id": pair.source_page_id,
        "question": pair.question,
        "answer": pair.answer,
        "confidence": pair.confidence,
    }


def pair_from_payload(payload: Mapping) -> CandidateQAPair:
    try:
        return CandidateQAPair(
            pair_id=payload["id"],
            question=payload["question"],
            answer=payload["answer"],
            confidence=int(payload["confidence"]),
            qtype=payload["qtype"],
            source_page_id=payload.get("source_page_id", ""),
            lang=payload.get("lang", "en"),
        )
    except KeyError as exc:
        raise RecordError(f"pair record missing field {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class FilterStats:
    """Record counts after each funnel stage; never increasing."""

    origin: int
    post_confidence: int
    post_similarity: int
    post_consistency: int
    final: int

    def __post_init__(self):
        counts = (
            self.origin, self.post_confidence, self.post_similarity,
            self.post_consistency, self.final,
        )
        if any(c < 0 for c in counts):
            raise InvariantError("counts", "stage counts must be non-negative")
        if any(a < b for a, b in zip(counts, counts[1:])):
            raise InvariantError(
                "counts", f"funnel must be non-increasing, got {counts}"
            )

    def as_dict(self) -> dict:
        return {
            "origin": self.origin,
            "post_confidence": self.post_confidence,
            "post_similarity": self.post_similarity,
            "post_consistency": self.post_consistency,
            "final": self.final,
        }


@dataclass(frozen=True)
class FilterThresholds:
    min_confidence: int = 7
    max_jaccard: float = 0.1
    max_edit_ratio: float = 0.5
    min_consistency_score: int = 7


class StageError(RuntimeError):
    """A pipeline stage failed on a specific pair; reruns can resume."""

    def __init__(self, stage: str, pair_id: str, message: str, retryable: bool = True):
        super().__init__(f"stage {stage!r} failed on pair {pair_id!r}: {message}")
        self.stage = stage
        self.pair_id = pair_id
        self.retryable = retryable


# ---------------------------------------------------------------------------
# Filter math
# ---------------------------------------------------------------------------

def jaccard(a: Iterable, b: Iterable) -> float:
    """|A n B| / |A u B| over token sets; two empty sets count as identical."""
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def edit_distance(s1: str, s2: str) -> int:
    """Levenshtein distance with unit insert/delete/replace costs."""
    if s1 == s2:
        return 0
    if not s1:
        return len(s2)
    if not s2:
        return len(s1)
    prev = list(range(len(s2) + 1))
    for i, c1 in enumerate(s1, start=1):
        cur = [i]
        for j, c2 in enumerate(s2, start=1):
            cur.append(
                min(
                    prev[j] + 1,           # delete
                    cur[j - 1] + 1,        # insert
                    prev[j - 1] + (c1 != c2),  # replace
                )
            )
        prev = cur
    return prev[-1]


def question_tokens(text: str) -> frozenset[str]:
    """Lowercased whitespace tokens, the unit of the similarity filter."""
    return frozenset(text.lower().split())


def backtranslation_score(
    original: Sequence[str],
    roundtrip: Sequence[str],
    embedding_client: EmbeddingClient,
) -> float:
    """Mean over original tokens of the best cosine match in the round trip.

    Embeddings are expected unit-norm, making the result lie in [-1, 1]; an
    empty round trip scores 0 against a non-empty original.
    """
    original = list(original)
    if not original:
        raise ValueError("original token sequence must be non-empty")
    roundtrip = list(roundtrip)
    if not roundtrip:
        return 0.0
    rt = np.stack([embedding_client.embed(tok) for tok in roundtrip])
    total = 0.0
    for tok in original:
        total += float(np.max(rt @ embedding_client.embed(tok)))
    return total / len(original)


# ---------------------------------------------------------------------------
# Filter chain
# ---------------------------------------------------------------------------

def _confidence_stage(pairs, thresholds):
    return [p for p in pairs if p.confidence >= thresholds.min_confidence]


def _similarity_stage(pairs, thresholds):
    """Greedy dedup over the confidence-sorted stream; returns the kept set.

    Sorting by (confidence desc, id asc) before the greedy pass makes the
    survivors independent of input order: within any mutually similar group
    the highest-confidence pair wins, ties broken by smallest id.
    """
    ranked = sorted(pairs, key=lambda p: (-p.confidence, p.pair_id))
    kept_tokens: list[frozenset[str]] = []
    kept_ids: set[str] = set()
    for pair in ranked:
        toks = question_tokens(pair.question)
        if all(jaccard(toks, seen) <= thresholds.max_jaccard for seen in kept_tokens):
            kept_tokens.append(toks)
            kept_ids.add(pair.pair_id)
    return [p for p in pairs if p.pair_id in kept_ids]


def _consistency_verdict(pair, thresholds, qa_client) -> bool:
    try:
        re_answer = qa_client.reanswer(pair.question, pair.qtype, pair.lang)
    except Exception as exc:
        raise StageError("consistency", pair.pair_id, str(exc)) from exc
    denom = max(len(pair.answer), len(re_answer), 1)
    if edit_distance(pair.answer, re_answer) / denom <= thresholds.max_edit_ratio:
        return True
    try:
        score = qa_client.consistency_score(
            pair.question, pair.answer, re_answer, pair.lang
        )
    except Exception as exc:
        raise StageError("consistency", pair.pair_id, str(exc)) from exc
    return score >= thresholds.min_consistency_score


def run_filter_chain(
    pairs: Sequence[CandidateQAPair],
    thresholds: FilterThresholds,
    qa_client: QAClient,
    checkpoint_dir=None,
) -> tuple[list[CandidateQAPair], FilterStats]:
    """Apply the three funnel stages in order.

    With ``checkpoint_dir`` set, consistency verdicts are appended to a
    progress file as they are obtained; a rerun over the same directory
    skips already-judged pairs, so a chain interrupted by a backend failure
    finishes with the same output as an uninterrupted run.
    """
    ids = [p.pair_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise InvariantError("pair_id", "duplicate pair ids in input")

    after_conf = _confidence_stage(pairs, thresholds)
    after_sim = _similarity_stage(after_conf, thresholds)

    verdicts: dict[str, bool] = {}
    progress_path = None
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        progress_path = checkpoint_dir / "consistency_progress.jsonl"
        if progress_path.is_file():
            with open(progress_path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        entry = json.loads(line)
                        verdicts[entry["id"]] = bool(entry["kept"])

    kept = []
    for pair in after_sim:
        if pair.pair_id not in verdicts:
            verdict = _consistency_verdict(pair, thresholds, qa_client)
            verdicts[pair.pair_id] = verdict
            if progress_path is not None:
                with open(progress_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"id": pair.pair_id, "kept": verdict}))
                    fh.write("\n")
        if verdicts[pair.pair_id]:
            kept.append(pair)

    stats = FilterStats(
        origin=len(pairs),
        post_confidence=len(after_conf),
        post_similarity=len(after_sim),
        post_consistency=len(kept),
        final=len(kept),
    )
    return kept, stats


# ---------------------------------------------------------------------------
# Candidate generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuarantineRecord:
    """A model response fragment that failed parsing; kept for inspection."""

    raw: str
    reason: str
    source_page_id: str = ""
    qtype: str = ""
    lang: str = ""


_BRACE_BLOCK = re.compile(r"\{[^{}]*\}", re.DOTALL)


def _candidate_blocks(response: str) -> list[str]:
    return _BRACE_BLOCK.findall(response)


def generate_candidates(
    page_text: str,
    qtype: str,
    qa_client: QAClient,
    prompt_bundle: PromptBundle,
    lang: str = "en",
    source_page_id: str = "",
) -> tuple[list[CandidateQAPair], list[QuarantineRecord]]:
    """Prompt the QA client for candidate pairs over one page of text.

    The response must contain records of the form
    ``{"question": ..., "answer": ..., "confidence": ...}``; fragments that
    do not parse, or parse into invalid pairs, are quarantined rather than
    silently dropped.
    """
    template = prompt_bundle.get("generate", qtype, lang)
    prompt = fill_template(template, content=page_text)
    response = qa_client.generate(prompt)

    pairs: list[CandidateQAPair] = []
    quarantined: list[QuarantineRecord] = []

    def quarantine(raw: str, reason: str):
        log.warning("quarantined candidate from page %s: %s", source_page_id, reason)
        quarantined.append(
            QuarantineRecord(
                raw=raw, reason=reason,
                source_page_id=source_page_id, qtype=qtype, lang=lang,
            )
        )

    blocks = _candidate_blocks(response)
    if not blocks:
        quarantine(response, "no record structures found in response")
        return pairs, quarantined

    for block in blocks:
        try:
            payload = json.loads(block)
        except json.JSONDecodeError as exc:
            quarantine(block, f"unparseable record: {exc.msg}")
            continue
        missing = [k for k in ("question", "answer", "confidence") if k not in payload]
        if missing:
            quarantine(block, f"missing fields: {', '.join(missing)}")
            continue
        try:
            pair = CandidateQAPair(
                pair_id=f"{source_page_id}:{qtype}:{len(pairs):04d}",
                question=str(payload["question"]),
                answer=str(payload["answer"]),
                confidence=int(payload["confidence"]),
                qtype=qtype,
                source_page_id=source_page_id,
                lang=lang,
            )
        except (InvariantError, ValueError, TypeError) as exc:
            quarantine(block, f"invalid pair: {exc}")
            continue
        pairs.append(pair)
    return pairs, quarantined


# ---------------------------------------------------------------------------
# Translation gate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TranslationOutcome:
    accepted: bool
    translated: str
    back_translated: str
    score: float

    def review_payload(self, question: str, src_lang: str, tgt_lang: str) -> dict:
        return {
            "v": 1,
            "question": question,
            "src_lang": src_lang,
            "tgt_lang": tgt_lang,
            "translated": self.translated,
            "back_translated": self.back_translated,
            "score": self.score,
        }


def extend_multilingual(
    question: str,
    src_lang: str,
    tgt_lang: str,
    translation_client,
    embedding_client: EmbeddingClient,
    threshold: float = 0.8,
) -> TranslationOutcome:
    """Translate a question and gate it by round-trip similarity.

    The translation is accepted when the back-translation score is at least
    ``threshold`` (inclusive); otherwise the caller should queue the item
    for manual review.
    """
    try:
        translated = translation_client.translate(question, src_lang, tgt_lang)
        back = translation_client.translate(translated, tgt_lang, src_lang)
    except Exception as exc:
        raise StageError("translate", question, str(exc)) from exc
    score = backtranslation_score(
        question.split(), back.split(), embedding_client
    )
    return TranslationOutcome(
        accepted=score >= threshold,
        translated=translated,
        back_translated=back,
        score=score,
    )
