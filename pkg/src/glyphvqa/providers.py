"""Provider interfaces for external services, with deterministic mocks.

The curation pipeline talks to four kinds of services: OCR, a QA-generation
model, a sentence-embedding model, and a translator. Real adapters are a
deployment concern and are deliberately absent here; every interface ships a
deterministic mock so the pipeline is fully testable offline.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np


class OcrClient(Protocol):
    def page_text(self, page_id: str) -> str: ...


class QAClient(Protocol):
    def generate(self, prompt: str) -> str: ...

    def reanswer(self, question: str, qtype: str, lang: str) -> str: ...

    def consistency_score(
        self, question: str, answer_a: str, answer_b: str, lang: str
    ) -> int: ...


class EmbeddingClient(Protocol):
    def embed(self, token: str) -> np.ndarray: ...


class TranslationClient(Protocol):
    def translate(self, text: str, src_lang: str, tgt_lang: str) -> str: ...


@dataclass(frozen=True)
class ProviderSuite:
    """The four service handles the pipeline needs."""

    ocr_client: OcrClient
    qa_client: QAClient
    embedding_client: EmbeddingClient
    translation_client: TranslationClient


def _digest(*parts: object) -> bytes:
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return hashlib.sha256(payload).digest()


def _digest_rng(*parts: object) -> np.random.Generator:
    seed = int.from_bytes(_digest(*parts)[:8], "big")
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Mocks
# ---------------------------------------------------------------------------

@dataclass
class MockOcrClient:
    pages: Mapping[str, str]

    def page_text(self, page_id: str) -> str:
        if page_id not in self.pages:
            raise KeyError(f"unknown page {page_id!r}")
        return self.pages[page_id]


class ScriptedQAClient:
    """Fully scripted QA client for tests.

    ``generate_responses`` are returned in call order. ``reanswers`` maps a
    question to its re-answer (missing questions echo the question itself).
    ``consistency_scores`` maps (answer_a, answer_b) to a verdict score.
    Questions listed in ``fail_once`` raise on their first reanswer call and
    succeed afterwards, which is how the resumability tests inject a flaky
    stage.
    """

    def __init__(
        self,
        generate_responses: Sequence[str] = (),
        reanswers: Mapping[str, str] | None = None,
        consistency_scores: Mapping[tuple[str, str], int] | None = None,
        default_consistency: int = 10,
        fail_once: Sequence[str] = (),
    ):
        self._generate = list(generate_responses)
        self._generate_calls = 0
        self.reanswers = dict(reanswers or {})
        self.consistency_scores = dict(consistency_scores or {})
        self.default_consistency = default_consistency
        self._pending_failures = set(fail_once)

    def generate(self, prompt: str) -> str:
        if self._generate_calls >= len(self._generate):
            raise RuntimeError("no scripted response left")
        out = self._generate[self._generate_calls]
        self._generate_calls += 1
        return out

    def reanswer(self, question: str, qtype: str, lang: str) -> str:
        if question in self._pending_failures:
            self._pending_failures.discard(question)
            raise RuntimeError(f"transient backend failure for {question!r}")
        return self.reanswers.get(question, question)

    def consistency_score(
        self, question: str, answer_a: str, answer_b: str, lang: str
    ) -> int:
        return self.consistency_scores.get(
            (answer_a, answer_b), self.default_consistency
        )


@dataclass
class SeededQAClient:
    """Hash-driven pseudo model: deterministic, stateless across calls."""

    seed: int = 0
    pairs_per_page: int = 4

    def generate(self, prompt: str) -> str:
        rng = _digest_rng("generate", self.seed, prompt)
        lines = []
        for i in range(self.pairs_per_page):
            tag = _digest("qa", self.seed, prompt, i).hex()[:6]
            record = {
                "question": f"what does item {tag} describe",
                "answer": f"finding {tag}",
                "confidence": int(rng.integers(4, 11)),
            }
            lines.append(json.dumps(record))
        return "\n".join(lines)

    def reanswer(self, question: str, qtype: str, lang: str) -> str:
        rng = _digest_rng("reanswer", self.seed, question)
        # Mostly repeat the canonical answer form; sometimes drift.
        tag = question.split()[-2] if len(question.split()) >= 2 else "unknown"
        if rng.random() < 0.75:
            return f"finding {tag}"
        return f"different result {tag}"

    def consistency_score(
        self, question: str, answer_a: str, answer_b: str, lang: str
    ) -> int:
        rng = _digest_rng("consistency", self.seed, question, answer_a, answer_b)
        return int(rng.integers(1, 11))


@dataclass
class HashEmbeddingClient:
    """Near-orthogonal unit vectors derived from a token's hash."""

    dim: int = 16

    def embed(self, token: str) -> np.ndarray:
        rng = _digest_rng("embed", self.dim, token)
        v = rng.normal(size=self.dim)
        return v / np.linalg.norm(v)


@dataclass
class BasisEmbeddingClient:
    """Exactly orthogonal embeddings: each known token gets a basis axis."""

    axes: Mapping[str, int]
    dim: int

    def embed(self, token: str) -> np.ndarray:
        v = np.zeros(self.dim)
        v[self.axes[token]] = 1.0
        return v


@dataclass
class IdentityTranslationClient:
    def translate(self, text: str, src_lang: str, tgt_lang: str) -> str:
        return text


@dataclass
class DictionaryTranslationClient:
    """Word-by-word translation via per-direction dictionaries.

    ``tables[(src, tgt)]`` maps words; unknown words pass through unchanged.
    """

    tables: Mapping[tuple[str, str], Mapping[str, str]]

    def translate(self, text: str, src_lang: str, tgt_lang: str) -> str:
        table = self.tables.get((src_lang, tgt_lang), {})
        return " ".join(table.get(w, w) for w in text.split())


@dataclass
class ScramblingTranslationClient:
    """Destructive mock: replaces every word with a hash token.

    Round trips through this client share no tokens with the original, which
    is the failure mode the back-translation gate exists to catch.
    """

    seed: int = 0

    def translate(self, text: str, src_lang: str, tgt_lang: str) -> str:
        out = []
        for w in text.split():
            out.append("x" + _digest("scramble", self.seed, src_lang, tgt_lang, w).hex()[:6])
        return " ".join(out)


def mock_provider_suite(seed: int = 0, pages: Mapping[str, str] | None = None) -> ProviderSuite:
    """Deterministic all-mock suite, the default for CLI runs and demos."""
    return ProviderSuite(
        ocr_client=MockOcrClient(pages=dict(pages or {})),
        qa_client=SeededQAClient(seed=seed),
        embedding_client=HashEmbeddingClient(),
        translation_client=IdentityTranslationClient(),
    )


# ---------------------------------------------------------------------------
# Prompt bundle
# ---------------------------------------------------------------------------

PROMPT_KINDS = ("generate", "reanswer", "consistency")
PROMPT_LANGS = ("en", "zh")

CONTENT_SLOT = "<my content here>"
QUESTION_SLOT = "<my question here>"


@dataclass(frozen=True)
class PromptBundle:
    """Directory of prompt templates addressed by (kind, qtype, lang)."""

    root: Path

    def path_for(self, kind: str, qtype: str | None, lang: str) -> Path:
        if kind not in PROMPT_KINDS:
            raise KeyError(f"unknown prompt kind {kind!r}")
        name = f"{kind}.{lang}.txt" if kind == "consistency" else f"{kind}_{qtype}.{lang}.txt"
        return self.root / name

    def get(self, kind: str, qtype: str | None, lang: str) -> str:
        path = self.path_for(kind, qtype, lang)
        if not path.is_file():
            raise KeyError(
                f"no prompt template for kind={kind!r} qtype={qtype!r} lang={lang!r}"
            )
        return path.read_text(encoding="utf-8")


def fill_template(template: str, content: str | None = None, question: str | None = None) -> str:
    out = template
    if content is not None:
        out = out.replace(CONTENT_SLOT, content)
    if question is not None:
        out = out.replace(QUESTION_SLOT, question)
    return out


def default_prompt_bundle() -> PromptBundle:
    return PromptBundle(root=Path(__file__).parent / "prompts")
