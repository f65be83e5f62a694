"""Deterministic generator for a desk-scale cross-lingual glyph VQA task.

Each image is a grid of glyphs encoding a handful of key/value facts in the
source vocabulary: every fact occupies two horizontally adjacent cells (key
glyph then value glyph) separated from other facts by at least one blank
cell, so a row scan for maximal non-blank runs recovers the facts exactly.

Questions ask for the value of one rendered key and come in two vocabularies
related by a fixed bijection. For every image the dataset holds the four
(question language x answer language) variants of the same question, which is
what the directional training objective consumes.

Token id layout, shared with the toy model:

    0             end-of-answer
    1, 2          answer-language request markers (source / target)
    3 ..          source block: keys, values, question template
    3 + n ..      target block of the same size n

Glyph ids are separate: 0 is blank, then one glyph per source key and value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ConfigurationError,
    GlyphImage,
    InvariantError,
    LanguageTag,
    VQASample,
)

EOS_TOKEN = 0
ANSWER_IN_SRC = 1
ANSWER_IN_TGT = 2
NUM_SPECIALS = 3
TEMPLATE_LEN = 3
BLANK_GLYPH = 0


@dataclass(frozen=True)
class BilingualLexicon:
    """Two disjoint token vocabularies linked by an index bijection.

    ``bijection[i]`` is the index into ``tgt_tokens`` of the target-language
    counterpart of ``src_tokens[i]``.
    """

    src_tokens: tuple[int, ...]
    tgt_tokens: tuple[int, ...]
    bijection: tuple[int, ...]
    src_code: str = "src"
    tgt_code: str = "tgt"

    def __post_init__(self):
        object.__setattr__(self, "src_tokens", tuple(int(t) for t in self.src_tokens))
        object.__setattr__(self, "tgt_tokens", tuple(int(t) for t in self.tgt_tokens))
        object.__setattr__(self, "bijection", tuple(int(i) for i in self.bijection))
        n = len(self.src_tokens)
        if len(self.tgt_tokens) != n:
            raise InvariantError("tgt_tokens", "vocabulary sizes must match")
        if len(self.bijection) != n or sorted(self.bijection) != list(range(n)):
            raise InvariantError("bijection", "must be a permutation of src indices")
        if set(self.src_tokens) & set(self.tgt_tokens):
            raise InvariantError("tgt_tokens", "vocabularies must be disjoint")
        if self.src_code == self.tgt_code:
            raise InvariantError("tgt_code", "language codes must differ")
        src_index = {t: i for i, t in enumerate(self.src_tokens)}
        tgt_index = {t: j for j, t in enumerate(self.tgt_tokens)}
        inverse = [0] * n
        for i, j in enumerate(self.bijection):
            inverse[j] = i
        object.__setattr__(self, "_src_index", src_index)
        object.__setattr__(self, "_tgt_index", tgt_index)
        object.__setattr__(self, "_inverse", tuple(inverse))

    def __len__(self) -> int:
        return len(self.src_tokens)

    def to_tgt(self, token: int) -> int:
        return self.tgt_tokens[self.bijection[self._src_index[token]]]

    def to_src(self, token: int) -> int:
        return self.src_tokens[self._inverse[self._tgt_index[token]]]

    def translate(self, token: int, target_code: str) -> int | None:
        """Map a token into the requested vocabulary; None if untranslatable."""
        if target_code == self.src_code:
            if token in self._src_index:
                return token
            if token in self._tgt_index:
                return self.to_src(token)
        elif target_code == self.tgt_code:
            if token in self._tgt_index:
                return token
            if token in self._src_index:
                return self.to_tgt(token)
        else:
            raise ValueError(f"unknown language code {target_code!r}")
        return None


@dataclass(frozen=True)
class TaskSpec:
    """Shape of the synthetic task; feasibility is checked on construction."""

    num_keys: int = 16
    num_values: int = 16
    facts_per_image: int = 4
    grid_width: int = 8
    grid_height: int = 8
    seed: int = 0
    split_sizes: tuple[int, int, int] = (192, 16, 96)

    def __post_init__(self):
        if min(self.num_keys, self.num_values) < 1:
            raise ConfigurationError("need at least one key and one value")
        if not 1 <= self.facts_per_image <= self.num_keys:
            raise ConfigurationError(
                "facts_per_image must lie in [1, num_keys] so keys are unique"
            )
        # Each fact needs a 2-cell run plus a separating blank.
        capacity = self.grid_height * ((self.grid_width + 1) // 3)
        if self.facts_per_image > capacity:
            raise ConfigurationError(
                f"grid {self.grid_width}x{self.grid_height} fits at most "
                f"{capacity} facts, requested {self.facts_per_image}"
            )
        if any(n < 0 for n in self.split_sizes) or sum(self.split_sizes) == 0:
            raise ConfigurationError("split sizes must be non-negative, not all zero")

    @property
    def lang_size(self) -> int:
        return self.num_keys + self.num_values + TEMPLATE_LEN

    @property
    def glyph_vocab(self) -> int:
        return 1 + self.num_keys + self.num_values

    @property
    def vocab_size(self) -> int:
        return NUM_SPECIALS + 2 * self.lang_size


def build_lexicon(spec: TaskSpec) -> BilingualLexicon:
    """Seeded lexicon over the id layout; the bijection is a random permutation."""
    n = spec.lang_size
    src = tuple(range(NUM_SPECIALS, NUM_SPECIALS + n))
    tgt = tuple(range(NUM_SPECIALS + n, NUM_SPECIALS + 2 * n))
    rng = np.random.default_rng([spec.seed, 0xB1])
    bijection = tuple(int(i) for i in rng.permutation(n))
    return BilingualLexicon(src_tokens=src, tgt_tokens=tgt, bijection=bijection)


@dataclass(frozen=True)
class TaskVocabulary:
    """Role structure (keys, values, template) over a lexicon."""

    num_keys: int
    num_values: int
    lexicon: BilingualLexicon

    def __post_init__(self):
        if len(self.lexicon) != self.num_keys + self.num_values + TEMPLATE_LEN:
            raise ConfigurationError("lexicon size does not match role counts")

    @property
    def vocab_size(self) -> int:
        return NUM_SPECIALS + 2 * len(self.lexicon)

    @property
    def glyph_vocab(self) -> int:
        return 1 + self.num_keys + self.num_values

    def _src_role_token(self, index: int) -> int:
        return self.lexicon.src_tokens[index]

    def key_token(self, lang_code: str, key: int) -> int:
        if not 0 <= key < self.num_keys:
            raise ValueError(f"unknown key {key}")
        tok = self._src_role_token(key)
        return tok if lang_code == self.lexicon.src_code else self.lexicon.to_tgt(tok)

    def value_token(self, lang_code: str, value: int) -> int:
        if not 0 <= value < self.num_values:
            raise ValueError(f"unknown value {value}")
        tok = self._src_role_token(self.num_keys + value)
        return tok if lang_code == self.lexicon.src_code else self.lexicon.to_tgt(tok)

    def template_tokens(self, lang_code: str) -> tuple[int, ...]:
        base = self.num_keys + self.num_values
        toks = tuple(self._src_role_token(base + i) for i in range(TEMPLATE_LEN))
        if lang_code == self.lexicon.src_code:
            return toks
        return tuple(self.lexicon.to_tgt(t) for t in toks)

    def glyph_for_key(self, key: int) -> int:
        return 1 + key

    def glyph_for_value(self, value: int) -> int:
        return 1 + self.num_keys + value

    def src_token_for_glyph(self, glyph: int) -> int:
        """Source token rendered by a non-blank glyph."""
        if not 1 <= glyph < self.glyph_vocab:
            raise ValueError(f"glyph {glyph} has no token")
        return self._src_role_token(glyph - 1)

    def glyph_for_src_token(self, token: int) -> int | None:
        """Glyph rendering a source key or value token; None otherwise."""
        idx = self.lexicon._src_index.get(token)
        if idx is None or idx >= self.num_keys + self.num_values:
            return None
        return 1 + idx


def tied_token_pairs(vocab: TaskVocabulary) -> tuple[tuple[int, int], ...]:
    """(token, glyph) pairs tying source key/value tokens to their glyphs.

    Images are written in the source vocabulary, so sharing these embeddings
    gives source-language questions the same head start on visual grounding
    that a model pretrained in the image's language would have.
    """
    return tuple(
        (vocab.lexicon.src_tokens[i], 1 + i)
        for i in range(vocab.num_keys + vocab.num_values)
    )


def render_question(key: int, lang: LanguageTag, vocab: TaskVocabulary) -> tuple[int, ...]:
    """Fixed 3-token template plus the key token, in the requested vocabulary."""
    return vocab.template_tokens(lang.code) + (vocab.key_token(lang.code, key),)


def answer_marker(lang_code: str, lexicon: BilingualLexicon) -> int:
    if lang_code == lexicon.src_code:
        return ANSWER_IN_SRC
    if lang_code == lexicon.tgt_code:
        return ANSWER_IN_TGT
    raise ValueError(f"unknown language code {lang_code!r}")


def instruction_tokens(sample: VQASample, lexicon: BilingualLexicon) -> tuple[int, ...]:
    """Model input sequence: answer-language marker, then the question.

    The marker leads so that the question's key token is the most recent
    input when decoding starts; the recurrent state keeps recent tokens the
    sharpest, and retrieval needs the key far more than the 1-bit language
    request.
    """
    return (answer_marker(sample.answer_lang.code, lexicon),) + sample.question


def training_targets(sample: VQASample) -> tuple[int, ...]:
    """Decoder target sequence for a sample.

    Answers on this task are single value tokens, so the target is just the
    gold answer; the end token stays reserved for variable-length decoding.
    """
    return sample.gold_answer


@dataclass(frozen=True)
class DatasetSplits:
    train: tuple[VQASample, ...]
    val: tuple[VQASample, ...]
    test: tuple[VQASample, ...]

    def split(self, name: str) -> tuple[VQASample, ...]:
        return getattr(self, name)


def image_group_id(sample_id: str) -> str:
    """Shared prefix of the four directional variants of one image."""
    return sample_id.rsplit(":", 1)[0]


def _place_facts(rng: np.random.Generator, spec: TaskSpec) -> list[tuple[int, int]] | None:
    """Pick non-touching 2-cell slots, or None if the greedy pass fails."""
    candidates = [
        (r, c)
        for r in range(spec.grid_height)
        for c in range(spec.grid_width - 1)
    ]
    order = rng.permutation(len(candidates))
    occupied = np.zeros((spec.grid_height, spec.grid_width), dtype=bool)
    slots: list[tuple[int, int]] = []
    for idx in order:
        r, c = candidates[idx]
        lo, hi = max(0, c - 1), min(spec.grid_width, c + 3)
        if occupied[r, lo:hi].any():
            continue
        occupied[r, c] = occupied[r, c + 1] = True
        slots.append((r, c))
        if len(slots) == spec.facts_per_image:
            return slots
    return None


def _generate_image(
    rng: np.random.Generator, spec: TaskSpec, vocab: TaskVocabulary
) -> tuple[GlyphImage, list[tuple[int, int]]]:
    """One glyph image plus its (key, value) facts."""
    for _ in range(1000):
        slots = _place_facts(rng, spec)
        if slots is not None:
            break
    else:
        raise ConfigurationError("could not place facts; grid too crowded")
    keys = rng.choice(spec.num_keys, size=spec.facts_per_image, replace=False)
    values = rng.integers(0, spec.num_values, size=spec.facts_per_image)
    grid = np.full((spec.grid_height, spec.grid_width), BLANK_GLYPH, dtype=np.int64)
    facts = []
    for (r, c), k, v in zip(slots, keys, values):
        grid[r, c] = vocab.glyph_for_key(int(k))
        grid[r, c + 1] = vocab.glyph_for_value(int(v))
        facts.append((int(k), int(v)))
    image = GlyphImage(
        grid=grid, width=spec.grid_width, height=spec.grid_height,
        glyph_vocab=spec.glyph_vocab,
    )
    return image, facts


def generate_dataset(spec: TaskSpec, lexicon: BilingualLexicon) -> DatasetSplits:
    """Deterministic splits with image-level disjointness.

    Every image yields four samples, one per (question language, answer
    language) pairing, all asking the same rendered key. Target-language gold
    answers are the bijection images of the source gold.
    """
    vocab = TaskVocabulary(spec.num_keys, spec.num_values, lexicon)
    rng = np.random.default_rng(spec.seed)
    names = ("train", "val", "test")
    seen: set[bytes] = set()
    splits: dict[str, list[VQASample]] = {name: [] for name in names}
    for name, count in zip(names, spec.split_sizes):
        for i in range(count):
            while True:
                image, facts = _generate_image(rng, spec, vocab)
                fingerprint = image.grid.tobytes()
                if fingerprint not in seen:
                    seen.add(fingerprint)
                    break
            key, value = facts[int(rng.integers(0, len(facts)))]
            image_id = f"{name}-{i:04d}"
            for q_code in (lexicon.src_code, lexicon.tgt_code):
                for a_code in (lexicon.src_code, lexicon.tgt_code):
                    splits[name].append(
                        VQASample(
                            image=image,
                            question=render_question(key, LanguageTag(q_code), vocab),
                            question_lang=LanguageTag(q_code),
                            gold_answer=(vocab.value_token(a_code, value),),
                            answer_lang=LanguageTag(a_code),
                            qtype="extractive",
                            sample_id=f"{image_id}:{q_code}-{a_code}",
                        )
                    )
    return DatasetSplits(
        train=tuple(splits["train"]),
        val=tuple(splits["val"]),
        test=tuple(splits["test"]),
    )


# ---------------------------------------------------------------------------
# Lexicon (de)serialization, used by the CLI artifacts
# ---------------------------------------------------------------------------

def vocabulary_payload(vocab: TaskVocabulary) -> dict:
    lex = vocab.lexicon
    return {
        "v": 1,
        "num_keys": vocab.num_keys,
        "num_values": vocab.num_values,
        "src_code": lex.src_code,
        "tgt_code": lex.tgt_code,
        "src_tokens": list(lex.src_tokens),
        "tgt_tokens": list(lex.tgt_tokens),
        "bijection": list(lex.bijection),
    }


def vocabulary_from_payload(payload: dict) -> TaskVocabulary:
    lexicon = BilingualLexicon(
        src_tokens=tuple(payload["src_tokens"]),
        tgt_tokens=tuple(payload["tgt_tokens"]),
        bijection=tuple(payload["bijection"]),
        src_code=payload["src_code"],
        tgt_code=payload["tgt_code"],
    )
    return TaskVocabulary(payload["num_keys"], payload["num_values"], lexicon)
