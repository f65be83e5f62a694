import numpy as np
import pytest

from glyphvqa.core import ConfigurationError, InvariantError, LanguageTag
from glyphvqa.synthtask import (
    BLANK_GLYPH,
    TEMPLATE_LEN,
    BilingualLexicon,
    TaskSpec,
    TaskVocabulary,
    answer_marker,
    build_lexicon,
    generate_dataset,
    image_group_id,
    instruction_tokens,
    render_question,
    tied_token_pairs,
    vocabulary_from_payload,
    vocabulary_payload,
)


@pytest.fixture(scope="module")
def task():
    spec = TaskSpec(
        num_keys=6, num_values=5, facts_per_image=3,
        grid_width=7, grid_height=5, seed=11, split_sizes=(20, 4, 8),
    )
    lexicon = build_lexicon(spec)
    vocab = TaskVocabulary(spec.num_keys, spec.num_values, lexicon)
    splits = generate_dataset(spec, lexicon)
    return spec, lexicon, vocab, splits


def decode_grid(image, vocab):
    """Independent grid-reading oracle: facts are per-row non-blank runs."""
    facts = {}
    for row in image.grid:
        run = []
        for cell in list(row) + [BLANK_GLYPH]:
            if cell != BLANK_GLYPH:
                run.append(int(cell))
            elif run:
                assert len(run) == 2, f"malformed glyph run {run}"
                key_glyph, value_glyph = run
                assert 1 <= key_glyph <= vocab.num_keys
                assert vocab.num_keys < value_glyph < vocab.glyph_vocab
                facts[key_glyph - 1] = value_glyph - 1 - vocab.num_keys
                run = []
    return facts


class TestLexicon:
    def test_bijection_round_trip(self, task):
        _, lexicon, _, _ = task
        for tok in lexicon.src_tokens:
            assert lexicon.to_src(lexicon.to_tgt(tok)) == tok

    def test_disjoint_vocabularies(self, task):
        _, lexicon, _, _ = task
        assert not set(lexicon.src_tokens) & set(lexicon.tgt_tokens)

    def test_rejects_non_permutation(self):
        with pytest.raises(InvariantError, match="bijection"):
            BilingualLexicon(src_tokens=(3, 4), tgt_tokens=(5, 6), bijection=(0, 0))

    def test_rejects_overlapping_vocabularies(self):
        with pytest.raises(InvariantError):
            BilingualLexicon(src_tokens=(3, 4), tgt_tokens=(4, 5), bijection=(0, 1))

    def test_translate_unknown_language(self, task):
        _, lexicon, _, _ = task
        with pytest.raises(ValueError):
            lexicon.translate(lexicon.src_tokens[0], "fr")

    def test_translate_passthrough_for_foreign_token(self, task):
        _, lexicon, _, _ = task
        assert lexicon.translate(0, "src") is None


class TestSpec:
    def test_infeasible_grid_rejected(self):
        with pytest.raises(ConfigurationError, match="fits at most"):
            TaskSpec(num_keys=8, num_values=8, facts_per_image=8,
                     grid_width=2, grid_height=2)

    def test_facts_bounded_by_keys(self):
        with pytest.raises(ConfigurationError):
            TaskSpec(num_keys=2, num_values=8, facts_per_image=3)


class TestGeneration:
    def test_deterministic_given_seed(self, task):
        spec, lexicon, _, splits = task
        again = generate_dataset(spec, lexicon)
        assert again == splits

    def test_gold_answers_related_by_bijection(self, task):
        _, lexicon, _, splits = task
        by_image = {}
        for s in splits.train + splits.val + splits.test:
            by_image.setdefault(image_group_id(s.sample_id), {})[
                s.answer_lang.code
            ] = s.gold_answer
        for golds in by_image.values():
            assert lexicon.to_src(golds["tgt"][0]) == golds["src"][0]

    def test_grid_decoding_oracle_recovers_every_gold(self, task):
        _, lexicon, vocab, splits = task
        samples = splits.train + splits.val + splits.test
        assert len(samples) >= 100
        for s in samples:
            facts = decode_grid(s.image, vocab)
            key_token = s.question[-1]
            if s.question_lang.code == "tgt":
                key_token = lexicon.to_src(key_token)
            key = lexicon.src_tokens.index(key_token)
            expected_value = facts[key]
            gold_src = (
                s.gold_answer[0]
                if s.answer_lang.code == "src"
                else lexicon.to_src(s.gold_answer[0])
            )
            assert gold_src == vocab.value_token("src", expected_value)

    def test_images_are_source_monolingual(self, task):
        spec, _, vocab, splits = task
        for s in splits.train + splits.val + splits.test:
            assert s.image.grid.max() < vocab.glyph_vocab

    def test_splits_disjoint_at_image_level(self, task):
        _, _, _, splits = task
        fingerprints = {
            name: {s.image.grid.tobytes() for s in splits.split(name)}
            for name in ("train", "val", "test")
        }
        assert not fingerprints["train"] & fingerprints["val"]
        assert not fingerprints["train"] & fingerprints["test"]
        assert not fingerprints["val"] & fingerprints["test"]

    def test_four_variants_per_image(self, task):
        _, _, _, splits = task
        groups = {}
        for s in splits.train:
            groups.setdefault(image_group_id(s.sample_id), []).append(
                (s.question_lang.code, s.answer_lang.code)
            )
        for variants in groups.values():
            assert sorted(variants) == [
                ("src", "src"), ("src", "tgt"), ("tgt", "src"), ("tgt", "tgt")
            ]

    def test_correctness_invariant_under_normalization_language(self, task):
        # A prediction is correct in target form iff its bijection image is
        # correct in source form.
        _, lexicon, vocab, splits = task
        rng = np.random.default_rng(0)
        for s in splits.test:
            gold_src = lexicon.translate(s.gold_answer[0], "src")
            pred_value = int(rng.integers(0, vocab.num_values))
            pred_src = vocab.value_token("src", pred_value)
            pred_tgt = lexicon.to_tgt(pred_src)
            assert (pred_src == gold_src) == (
                lexicon.translate(pred_tgt, "src") == gold_src
            )


class TestQuestions:
    def test_template_length_plus_key_for_all_keys(self, task):
        spec, _, vocab, _ = task
        for key in range(spec.num_keys):
            for code in ("src", "tgt"):
                q = render_question(key, LanguageTag(code), vocab)
                assert len(q) == TEMPLATE_LEN + 1

    def test_src_tgt_versions_are_tokenwise_bijection_images(self, task):
        spec, lexicon, vocab, _ = task
        for key in range(spec.num_keys):
            q_src = render_question(key, LanguageTag("src"), vocab)
            q_tgt = render_question(key, LanguageTag("tgt"), vocab)
            assert tuple(lexicon.to_tgt(t) for t in q_src) == q_tgt

    def test_identical_inputs_identical_outputs(self, task):
        _, _, vocab, _ = task
        assert render_question(2, LanguageTag("src"), vocab) == render_question(
            2, LanguageTag("src"), vocab
        )

    def test_unknown_key_rejected(self, task):
        spec, _, vocab, _ = task
        with pytest.raises(ValueError, match="unknown key"):
            render_question(spec.num_keys, LanguageTag("src"), vocab)

    def test_instruction_prepends_answer_marker(self, task):
        _, lexicon, _, splits = task
        s = splits.train[0]
        instr = instruction_tokens(s, lexicon)
        assert instr[0] == answer_marker(s.answer_lang.code, lexicon)
        assert instr[1:] == s.question


class TestVocabularyPayload:
    def test_round_trip(self, task):
        _, _, vocab, _ = task
        again = vocabulary_from_payload(vocabulary_payload(vocab))
        assert again == vocab

    def test_tied_pairs_cover_keys_and_values(self, task):
        spec, lexicon, vocab, _ = task
        pairs = tied_token_pairs(vocab)
        assert len(pairs) == spec.num_keys + spec.num_values
        for token, glyph in pairs:
            assert token in lexicon.src_tokens
            assert 1 <= glyph < vocab.glyph_vocab
