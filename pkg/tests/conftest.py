"""Shared fixtures: the default task, trained models, ablation comparison.

The expensive fixtures are session-scoped and lazy, so quick test selections
stay quick; running the acceptance module pays for training exactly once.
A terminal summary hook prints one pass/fail line per acceptance criterion.
"""

import logging
import time
from dataclasses import dataclass, replace

import numpy as np
import pytest

from glyphvqa import synthtask, toymodel, trainer
from glyphvqa.trainer import TrainConfig

logging.getLogger("glyphvqa").setLevel(logging.ERROR)


@dataclass
class TaskBundle:
    spec: synthtask.TaskSpec
    lexicon: synthtask.BilingualLexicon
    vocab: synthtask.TaskVocabulary
    splits: synthtask.DatasetSplits
    model_config: toymodel.ModelConfig


def make_task_bundle(spec: synthtask.TaskSpec, model_seed: int = 0, **model_overrides) -> TaskBundle:
    lexicon = synthtask.build_lexicon(spec)
    vocab = synthtask.TaskVocabulary(spec.num_keys, spec.num_values, lexicon)
    splits = synthtask.generate_dataset(spec, lexicon)
    model_config = toymodel.default_model_config(
        vocab_size=spec.vocab_size,
        glyph_vocab_size=spec.glyph_vocab,
        tied_tokens=synthtask.tied_token_pairs(vocab),
        seed=model_seed,
        **model_overrides,
    )
    return TaskBundle(spec, lexicon, vocab, splits, model_config)


@pytest.fixture(scope="session")
def default_task() -> TaskBundle:
    """The default synthetic task at its shipped configuration."""
    return make_task_bundle(synthtask.TaskSpec())


@pytest.fixture(scope="session")
def small_task() -> TaskBundle:
    """A miniature task for fast structural and gradient tests."""
    spec = synthtask.TaskSpec(
        num_keys=5, num_values=5, facts_per_image=2,
        grid_width=5, grid_height=4, seed=3, split_sizes=(6, 2, 4),
    )
    return make_task_bundle(
        spec, glyph_embed_dim=5, projector_dim=5,
        decoder_hidden_dim=7, binding_dim=6,
    )


@dataclass
class TrainedRun:
    bundle: TaskBundle
    record: trainer.RunRecord
    state: toymodel.ModelState
    quarter_state: toymodel.ModelState
    duration_s: float


@pytest.fixture(scope="session")
def scratch_run(default_task) -> TrainedRun:
    """Full-objective run from scratch at default configuration, seed 0."""
    state = toymodel.init_state(default_task.model_config)
    cfg = TrainConfig()
    started = time.time()
    record = trainer.train(default_task.splits, state, cfg, default_task.lexicon)
    duration = time.time() - started
    quarter = toymodel.ModelState(
        state.config, record.quarter_params.copy(), record.quarter_step or 0
    )
    return TrainedRun(default_task, record, state, quarter, duration)


@pytest.fixture(scope="session")
def warm_full_run(default_task) -> TrainedRun:
    """Warm start on source-question directions, then a full-objective branch.

    Mirrors the ablation-comparison flow: the warm start stands in for a
    model pretrained in the image's language; the branch fine-tunes briefly
    under the complete objective.
    """
    base = TrainConfig(learning_rate=0.005, epochs=3, eval_every=1000)
    state = toymodel.init_state(default_task.model_config)
    started = time.time()
    trainer.train(
        default_task.splits, state,
        trainer.warm_start_config(base, 0, 30, 0.02),
        default_task.lexicon,
    )
    record = trainer.train(default_task.splits, state, base, default_task.lexicon)
    duration = time.time() - started
    quarter = toymodel.ModelState(
        state.config, record.quarter_params.copy(), record.quarter_step or 0
    )
    return TrainedRun(default_task, record, state, quarter, duration)


@dataclass
class AblationResult:
    rows: list
    duration_s: float


ABLATION_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def ablation_result(default_task) -> AblationResult:
    """The shipped ablation-comparison recipe timed end to end."""
    base = TrainConfig(learning_rate=0.005, epochs=3, eval_every=1000)
    started = time.time()
    rows = trainer.compare_ablations(
        default_task.splits, base, default_task.model_config,
        default_task.lexicon, seeds=ABLATION_SEEDS,
        warmup_epochs=30, warmup_learning_rate=0.02,
    )
    return AblationResult(rows=rows, duration_s=time.time() - started)


# ---------------------------------------------------------------------------
# Acceptance reporting
# ---------------------------------------------------------------------------

CRITERION_RESULTS: dict[str, tuple[str, str]] = {}


def record_criterion(name: str, description: str, outcome: str) -> None:
    CRITERION_RESULTS[name] = (description, outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(CRITERION_RESULTS):
        description, outcome = CRITERION_RESULTS[name]
        terminalreporter.write_line(f"{name}: {outcome} - {description}")
