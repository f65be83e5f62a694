"""Optimization loop for the directional objective and its ablations.

Every training step sees all four directional variants of each image in the
batch. Ablations:

* ``full``        all four cross-entropy terms plus both distillation terms;
* ``no_kl``       the distillation weights are forced to zero;
* ``no_cross_ce`` the two cross-lingual cross-entropy terms are dropped while
                  the monolingual terms and both distillation terms remain.

Optimization is plain SGD with momentum, fixed epochs, no early stopping, so
a (seed, config) pair fully determines the run. A parameter snapshot is kept
at one quarter of training for analyses that need an under-trained model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ConfigurationError, NumericalError, VQASample
from .evalkit import evaluate_model
from .objective import (
    CE_ORDER,
    DirectionalInputs,
    LossWeights,
    loss_gradient,
    objective_value,
)
from .synthtask import (
    BilingualLexicon,
    DatasetSplits,
    image_group_id,
    instruction_tokens,
    training_targets,
)
from .toymodel import ModelConfig, ModelState, init_state

ABLATIONS = ("full", "no_kl", "no_cross_ce")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    momentum: float = 0.9
    epochs: int = 40
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: str = "full"
    seed: int = 0
    eval_every: int = 10
    kl_mean: bool = False
    #: Directions whose cross-entropy terms are trained; restricting this to
    #: the source-question directions gives a warm start that mimics a model
    #: pretrained on instructions in the image's own language.
    train_directions: tuple[str, ...] = CE_ORDER

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError("epochs >= 0, batch_size >= 1, eval_every >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(
                f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}"
            )
        object.__setattr__(
            self, "train_directions", tuple(self.train_directions)
        )
        if any(d not in CE_ORDER for d in self.train_directions):
            raise ConfigurationError(
                f"train_directions must be a subset of {CE_ORDER}"
            )


def effective_terms(cfg: TrainConfig) -> tuple[LossWeights, tuple[int, int, int, int]]:
    """Weights and CE mask (ordered like CE_ORDER) actually optimized."""
    if cfg.ablation == "no_kl":
        w = LossWeights(0.0, 0.0)
        mask = [1, 1, 1, 1]
    elif cfg.ablation == "no_cross_ce":
        w = cfg.weights
        mask = [1, 0, 0, 1]
    else:
        w = cfg.weights
        mask = [1, 1, 1, 1]
    mask = [
        m if key in cfg.train_directions else 0
        for m, key in zip(mask, CE_ORDER)
    ]
    return w, tuple(mask)


def directional_inputs(
    samples: tuple[VQASample, ...], lexicon: BilingualLexicon
) -> list[DirectionalInputs]:
    """Group the four variants of each image into one training example."""
    order: list[str] = []
    groups: dict[str, dict[str, VQASample]] = {}
    for s in samples:
        gid = image_group_id(s.sample_id)
        q = "s" if s.question_lang.code == lexicon.src_code else "t"
        a = "s" if s.answer_lang.code == lexicon.src_code else "t"
        if gid not in groups:
            groups[gid] = {}
            order.append(gid)
        groups[gid][q + a] = s
    out = []
    for gid in order:
        variants = groups[gid]
        if set(variants) != {"ss", "st", "ts", "tt"}:
            raise ConfigurationError(
                f"image {gid} has directions {sorted(variants)}, expected all four"
            )
        out.append(
            DirectionalInputs(
                image=variants["ss"].image,
                instr_ss=instruction_tokens(variants["ss"], lexicon),
                instr_st=instruction_tokens(variants["st"], lexicon),
                instr_ts=instruction_tokens(variants["ts"], lexicon),
                instr_tt=instruction_tokens(variants["tt"], lexicon),
                gold_src=training_targets(variants["ss"]),
                gold_tgt=training_targets(variants["tt"]),
                image_id=gid,
            )
        )
    return out


@dataclass
class RunRecord:
    """Config snapshot, eval trajectory, and parameter snapshots of one run."""

    config: dict
    evals: list[dict]
    final_params: np.ndarray
    quarter_params: np.ndarray | None
    final_step: int
    quarter_step: int | None

    def payload(self) -> dict:
        """JSON payload without the parameter arrays (those go to checkpoints)."""
        return {
            "v": 1,
            "config": self.config,
            "evals": self.evals,
            "final_step": self.final_step,
            "quarter_step": self.quarter_step,
        }


def _accuracy_metrics(
    state: ModelState, samples, lexicon: BilingualLexicon
) -> dict:
    results = evaluate_model(state, samples, lexicon)
    by_lang: dict[str, list[bool]] = {}
    for r in results:
        by_lang.setdefault(r.question_lang, []).append(r.correct)
    acc = {
        lang: sum(flags) / len(flags) for lang, flags in sorted(by_lang.items())
    }
    mono = acc.get(lexicon.src_code, 0.0)
    cross_langs = [l for l in acc if l != lexicon.src_code]
    cross = (
        sum(acc[l] for l in cross_langs) / len(cross_langs) if cross_langs else 0.0
    )
    return {
        "acc_by_qlang": acc,
        "mono_acc": mono,
        "cross_acc": cross,
        "gap": mono - cross,
        "n": len(results),
    }


def _mean_loss(
    state: ModelState, examples, w: LossWeights, ce_mask, kl_mean: bool
) -> dict:
    from .objective import forward_batch, mvcl_mi_loss

    comps = {k: 0.0 for k in ("ce_ss", "ce_ts", "ce_st", "ce_tt", "kl_to_tt", "kl_to_ss")}
    objective = 0.0
    for ex in examples:
        bd = mvcl_mi_loss(forward_batch(state, ex), w, kl_mean=kl_mean)
        for k in comps:
            comps[k] += getattr(bd, k)
        objective += objective_value(bd, ce_mask)
    n = max(1, len(examples))
    out = {k: v / n for k, v in comps.items()}
    out["objective"] = objective / n
    return out


def train(
    splits: DatasetSplits,
    state: ModelState,
    cfg: TrainConfig,
    lexicon: BilingualLexicon,
) -> RunRecord:
    """Train ``state`` in place; deterministic given config and model seeds.

    Evaluation points are epoch 0 (the fresh model), every ``eval_every``
    epochs, and the final epoch; each records the mean loss components over
    the train set plus accuracy metrics on the val and test splits.
    """
    w, ce_mask = effective_terms(cfg)
    examples = directional_inputs(splits.train, lexicon)
    rng = np.random.default_rng(cfg.seed)
    velocity = np.zeros_like(state.params)

    def eval_point(epoch: int) -> dict:
        return {
            "epoch": epoch,
            "step": state.step,
            "loss": _mean_loss(state, examples, w, ce_mask, cfg.kl_mean),
            "val": _accuracy_metrics(state, splits.val, lexicon),
            "test": _accuracy_metrics(state, splits.test, lexicon),
        }

    evals = [eval_point(0)]
    quarter_params = None
    quarter_step = None
    quarter_epoch = max(1, cfg.epochs // 4) if cfg.epochs else None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            grad = np.zeros_like(state.params)
            for idx in chunk:
                try:
                    bd, g = loss_gradient(
                        state, examples[idx], w, ce_mask=ce_mask, kl_mean=cfg.kl_mean
                    )
                except NumericalError as exc:
                    raise NumericalError(
                        f"aborting at step {state.step}: {exc}"
                    ) from exc
                if not math.isfinite(bd.total):
                    raise NumericalError(
                        f"non-finite loss at step {state.step}: "
                        f"ce=({bd.ce_ss}, {bd.ce_ts}, {bd.ce_st}, {bd.ce_tt}) "
                        f"kl=({bd.kl_to_tt}, {bd.kl_to_ss})"
                    )
                grad += g
            grad /= len(chunk)
            velocity *= cfg.momentum
            velocity += grad
            state.params -= cfg.learning_rate * velocity
            state.step += 1
        if epoch == quarter_epoch:
            quarter_params = state.params.copy()
            quarter_step = state.step
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            evals.append(eval_point(epoch))

    return RunRecord(
        config={
            "train": {
                "learning_rate": cfg.learning_rate,
                "momentum": cfg.momentum,
                "epochs": cfg.epochs,
                "batch_size": cfg.batch_size,
                "alpha": cfg.weights.alpha,
                "beta": cfg.weights.beta,
                "ablation": cfg.ablation,
                "seed": cfg.seed,
                "eval_every": cfg.eval_every,
                "kl_mean": cfg.kl_mean,
            },
            "model_seed": state.config.seed,
        },
        evals=evals,
        final_params=state.params.copy(),
        quarter_params=quarter_params,
        final_step=state.step,
        quarter_step=quarter_step,
    )


#: Warm-start recipe: source-question directions only, no distillation.
WARMUP_DIRECTIONS = ("ss", "st")


def warm_start_config(
    base_cfg: TrainConfig,
    seed: int,
    epochs: int,
    learning_rate: float | None = None,
) -> TrainConfig:
    return replace(
        base_cfg,
        seed=seed,
        ablation="full",
        weights=LossWeights(0.0, 0.0),
        epochs=epochs,
        learning_rate=learning_rate or base_cfg.learning_rate,
        train_directions=WARMUP_DIRECTIONS,
    )


def compare_ablations(
    splits: DatasetSplits,
    base_cfg: TrainConfig,
    model_config: ModelConfig,
    lexicon: BilingualLexicon,
    seeds,
    ablations=ABLATIONS,
    warmup_epochs: int = 30,
    warmup_learning_rate: float = 0.02,
) -> list[dict]:
    """Mean test metrics per ablation across seeds.

    Per seed, a fresh model is first warm-started on the source-question
    directions only (the stand-in for a model pretrained in the image's
    language, which is where the cross-lingual gap comes from); every
    ablation then branches from that shared checkpoint and fine-tunes for
    ``base_cfg.epochs`` more epochs under its own objective, typically at a
    much smaller learning rate than the warmup.
    """
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 3:
        raise ConfigurationError("ablation comparison needs at least 3 seeds")
    warm_states: dict[int, ModelState] = {}
    for seed in seeds:
        state = init_state(replace(model_config, seed=seed))
        if warmup_epochs:
            train(
                splits,
                state,
                warm_start_config(base_cfg, seed, warmup_epochs, warmup_learning_rate),
                lexicon,
            )
        warm_states[seed] = state
    rows = []
    for ablation in ablations:
        per_seed = {"mono_acc": [], "cross_acc": [], "gap": []}
        for seed in seeds:
            state = warm_states[seed].copy()
            cfg = replace(base_cfg, seed=seed, ablation=ablation)
            record = train(splits, state, cfg, lexicon)
            final_test = record.evals[-1]["test"]
            for key in per_seed:
                per_seed[key].append(final_test[key])
        rows.append(
            {
                "ablation": ablation,
                "seeds": list(seeds),
                "warmup_epochs": warmup_epochs,
                "mono_acc": per_seed["mono_acc"],
                "cross_acc": per_seed["cross_acc"],
                "gap": per_seed["gap"],
                "mono_mean": sum(per_seed["mono_acc"]) / len(seeds),
                "cross_mean": sum(per_seed["cross_acc"]) / len(seeds),
                "gap_mean": sum(per_seed["gap"]) / len(seeds),
            }
        )
    return rows
