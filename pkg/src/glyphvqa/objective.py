"""The bidirectional cross-lingual training objective.

For one image, the four directional variants are keyed by (question
language, answer language), abbreviated ss / st / ts / tt with the first
letter naming the question language role and the second the answer language
role. The loss is

    total = ce_ss + ce_ts + ce_st + ce_tt
            + alpha * KL(st || tt) + beta * KL(ts || ss)

where each cross-entropy is the teacher-forced negative log-likelihood of
the gold answer, and each KL term distills the monolingual distribution
(same answer language, matching question language) into the cross-lingual
student. Teachers are constants with respect to differentiation: gradients
flow into a monolingual direction only through its own cross-entropy term.

Both sequences of a KL pair are teacher-forced on the same answer-language
gold, so their lengths always agree. KL terms are summed over positions by
default; a per-token mean mode is available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    AlignmentError,
    GlyphImage,
    NumericalError,
    SequenceDistribution,
)
from .infotheory import SMOOTHING, sequence_kl, smooth
from . import toymodel
from .toymodel import ModelState

#: Canonical order of the cross-entropy terms, matching LossBreakdown fields.
CE_ORDER = ("ss", "ts", "st", "tt")

_TOTAL_TOL = 1e-9


@dataclass(frozen=True)
class LossWeights:
    """Weights of the two distillation terms."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")


@dataclass(frozen=True)
class DirectionalEntry:
    """Model distribution plus the gold it was teacher-forced on."""

    dist: SequenceDistribution
    gold: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "gold", tuple(int(t) for t in self.gold))
        if len(self.dist) != len(self.gold):
            raise AlignmentError(
                f"distribution length {len(self.dist)} != gold length "
                f"{len(self.gold)}"
            )


@dataclass(frozen=True)
class DirectionalBatch:
    """The four directional variants of one image.

    Entries sharing an answer language must share their gold sequence, which
    is what keeps the KL pairs aligned.
    """

    ss: DirectionalEntry
    st: DirectionalEntry
    ts: DirectionalEntry
    tt: DirectionalEntry
    image_id: str = ""

    def __post_init__(self):
        if self.ss.gold != self.ts.gold:
            raise AlignmentError("ss and ts entries must share the source gold")
        if self.st.gold != self.tt.gold:
            raise AlignmentError("st and tt entries must share the target gold")

    def entry_by_key(self, key: str) -> DirectionalEntry:
        if key not in CE_ORDER:
            raise KeyError(key)
        return getattr(self, key)


@dataclass(frozen=True)
class LossBreakdown:
    """All loss components; ``total`` recomposes from them exactly."""

    ce_ss: float
    ce_ts: float
    ce_st: float
    ce_tt: float
    kl_to_tt: float
    kl_to_ss: float
    alpha: float
    beta: float
    total: float

    def __post_init__(self):
        for name in ("ce_ss", "ce_ts", "ce_st", "ce_tt", "kl_to_tt", "kl_to_ss"):
            if getattr(self, name) < -1e-12:
                raise ValueError(f"{name} must be non-negative")
        expected = (
            self.ce_ss + self.ce_ts + self.ce_st + self.ce_tt
            + self.alpha * self.kl_to_tt + self.beta * self.kl_to_ss
        )
        if abs(self.total - expected) > _TOTAL_TOL:
            raise ValueError(
                f"total {self.total!r} does not recompose from components "
                f"({expected!r})"
            )

    def ce_components(self) -> tuple[float, float, float, float]:
        return (self.ce_ss, self.ce_ts, self.ce_st, self.ce_tt)


def cross_entropy(
    dist: SequenceDistribution,
    gold,
    smoothing: float = SMOOTHING,
    mean: bool = False,
) -> float:
    """Teacher-forced negative log-likelihood, smoothed like the KL terms."""
    gold = tuple(int(t) for t in gold)
    if len(dist) != len(gold):
        raise AlignmentError(
            f"distribution length {len(dist)} != gold length {len(gold)}"
        )
    total = 0.0
    for step, tok in zip(dist.steps, gold):
        if not 0 <= tok < step.vocab_size:
            raise ValueError(f"gold token {tok} out of vocabulary")
        total -= math.log(smooth(step.probs, smoothing)[tok])
    if mean and gold:
        return total / len(gold)
    return total


def mvcl_mi_loss(
    batch: DirectionalBatch, w: LossWeights, kl_mean: bool = False
) -> LossBreakdown:
    """Evaluate every component of the objective on one directional batch."""
    ce = {
        key: cross_entropy(batch.entry_by_key(key).dist, batch.entry_by_key(key).gold)
        for key in CE_ORDER
    }
    kl_to_tt = sequence_kl(batch.st.dist, batch.tt.dist, mean=kl_mean)
    kl_to_ss = sequence_kl(batch.ts.dist, batch.ss.dist, mean=kl_mean)
    total = sum(ce.values()) + w.alpha * kl_to_tt + w.beta * kl_to_ss
    return LossBreakdown(
        ce_ss=ce["ss"], ce_ts=ce["ts"], ce_st=ce["st"], ce_tt=ce["tt"],
        kl_to_tt=kl_to_tt, kl_to_ss=kl_to_ss,
        alpha=w.alpha, beta=w.beta, total=total,
    )


def objective_value(breakdown: LossBreakdown, ce_mask=(1, 1, 1, 1)) -> float:
    """Loss actually optimized under an ablation mask over the CE terms.

    The mask follows ``CE_ORDER``; the distillation terms are controlled by
    the alpha/beta weights already baked into the breakdown.
    """
    ce = breakdown.ce_components()
    return (
        sum(m * c for m, c in zip(ce_mask, ce))
        + breakdown.alpha * breakdown.kl_to_tt
        + breakdown.beta * breakdown.kl_to_ss
    )


# ---------------------------------------------------------------------------
# Gradient path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DirectionalInputs:
    """Raw inputs needed to run all four directions of one image."""

    image: GlyphImage
    instr_ss: tuple[int, ...]
    instr_st: tuple[int, ...]
    instr_ts: tuple[int, ...]
    instr_tt: tuple[int, ...]
    gold_src: tuple[int, ...]
    gold_tgt: tuple[int, ...]
    image_id: str = ""

    def instruction(self, key: str) -> tuple[int, ...]:
        return getattr(self, f"instr_{key}")

    def gold(self, key: str) -> tuple[int, ...]:
        return self.gold_src if key in ("ss", "ts") else self.gold_tgt


def forward_batch(state: ModelState, inputs: DirectionalInputs) -> DirectionalBatch:
    """Run the four teacher-forced directions through the public model ops."""
    visual = toymodel.visual_pipeline(inputs.image, state)
    entries = {}
    for key in CE_ORDER:
        dist = toymodel.decode_distributions(
            visual, inputs.instruction(key), inputs.gold(key), state
        )
        entries[key] = DirectionalEntry(dist=dist, gold=inputs.gold(key))
    return DirectionalBatch(image_id=inputs.image_id, **entries)


def _ce_dlogits(probs: np.ndarray, gold: tuple[int, ...], smoothing: float) -> np.ndarray:
    """d(-sum_i ln smoothed_p_i[gold_i]) / dlogits."""
    out = np.zeros_like(probs)
    for i, tok in enumerate(gold):
        p = probs[i]
        p_smooth = smooth(p, smoothing)
        coef = (1.0 - smoothing) * p[tok] / p_smooth[tok]
        out[i] = coef * p
        out[i, tok] -= coef
    return out


def _kl_dlogits(
    p_probs: np.ndarray, q_probs: np.ndarray, smoothing: float, mean: bool
) -> np.ndarray:
    """d KL(p || stop_grad(q)) / d student logits, summed over positions."""
    out = np.zeros_like(p_probs)
    scale = 1.0 / p_probs.shape[0] if (mean and p_probs.shape[0]) else 1.0
    for i in range(p_probs.shape[0]):
        p = p_probs[i]
        g = np.log(smooth(p, smoothing)) - np.log(smooth(q_probs[i], smoothing))
        out[i] = scale * (1.0 - smoothing) * p * (g - float(p @ g))
    return out


def loss_gradient(
    state: ModelState,
    inputs: DirectionalInputs,
    w: LossWeights,
    ce_mask=(1, 1, 1, 1),
    kl_mean: bool = False,
    smoothing: float = SMOOTHING,
) -> tuple[LossBreakdown, np.ndarray]:
    """Loss breakdown plus the analytic gradient of the masked objective.

    Teachers are detached: KL terms contribute gradient only through their
    student argument. The returned breakdown always carries all components;
    ``ce_mask`` (ordered like ``CE_ORDER``) only affects the gradient and the
    value reported by :func:`objective_value`.
    """
    probs = {}
    caches = {}
    for key in CE_ORDER:
        p, cache = toymodel.forward_cached(
            state, inputs.image, inputs.instruction(key), inputs.gold(key)
        )
        if not np.isfinite(p).all():
            raise NumericalError(f"non-finite model outputs in direction {key}")
        probs[key], caches[key] = p, cache

    batch = DirectionalBatch(
        image_id=inputs.image_id,
        **{
            key: DirectionalEntry(
                dist=toymodel._as_sequence_distribution(probs[key], inputs.gold(key)),
                gold=inputs.gold(key),
            )
            for key in CE_ORDER
        },
    )
    breakdown = mvcl_mi_loss(batch, w, kl_mean=kl_mean)
    if not math.isfinite(breakdown.total):
        raise NumericalError("non-finite loss")

    dlogits = {
        key: (
            _ce_dlogits(probs[key], inputs.gold(key), smoothing)
            if ce_mask[i]
            else np.zeros_like(probs[key])
        )
        for i, key in enumerate(CE_ORDER)
    }
    if w.alpha != 0.0:
        dlogits["st"] = dlogits["st"] + w.alpha * _kl_dlogits(
            probs["st"], probs["tt"], smoothing, kl_mean
        )
    if w.beta != 0.0:
        dlogits["ts"] = dlogits["ts"] + w.beta * _kl_dlogits(
            probs["ts"], probs["ss"], smoothing, kl_mean
        )

    grad = np.zeros_like(state.params)
    for key in CE_ORDER:
        if dlogits[key].any():
            grad += toymodel.backward(state, caches[key], dlogits[key])
    return breakdown, grad
