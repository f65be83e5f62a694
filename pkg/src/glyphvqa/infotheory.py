"""Sequence entropy, KL divergence, and the noise-contrast MI estimator.

All quantities are in nats. Per-step quantities use the full vocabulary with
the convention 0*ln(0) = 0. Sequence-level quantities are sums over positions
(chain-rule decomposition); callers that need length-robust comparisons can
request the per-token mean instead.

The "unconditional" answer distribution is always realized by re-running the
model on Gaussian-corrupted visual embeddings rather than by dropping the
image, so the resulting entropy difference

    mi = H(noisy) - H(clean)

is an estimator and may be negative.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .core import (
    AlignmentError,
    MIReport,
    NoiseSpec,
    SequenceDistribution,
    StepDistribution,
    VisualTokens,
)

#: Weight of the uniform mixture blended into both arguments of the KL ratio
#: (and into cross-entropy targets) so that one-hot teachers stay finite.
SMOOTHING = 1e-8


def smooth(probs: np.ndarray, smoothing: float = SMOOTHING) -> np.ndarray:
    """Mix a probability vector with the uniform distribution."""
    if smoothing == 0.0:
        return probs
    return (1.0 - smoothing) * probs + smoothing / probs.size


def step_entropy(d: StepDistribution) -> float:
    """Shannon entropy -sum p ln p of a single step, in nats."""
    p = d.probs
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def sequence_entropy(s: SequenceDistribution, mean: bool = False) -> float:
    """Entropy summed over positions; ``mean=True`` gives the per-token mean.

    The empty sequence has entropy 0 in both modes.
    """
    if len(s) == 0:
        return 0.0
    total = sum(step_entropy(step) for step in s.steps)
    return total / len(s) if mean else total


def kl_divergence(
    p: StepDistribution, q: StepDistribution, smoothing: float = SMOOTHING
) -> float:
    """KL(p || q) in nats after uniform smoothing of both arguments.

    Raises :class:`AlignmentError` on vocabulary size mismatch and ValueError
    if, after smoothing, q carries zero mass somewhere p does not (only
    possible with ``smoothing=0``).
    """
    if p.vocab_size != q.vocab_size:
        raise AlignmentError(
            f"vocabulary mismatch: {p.vocab_size} vs {q.vocab_size}"
        )
    ps = smooth(p.probs, smoothing)
    qs = smooth(q.probs, smoothing)
    nz = ps > 0
    if np.any(qs[nz] == 0):
        raise ValueError("support violation: q has zero mass where p > 0")
    return float(np.sum(ps[nz] * (np.log(ps[nz]) - np.log(qs[nz]))))


def sequence_kl(
    ps: SequenceDistribution,
    qs: SequenceDistribution,
    mean: bool = False,
    smoothing: float = SMOOTHING,
) -> float:
    """Positionwise KL summed over a pair of aligned sequences."""
    if len(ps) != len(qs):
        raise AlignmentError(f"sequence lengths differ: {len(ps)} vs {len(qs)}")
    if len(ps) == 0:
        return 0.0
    total = sum(
        kl_divergence(a, b, smoothing=smoothing)
        for a, b in zip(ps.steps, qs.steps)
    )
    return total / len(ps) if mean else total


def noise_augment(v: VisualTokens, spec: NoiseSpec) -> VisualTokens:
    """Perturb visual embeddings with i.i.d. Gaussian noise from a seeded RNG.

    Deterministic given ``spec.seed``; refuses to stack noise on an already
    noisy input.
    """
    if v.noisy:
        raise ValueError("input visual tokens are already noise-augmented")
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(spec.mean, spec.stddev, size=v.embeddings.shape)
    return VisualTokens(embeddings=v.embeddings + noise, noisy=True)


class MIFragment(NamedTuple):
    h_uncond: float
    h_cond: float
    mi: float


def mutual_information(
    cond: SequenceDistribution, uncond: SequenceDistribution
) -> MIFragment:
    """Entropy-difference MI for one sample.

    ``cond`` comes from the clean visual tokens, ``uncond`` from the
    noise-augmented ones; both should answer the same question. The two
    decodes may have different lengths; each entropy is taken over its own
    sequence.
    """
    h_uncond = sequence_entropy(uncond)
    h_cond = sequence_entropy(cond)
    return MIFragment(h_uncond=h_uncond, h_cond=h_cond, mi=h_uncond - h_cond)


def make_mi_report(
    sample_id: str,
    cond: SequenceDistribution,
    uncond: SequenceDistribution,
    correct: bool,
) -> MIReport:
    frag = mutual_information(cond, uncond)
    return MIReport(
        sample_id=sample_id,
        h_uncond=frag.h_uncond,
        h_cond=frag.h_cond,
        mi=frag.mi,
        correct=correct,
        cond_len=len(cond),
        uncond_len=len(uncond),
    )
