"""Metrics and analysis reports.

Answers are scored language-agnostically: predictions and golds are first
normalized into the source language (the language written in the image), so
a correct answer counts no matter which language it was produced in. Exact
match after normalization defines correctness; token-multiset F1 is reported
alongside.

The MI/accuracy analysis re-decodes every sample twice, once on the clean
visual tokens and once on Gaussian-corrupted ones, and summarizes conditional
entropy split by correctness plus the per-language relation between mean MI
and accuracy.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .core import MIReport, NoiseSpec, VQASample
from .infotheory import make_mi_report
from .synthtask import BilingualLexicon, instruction_tokens
from .toymodel import ModelState, default_noise_spec, generate, visual_pipeline

log = logging.getLogger(__name__)

#: translator(token, target_lang_code) -> translated token, or None if the
#: token has no counterpart in the requested vocabulary.
Translator = Callable[[object, str], object]


class NormalizedAnswer(NamedTuple):
    tokens: tuple
    flagged: bool


def normalize_answer(pred: Sequence, target_lang: str, translator) -> NormalizedAnswer:
    """Map tokens into the target vocabulary; untranslatable ones pass through.

    Idempotent: tokens already in the target vocabulary are left unchanged.
    The flag records whether any token passed through untranslated.
    """
    out = []
    flagged = False
    for tok in pred:
        mapped = translator(tok, target_lang)
        if mapped is None:
            log.debug("untranslatable token %r passed through", tok)
            out.append(tok)
            flagged = True
        else:
            out.append(mapped)
    return NormalizedAnswer(tokens=tuple(out), flagged=flagged)


def lexicon_translator(lexicon: BilingualLexicon):
    """Adapter turning a bilingual lexicon into a normalize_answer translator."""

    def translate(token, target_lang: str):
        try:
            return lexicon.translate(token, target_lang)
        except ValueError:
            return None

    return translate


def token_f1(pred: Sequence, gold: Sequence) -> float:
    """Harmonic mean of token-multiset precision and recall.

    Both empty counts as a perfect match; exactly one empty scores zero.
    """
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class EvalResult:
    sample_id: str
    predicted: tuple
    normalized: tuple
    correct: bool
    f1: float
    question_lang: str
    qtype: str
    flagged: bool = False

    def __post_init__(self):
        if not 0.0 <= self.f1 <= 1.0:
            raise ValueError(f"f1 must lie in [0, 1], got {self.f1!r}")


@dataclass(frozen=True)
class GapTable:
    """Per-language and per-question-type accuracy with gap rows.

    ``lang_rows`` recombine exactly from ``qtype_rows`` by sample weighting.
    Gap rows compare every other question language against ``source_lang``:
    absolute drop in accuracy and the drop as a percentage of the source
    accuracy.
    """

    source_lang: str
    qtype_rows: tuple[dict, ...]
    lang_rows: tuple[dict, ...]
    gap_rows: tuple[dict, ...]
    warnings: tuple[str, ...] = ()


def gap_table(results: Sequence[EvalResult], source_lang: str) -> GapTable:
    """Aggregate results into the gap report; pure arithmetic, no model calls."""
    order: list[tuple[str, str]] = []
    buckets: dict[tuple[str, str], list[EvalResult]] = {}
    for r in results:
        key = (r.question_lang, r.qtype)
        if key not in buckets:
            buckets[key] = []
            order.append(key)
        buckets[key].append(r)

    qtype_rows = []
    for key in sorted(order):
        rows = buckets[key]
        n = len(rows)
        qtype_rows.append(
            {
                "lang": key[0],
                "qtype": key[1],
                "n": n,
                "accuracy": sum(1.0 for r in rows if r.correct) / n,
                "f1": sum(r.f1 for r in rows) / n,
            }
        )

    lang_rows = []
    for lang in sorted({k[0] for k in order}):
        rows = [row for row in qtype_rows if row["lang"] == lang]
        n = sum(row["n"] for row in rows)
        lang_rows.append(
            {
                "lang": lang,
                "n": n,
                "accuracy": sum(row["n"] * row["accuracy"] for row in rows) / n,
                "f1": sum(row["n"] * row["f1"] for row in rows) / n,
            }
        )

    warnings = []
    by_lang = {row["lang"]: row for row in lang_rows}
    gap_rows = []
    if source_lang not in by_lang:
        warnings.append(f"source language {source_lang!r} has no samples; gaps omitted")
    else:
        src_acc = by_lang[source_lang]["accuracy"]
        for row in lang_rows:
            if row["lang"] == source_lang:
                continue
            drop = src_acc - row["accuracy"]
            rel = drop / src_acc * 100.0 if src_acc > 0 else None
            if rel is None:
                warnings.append(
                    f"source accuracy is zero; relative gap for {row['lang']!r} omitted"
                )
            gap_rows.append(
                {"lang": row["lang"], "accuracy_drop": drop, "relative_drop_pct": rel}
            )
    if len(by_lang) < 2:
        warnings.append("fewer than two question languages; gap rows empty")
    return GapTable(
        source_lang=source_lang,
        qtype_rows=tuple(qtype_rows),
        lang_rows=tuple(lang_rows),
        gap_rows=tuple(gap_rows),
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# Model-driving loops
# ---------------------------------------------------------------------------

def _map_ordered(fn, items, workers: int = 1) -> list:
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def strip_end_token(tokens: tuple[int, ...], end_token: int) -> tuple[int, ...]:
    if tokens and tokens[-1] == end_token:
        return tokens[:-1]
    return tokens


def evaluate_model(
    state: ModelState,
    samples: Sequence[VQASample],
    lexicon: BilingualLexicon,
    workers: int = 1,
) -> list[EvalResult]:
    """Greedy-decode every sample and score it after source normalization."""
    translator = lexicon_translator(lexicon)
    src = lexicon.src_code

    def run(sample: VQASample) -> EvalResult:
        visual = visual_pipeline(sample.image, state)
        pred, _ = generate(visual, instruction_tokens(sample, lexicon), state)
        answer = strip_end_token(pred, state.config.end_token)
        norm = normalize_answer(answer, src, translator)
        gold = normalize_answer(sample.gold_answer, src, translator)
        return EvalResult(
            sample_id=sample.sample_id,
            predicted=answer,
            normalized=norm.tokens,
            correct=norm.tokens == gold.tokens,
            f1=token_f1(norm.tokens, gold.tokens),
            question_lang=sample.question_lang.code,
            qtype=sample.qtype,
            flagged=norm.flagged,
        )

    return _map_ordered(run, samples, workers)


def _per_sample_seed(base_seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def mi_reports(
    state: ModelState,
    samples: Sequence[VQASample],
    lexicon: BilingualLexicon,
    noise: NoiseSpec | None = None,
    workers: int = 1,
) -> list[MIReport]:
    """Clean-vs-noisy decode per sample; one MI report each.

    Each sample gets its own noise draw, derived deterministically from the
    base seed and the sample id.
    """
    if noise is None:
        noise = default_noise_spec(state)
    translator = lexicon_translator(lexicon)
    src = lexicon.src_code

    def run(sample: VQASample) -> MIReport:
        clean = visual_pipeline(sample.image, state)
        pred, cond = generate(clean, instruction_tokens(sample, lexicon), state)
        answer = strip_end_token(pred, state.config.end_token)
        norm = normalize_answer(answer, src, translator)
        gold = normalize_answer(sample.gold_answer, src, translator)
        sample_noise = replace(noise, seed=_per_sample_seed(noise.seed, sample.sample_id))
        noisy = visual_pipeline(sample.image, state, noise=sample_noise)
        _, uncond = generate(noisy, instruction_tokens(sample, lexicon), state)
        return make_mi_report(
            sample_id=sample.sample_id,
            cond=cond,
            uncond=uncond,
            correct=norm.tokens == gold.tokens,
        )

    return _map_ordered(run, samples, workers)


# ---------------------------------------------------------------------------
# MI / accuracy summary
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MIAccuracySummary:
    per_lang: tuple[dict, ...]
    pearson_mi_accuracy: float | None
    bin_edges: tuple[float, ...]
    warnings: tuple[str, ...] = ()


def _split_stats(values: list[float]) -> dict:
    n = len(values)
    arr = np.asarray(values, dtype=np.float64)
    return {
        "n": n,
        "mean": float(arr.mean()) if n else 0.0,
        "var": float(arr.var(ddof=1)) if n >= 2 else 0.0,
    }


def mi_accuracy_report(
    reports: Sequence[MIReport],
    question_langs: Mapping[str, str],
    bins: int = 20,
) -> MIAccuracySummary:
    """Summarize conditional-entropy separation and the MI/accuracy relation.

    ``question_langs`` maps sample id to its question language. Entropy
    histograms use per-token conditional entropy with shared bin edges.
    The Pearson correlation relates per-language mean MI to per-language
    accuracy and is omitted (None) with fewer than two languages or when
    either quantity is constant.
    """
    langs: list[str] = []
    by_lang: dict[str, list[MIReport]] = {}
    for rep in reports:
        lang = question_langs[rep.sample_id]
        if lang not in by_lang:
            by_lang[lang] = []
            langs.append(lang)
        by_lang[lang].append(rep)
    langs = sorted(langs)

    pooled = [r.h_cond_per_token() for r in reports]
    edges = (
        np.histogram_bin_edges(np.asarray(pooled), bins=bins) if pooled else np.array([])
    )

    warnings = []
    per_lang = []
    for lang in langs:
        reps = by_lang[lang]
        correct = [r.h_cond_per_token() for r in reps if r.correct]
        incorrect = [r.h_cond_per_token() for r in reps if not r.correct]
        hist_c = np.histogram(np.asarray(correct), bins=edges)[0] if correct else np.zeros(len(edges) - 1, dtype=np.int64)
        hist_i = np.histogram(np.asarray(incorrect), bins=edges)[0] if incorrect else np.zeros(len(edges) - 1, dtype=np.int64)
        n = len(reps)
        per_lang.append(
            {
                "lang": lang,
                "n": n,
                "accuracy": sum(1.0 for r in reps if r.correct) / n,
                "mean_mi": float(np.mean([r.mi for r in reps])),
                "mean_mi_per_token": float(
                    np.mean([r.mi / r.cond_len if r.cond_len else 0.0 for r in reps])
                ),
                "mean_h_uncond": float(np.mean([r.h_uncond for r in reps])),
                "correct": _split_stats(correct),
                "incorrect": _split_stats(incorrect),
                "hist_correct": hist_c.tolist(),
                "hist_incorrect": hist_i.tolist(),
            }
        )

    pearson = None
    if len(per_lang) >= 2:
        mi = np.asarray([row["mean_mi"] for row in per_lang])
        acc = np.asarray([row["accuracy"] for row in per_lang])
        if np.ptp(mi) > 0 and np.ptp(acc) > 0:
            pearson = float(np.corrcoef(mi, acc)[0, 1])
        else:
            warnings.append("degenerate MI or accuracy spread; correlation omitted")
    else:
        warnings.append("fewer than two languages; correlation omitted")

    return MIAccuracySummary(
        per_lang=tuple(per_lang),
        pearson_mi_accuracy=pearson,
        bin_edges=tuple(float(e) for e in edges),
        warnings=tuple(warnings),
    )


def emit_plots(summary: MIAccuracySummary, outdir) -> list[Path]:
    """Write per-language entropy histograms and the MI/accuracy scatter.

    Every plot gets a CSV twin holding its backing data; the CSVs are
    byte-deterministic, the PNGs are not guaranteed to be. Languages with no
    samples are skipped with a warning. Returns the written files.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    edges = np.asarray(summary.bin_edges)

    for row in summary.per_lang:
        if row["n"] == 0:
            log.warning("language %r has no samples; histogram skipped", row["lang"])
            continue
        csv_path = outdir / f"entropy_hist_{row['lang']}.csv"
        lines = ["bin_lo,bin_hi,correct,incorrect"]
        for i in range(len(edges) - 1):
            lines.append(
                f"{edges[i]!r},{edges[i + 1]!r},"
                f"{row['hist_correct'][i]},{row['hist_incorrect'][i]}"
            )
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(csv_path)

        fig, ax = plt.subplots(figsize=(5, 3.2))
        centers = (edges[:-1] + edges[1:]) / 2
        width = np.diff(edges)
        ax.bar(centers, row["hist_correct"], width=width, alpha=0.6,
               color="tab:green", label="correct")
        ax.bar(centers, row["hist_incorrect"], width=width, alpha=0.6,
               color="tab:orange", label="incorrect")
        ax.set_xlabel("conditional entropy per token (nats)")
        ax.set_ylabel("count")
        ax.set_title(f"question language: {row['lang']}")
        ax.legend()
        fig.tight_layout()
        png_path = outdir / f"entropy_hist_{row['lang']}.png"
        fig.savefig(png_path)
        plt.close(fig)
        written.append(png_path)

    csv_path = outdir / "mi_vs_accuracy.csv"
    lines = ["lang,mean_mi,accuracy"]
    for row in summary.per_lang:
        lines.append(f"{row['lang']},{row['mean_mi']!r},{row['accuracy']!r}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(csv_path)

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for row in summary.per_lang:
        ax.scatter(row["mean_mi"], row["accuracy"])
        ax.annotate(row["lang"], (row["mean_mi"], row["accuracy"]))
    ax.set_xlabel("mean mutual information (nats)")
    ax.set_ylabel("accuracy")
    fig.tight_layout()
    png_path = outdir / "mi_vs_accuracy.png"
    fig.savefig(png_path)
    plt.close(fig)
    written.append(png_path)
    return written
