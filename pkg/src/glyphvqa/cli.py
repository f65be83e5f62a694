"""Command-line entry point.

Subcommands: ``synth``, ``train``, ``ablate``, ``eval``, ``analyze-mi``,
``filter``. Every run reads a declarative JSON config (individual keys can
be overridden with repeated ``--set key=value`` flags), writes its primary
outputs into one directory, and drops a ``manifest.json`` beside them
recording the subcommand, the hash of the effective config, inputs, outputs,
seed, toolkit version, and wall-clock duration.

Determinism contract: two runs with the same config hash and inputs produce
byte-identical primary data outputs. PNG plots are excluded; their backing
CSV data files are included. The manifest itself records the duration and is
therefore not a primary output.

Exit codes: 0 on success, 1 on a domain error, 2 on a usage error. The
output root defaults to ``$GLYPHVQA_OUT_ROOT`` (falling back to ``./runs``)
when ``--out`` is not given.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .core import (
    AlignmentError,
    ConfigurationError,
    InvariantError,
    NumericalError,
    RecordError,
    read_json_records,
    read_sample_records,
    write_json_records,
    write_sample_records,
)
from .corpus import (
    FilterThresholds,
    StageError,
    extend_multilingual,
    pair_from_payload,
    pair_payload,
    run_filter_chain,
)
from .evalkit import evaluate_model, emit_plots, gap_table, mi_accuracy_report, mi_reports
from .objective import LossWeights
from .providers import mock_provider_suite
from .synthtask import (
    DatasetSplits,
    TaskSpec,
    TaskVocabulary,
    build_lexicon,
    generate_dataset,
    tied_token_pairs,
    vocabulary_from_payload,
    vocabulary_payload,
)
from .toymodel import (
    ModelState,
    default_model_config,
    default_noise_spec,
    init_state,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import TrainConfig, compare_ablations, train
from .core import NoiseSpec

DOMAIN_ERRORS = (
    InvariantError, RecordError, AlignmentError, ConfigurationError,
    NumericalError, StageError, ValueError, KeyError, FileNotFoundError,
)


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg: dict = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise ConfigurationError("config file must hold a JSON object")
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"cannot override through non-object key {part!r}")
        node[parts[-1]] = value
    return cfg


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def resolve_outdir(out: str | None, subcommand: str, digest: str) -> Path:
    if out:
        return Path(out)
    root = Path(os.environ.get("GLYPHVQA_OUT_ROOT", "runs"))
    return root / f"{subcommand}-{digest[:12]}"


def write_manifest(
    outdir: Path, subcommand: str, cfg: dict, inputs: list[str],
    outputs: list[Path], seed, started: float,
) -> None:
    manifest = {
        "v": 1,
        "subcommand": subcommand,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "inputs": sorted(str(p) for p in inputs),
        "outputs": sorted(str(p.name) for p in outputs),
        "seed": seed,
        "version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def dump_json(payload, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# Dataset / model assembly helpers shared by subcommands
# ---------------------------------------------------------------------------

def load_dataset(data_dir: str) -> tuple[DatasetSplits, TaskVocabulary]:
    data = Path(data_dir)
    with open(data / "vocabulary.json", "r", encoding="utf-8") as fh:
        vocab = vocabulary_from_payload(json.load(fh))
    splits = DatasetSplits(
        train=tuple(read_sample_records(data / "train.jsonl")),
        val=tuple(read_sample_records(data / "val.jsonl")),
        test=tuple(read_sample_records(data / "test.jsonl")),
    )
    return splits, vocab


def build_model_config(vocab: TaskVocabulary, model_cfg: dict):
    model_cfg = dict(model_cfg)
    tie = model_cfg.pop("tie_source_embeddings", True)
    return default_model_config(
        vocab_size=vocab.vocab_size,
        glyph_vocab_size=vocab.glyph_vocab,
        tied_tokens=tied_token_pairs(vocab) if tie else (),
        **model_cfg,
    )


def build_train_config(train_cfg: dict) -> TrainConfig:
    train_cfg = dict(train_cfg)
    weights = LossWeights(
        alpha=float(train_cfg.pop("alpha", 1.0)),
        beta=float(train_cfg.pop("beta", 1.0)),
    )
    if "train_directions" in train_cfg:
        train_cfg["train_directions"] = tuple(train_cfg["train_directions"])
    return TrainConfig(weights=weights, **train_cfg)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set or [])
    spec_kwargs = dict(cfg)
    if "split_sizes" in spec_kwargs:
        spec_kwargs["split_sizes"] = tuple(spec_kwargs["split_sizes"])
    spec = TaskSpec(**spec_kwargs)
    lexicon = build_lexicon(spec)
    vocab = TaskVocabulary(spec.num_keys, spec.num_values, lexicon)
    splits = generate_dataset(spec, lexicon)

    outdir = resolve_outdir(args.out, "synth", config_hash(cfg))
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name in ("train", "val", "test"):
        path = outdir / f"{name}.jsonl"
        write_sample_records(splits.split(name), path)
        outputs.append(path)
    vocab_path = outdir / "vocabulary.json"
    dump_json(vocabulary_payload(vocab), vocab_path)
    outputs.append(vocab_path)
    write_manifest(outdir, "synth", cfg, [], outputs, spec.seed, started)
    print(outdir)
    return 0


def cmd_train(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set or [])
    splits, vocab = load_dataset(args.data)
    model_config = build_model_config(vocab, cfg.get("model", {}))
    train_config = build_train_config(cfg.get("train", {}))

    state = (
        load_checkpoint(args.checkpoint) if args.checkpoint else init_state(model_config)
    )
    record = train(splits, state, train_config, vocab.lexicon)

    outdir = resolve_outdir(args.out, "train", config_hash(cfg))
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    ckpt = outdir / "checkpoint.json"
    save_checkpoint(state, ckpt)
    outputs.append(ckpt)
    if record.quarter_params is not None:
        qstate = ModelState(state.config, record.quarter_params.copy(), record.quarter_step or 0)
        qckpt = outdir / "quarter_checkpoint.json"
        save_checkpoint(qstate, qckpt)
        outputs.append(qckpt)
    record_path = outdir / "run_record.json"
    dump_json(record.payload(), record_path)
    outputs.append(record_path)
    inputs = [args.data] + ([args.checkpoint] if args.checkpoint else [])
    write_manifest(outdir, "train", cfg, inputs, outputs, train_config.seed, started)
    print(outdir)
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set or [])
    splits, vocab = load_dataset(args.data)
    model_config = build_model_config(vocab, cfg.get("model", {}))
    base_cfg = build_train_config(cfg.get("train", {"learning_rate": 0.005, "epochs": 3}))
    seeds = cfg.get("seeds", [0, 1, 2])
    ablations = tuple(cfg.get("ablations", ("full", "no_kl", "no_cross_ce")))
    rows = compare_ablations(
        splits, base_cfg, model_config, vocab.lexicon, seeds,
        ablations=ablations,
        warmup_epochs=int(cfg.get("warmup_epochs", 30)),
        warmup_learning_rate=float(cfg.get("warmup_learning_rate", 0.02)),
    )

    outdir = resolve_outdir(args.out, "ablate", config_hash(cfg))
    outdir.mkdir(parents=True, exist_ok=True)
    json_path = outdir / "ablations.json"
    dump_json(rows, json_path)
    csv_path = outdir / "ablations.csv"
    write_csv(
        csv_path,
        ["ablation", "seed", "mono_acc", "cross_acc", "gap"],
        [
            [row["ablation"], seed, row["mono_acc"][i], row["cross_acc"][i], row["gap"][i]]
            for row in rows
            for i, seed in enumerate(row["seeds"])
        ]
        + [
            [row["ablation"], "mean", row["mono_mean"], row["cross_mean"], row["gap_mean"]]
            for row in rows
        ],
    )
    write_manifest(outdir, "ablate", cfg, [args.data], [json_path, csv_path], seeds, started)
    print(outdir)
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set or [])
    splits, vocab = load_dataset(args.data)
    state = load_checkpoint(args.checkpoint)
    samples = splits.split(cfg.get("split", "test"))
    results = evaluate_model(state, samples, vocab.lexicon, workers=args.workers)
    table = gap_table(results, source_lang=vocab.lexicon.src_code)

    outdir = resolve_outdir(args.out, "eval", config_hash(cfg))
    outdir.mkdir(parents=True, exist_ok=True)
    results_path = outdir / "eval_results.jsonl"
    write_json_records(
        (
            {
                "v": 1,
                "id": r.sample_id,
                "question_lang": r.question_lang,
                "qtype": r.qtype,
                "predicted": list(r.predicted),
                "normalized": list(r.normalized),
                "correct": r.correct,
                "f1": r.f1,
                "flagged": r.flagged,
            }
            for r in results
        ),
        results_path,
    )
    table_path = outdir / "gap_table.csv"
    rows = [
        ["qtype", row["lang"], row["qtype"], row["n"], row["accuracy"], row["f1"], "", ""]
        for row in table.qtype_rows
    ]
    rows += [
        ["lang", row["lang"], "", row["n"], row["accuracy"], row["f1"], "", ""]
        for row in table.lang_rows
    ]
    rows += [
        ["gap", row["lang"], "", "", "", "", row["accuracy_drop"],
         "" if row["relative_drop_pct"] is None else row["relative_drop_pct"]]
        for row in table.gap_rows
    ]
    write_csv(
        table_path,
        ["row_type", "lang", "qtype", "n", "accuracy", "f1",
         "accuracy_drop", "relative_drop_pct"],
        rows,
    )
    write_manifest(
        outdir, "eval", cfg, [args.data, args.checkpoint],
        [results_path, table_path], None, started,
    )
    print(outdir)
    return 0


def cmd_analyze_mi(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set or [])
    splits, vocab = load_dataset(args.data)
    state = load_checkpoint(args.checkpoint)
    samples = splits.split(cfg.get("split", "test"))

    noise_cfg = cfg.get("noise", {})
    if noise_cfg:
        noise = NoiseSpec(
            mean=float(noise_cfg.get("mean", 0.0)),
            stddev=float(noise_cfg["stddev"]),
            seed=int(noise_cfg.get("seed", 0)),
        )
    else:
        noise = default_noise_spec(state)
    reports = mi_reports(state, samples, vocab.lexicon, noise=noise, workers=args.workers)
    langs = {s.sample_id: s.question_lang.code for s in samples}
    summary = mi_accuracy_report(reports, langs, bins=int(cfg.get("bins", 20)))

    outdir = resolve_outdir(args.out, "analyze-mi", config_hash(cfg))
    outdir.mkdir(parents=True, exist_ok=True)
    reports_path = outdir / "mi_reports.jsonl"
    write_json_records(
        (
            {
                "v": 1,
                "id": r.sample_id,
                "question_lang": langs[r.sample_id],
                "h_uncond": r.h_uncond,
                "h_cond": r.h_cond,
                "mi": r.mi,
                "correct": r.correct,
                "cond_len": r.cond_len,
                "uncond_len": r.uncond_len,
            }
            for r in reports
        ),
        reports_path,
    )
    summary_path = outdir / "mi_summary.json"
    dump_json(
        {
            "per_lang": list(summary.per_lang),
            "pearson_mi_accuracy": summary.pearson_mi_accuracy,
            "bin_edges": list(summary.bin_edges),
            "noise": {"mean": noise.mean, "stddev": noise.stddev, "seed": noise.seed},
            "warnings": list(summary.warnings),
        },
        summary_path,
    )
    plot_files = emit_plots(summary, outdir)
    write_manifest(
        outdir, "analyze-mi", cfg, [args.data, args.checkpoint],
        [reports_path, summary_path] + plot_files, noise.seed, started,
    )
    print(outdir)
    return 0


def cmd_filter(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set or [])
    seed = int(cfg.get("seed", 0))
    thresholds_cfg = cfg.get("thresholds", {})
    thresholds = FilterThresholds(
        min_confidence=int(thresholds_cfg.get("min_confidence", 7)),
        max_jaccard=float(thresholds_cfg.get("max_jaccard", 0.1)),
        max_edit_ratio=float(thresholds_cfg.get("max_edit_ratio", 0.5)),
        min_consistency_score=int(thresholds_cfg.get("min_consistency_score", 7)),
    )
    pairs = [pair_from_payload(p) for p in read_json_records(args.pairs)]
    suite = mock_provider_suite(seed=seed)

    outdir = resolve_outdir(args.out, "filter", config_hash(cfg))
    outdir.mkdir(parents=True, exist_ok=True)
    kept, stats = run_filter_chain(
        pairs, thresholds, suite.qa_client, checkpoint_dir=outdir / "checkpoints"
    )

    kept_path = outdir / "kept.jsonl"
    write_json_records((pair_payload(p) for p in kept), kept_path)
    stats_path = outdir / "filter_stats.json"
    dump_json(stats.as_dict(), stats_path)
    outputs = [kept_path, stats_path]

    translation_cfg = cfg.get("translation", {})
    if translation_cfg.get("enabled", False):
        src_lang = translation_cfg.get("src_lang", "en")
        tgt_lang = translation_cfg.get("tgt_lang", "zh")
        threshold = float(translation_cfg.get("threshold", 0.8))
        review_rows = []
        accepted_rows = []
        for pair in kept:
            outcome = extend_multilingual(
                pair.question, src_lang, tgt_lang,
                suite.translation_client, suite.embedding_client, threshold,
            )
            payload = outcome.review_payload(pair.question, src_lang, tgt_lang)
            payload["id"] = pair.pair_id
            if outcome.accepted:
                accepted_rows.append(payload)
            else:
                review_rows.append(payload)
        accepted_path = outdir / "translations.jsonl"
        write_json_records(accepted_rows, accepted_path)
        review_path = outdir / "review_queue.jsonl"
        write_json_records(review_rows, review_path)
        outputs += [accepted_path, review_path]

    write_manifest(outdir, "filter", cfg, [args.pairs], outputs, seed, started)
    print(outdir)
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glyphvqa",
        description="Cross-lingual glyph-grid VQA toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, data=False, checkpoint=False, pairs=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, default=1,
                       help="worker threads for read-only fan-out")
        if data:
            p.add_argument("--data", required=True, help="dataset directory from synth")
        if checkpoint:
            p.add_argument("--checkpoint", required=checkpoint == "required",
                           help="model checkpoint file")
        if pairs:
            p.add_argument("--pairs", required=True, help="candidate pair records (jsonl)")

    p = sub.add_parser("synth", help="generate the synthetic bilingual VQA dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy model")
    common(p, data=True, checkpoint="optional")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="compare objective ablations across seeds")
    common(p, data=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="score a checkpoint and emit the gap table")
    common(p, data=True, checkpoint="required")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-mi", help="entropy and mutual-information analysis")
    common(p, data=True, checkpoint="required")
    p.set_defaults(func=cmd_analyze_mi)

    p = sub.add_parser("filter", help="run the QA curation filter chain")
    common(p, pairs=True)
    p.set_defaults(func=cmd_filter)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
