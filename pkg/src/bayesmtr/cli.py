"""Command-line entry point.

Subcommands: generate | ingest | train | evaluate | predict | ablate |
attention-dump. Every command reads one config file, resolves the master seed
(--seed flag > config > BAYESMTR_SEED env var), writes its outputs plus a copy
of the resolved config into paths.out_dir, and is deterministic given
(config, seed).

Exit codes: 0 ok, 2 config error, 3 data error, 4 missing/invalid checkpoint,
5 lookup failure, 1 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from bayesmtr.attention import DETERMINISTIC
from bayesmtr.config import ConfigError, RunConfig, resolve_config, write_resolved
from bayesmtr.encoder import token_labels, tokenize_example
from bayesmtr.ingest import (
    CohortFormatError,
    PatientRecord,
    filter_plausible,
    load_cohort,
    make_example,
    split_cohort,
    write_cohort_csv,
)
from bayesmtr.metrics import evaluate, format_results_table, write_results_csv
from bayesmtr.model import ABLATIONS
from bayesmtr.seeding import substream_seed, torch_generator
from bayesmtr.synth import generate, write_ground_truth_csv
from bayesmtr.training import load_checkpoint, save_checkpoint, train
from bayesmtr.uncertainty import (
    predict_with_uncertainty,
    write_predictions_csv,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_LOOKUP = 5


class DataError(RuntimeError):
    """Unreadable or malformed input data."""


class CheckpointError(RuntimeError):
    """Missing or unreadable checkpoint."""


class PatientLookupError(KeyError):
    """Requested patient is not in the usable cohort."""


def _require_out_dir(cfg: RunConfig) -> None:
    if not cfg.out_dir.is_dir():
        raise ConfigError(f"output directory does not exist: {cfg.out_dir}")


def _require_parent(path: Path, what: str) -> None:
    if not path.parent.is_dir():
        raise ConfigError(f"directory for {what} does not exist: {path.parent}")


def _load_filtered(cfg: RunConfig) -> tuple[list[PatientRecord], int]:
    if not cfg.cohort_csv.is_file():
        raise DataError(f"cohort CSV not found: {cfg.cohort_csv}")
    try:
        cohort = load_cohort(cfg.cohort_csv)
    except CohortFormatError as exc:
        raise DataError(f"{cfg.cohort_csv}: {exc}") from exc
    return filter_plausible(cohort, cfg.onset)


def _split(cfg: RunConfig, cohort: list[PatientRecord]):
    try:
        return split_cohort(cohort, substream_seed(cfg.seed, "data.split"))
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _load_model(cfg: RunConfig):
    if not cfg.checkpoint.is_file():
        raise CheckpointError(f"checkpoint not found: {cfg.checkpoint}")
    try:
        return load_checkpoint(cfg.checkpoint)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{cfg.checkpoint}: {exc}") from exc


def cmd_generate(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    _require_out_dir(cfg)
    _require_parent(cfg.cohort_csv, "paths.cohort_csv")
    _require_parent(cfg.ground_truth_csv, "paths.ground_truth_csv")
    try:
        records, ground_truth = generate(cfg.generator)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_cohort_csv(records, cfg.cohort_csv)
    write_ground_truth_csv(ground_truth, cfg.ground_truth_csv)
    write_resolved(cfg)
    n_visits = sum(len(r.visits) for r in records)
    print(
        f"generated {len(records)} patients / {n_visits} visits -> {cfg.cohort_csv} "
        f"(ground truth: {cfg.ground_truth_csv}, clamped {ground_truth.clamped_count})"
    )
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    _require_out_dir(cfg)
    kept, dropped = _load_filtered(cfg)
    split = _split(cfg, kept)
    write_cohort_csv(kept, cfg.out_dir / "filtered_cohort.csv")
    manifest = {
        "n_patients": len(kept),
        "dropped": dropped,
        "train": [p.patient_id for p in split.train],
        "val": [p.patient_id for p in split.val],
        "test": [p.patient_id for p in split.test],
    }
    with open(cfg.out_dir / "split_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    write_resolved(cfg)
    print(
        f"ingested {len(kept)} patients (dropped {dropped}); split "
        f"{len(split.train)}/{len(split.val)}/{len(split.test)}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    _require_out_dir(cfg)
    _require_parent(cfg.checkpoint, "paths.checkpoint")
    kept, _ = _load_filtered(cfg)
    split = _split(cfg, kept)
    model, report = train(split, cfg.train, cfg.model, cfg.onset)
    save_checkpoint(
        model,
        cfg.checkpoint,
        metadata={
            "variant": cfg.train.ablation,
            "seed": cfg.seed,
            "onset": cfg.onset.isoformat(),
            "epochs": cfg.train.epochs,
            "split_sizes": [len(split.train), len(split.val), len(split.test)],
        },
    )
    report.save_json(cfg.out_dir / "train_report.json")
    write_resolved(cfg)
    last = report.epochs[-1]
    print(
        f"trained {cfg.train.ablation} for {cfg.train.epochs} epochs in "
        f"{report.wall_clock_s:.1f}s; final train loss {last.train.total:.6f}, "
        f"best val {report.best_val_total:.6f} (epoch {report.best_epoch}) "
        f"-> {cfg.checkpoint}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    _require_out_dir(cfg)
    model, _ = _load_model(cfg)
    if args.deterministic:
        model.set_mode(DETERMINISTIC)
    kept, _ = _load_filtered(cfg)
    split = _split(cfg, kept)
    test_toks = [tokenize_example(make_example(p, cfg.onset)) for p in split.test]
    if not test_toks:
        raise DataError("test split is empty")
    result = evaluate(
        model,
        test_toks,
        T=cfg.T,
        generator=torch_generator(cfg.seed, "predict"),
    )
    reports = [result.report] + ([result.mc_report] if result.mc_report else [])
    write_results_csv(reports, cfg.out_dir / "metrics.csv")
    write_results_csv(
        [r.raw_units() for r in reports], cfg.out_dir / "metrics_raw.csv"
    )
    (cfg.out_dir / "metrics.txt").write_text(
        format_results_table(reports), encoding="utf-8"
    )
    if result.mc_predictions:
        write_predictions_csv(
            list(zip(result.patient_ids, result.mc_predictions)),
            cfg.out_dir / "predictions.csv",
            z=cfg.z,
        )
    write_resolved(cfg)
    print(format_results_table(reports), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    _require_out_dir(cfg)
    model, _ = _load_model(cfg)
    if args.deterministic:
        model.set_mode(DETERMINISTIC)
    kept, _ = _load_filtered(cfg)
    if args.patient is not None:
        selected = [p for p in kept if p.patient_id == args.patient]
        if not selected:
            raise PatientLookupError(args.patient)
    else:
        selected = kept
    generator = torch_generator(cfg.seed, "predict")
    predictions = []
    for record in selected:
        tok = tokenize_example(make_example(record, cfg.onset))
        predictions.append(
            (record.patient_id, predict_with_uncertainty(model, tok, cfg.T, generator))
        )
    write_predictions_csv(predictions, cfg.out_dir / "predictions.csv", z=cfg.z)
    write_resolved(cfg)
    print(f"wrote predictions for {len(predictions)} patients -> "
          f"{cfg.out_dir / 'predictions.csv'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    _require_out_dir(cfg)
    kept, _ = _load_filtered(cfg)
    split = _split(cfg, kept)
    test_toks = [tokenize_example(make_example(p, cfg.onset)) for p in split.test]
    if not test_toks:
        raise DataError("test split is empty")
    reports = []
    for variant in ABLATIONS:
        train_cfg = replace(cfg.train, ablation=variant)
        model, report = train(split, train_cfg, cfg.model, cfg.onset)
        save_checkpoint(
            model,
            cfg.out_dir / f"checkpoint_{variant}.json",
            metadata={"variant": variant, "seed": cfg.seed},
        )
        report.save_json(cfg.out_dir / f"train_report_{variant}.json")
        result = evaluate(model, test_toks, variant=variant)
        reports.append(result.report)
    write_results_csv(reports, cfg.out_dir / "ablation_metrics.csv")
    (cfg.out_dir / "ablation_metrics.txt").write_text(
        format_results_table(reports), encoding="utf-8"
    )
    write_resolved(cfg)
    print(format_results_table(reports), end="")
    return EXIT_OK


def cmd_attention_dump(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    _require_out_dir(cfg)
    model, _ = _load_model(cfg)
    kept, _ = _load_filtered(cfg)
    selected = [p for p in kept if p.patient_id == args.patient]
    if not selected:
        raise PatientLookupError(args.patient)
    tok = tokenize_example(make_example(selected[0], cfg.onset))
    maps = model.attention_maps(tok, mode=DETERMINISTIC)
    encoded_labels = token_labels(tok.k)
    n_heads = model.cfg.n_heads
    written = []
    for index, matrix in enumerate(maps):
        layer, head = divmod(index, n_heads)
        path = cfg.out_dir / f"attention_{args.patient}_L{layer}_H{head}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["", *encoded_labels])
            for label, row in zip(encoded_labels, matrix.tolist()):
                writer.writerow([label, *[repr(v) for v in row]])
        written.append(path.name)
    write_resolved(cfg)
    print(f"wrote {len(written)} attention matrices for {args.patient} "
          f"-> {cfg.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bayesmtr",
        description="Bayesian multi-target biomarker prediction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, needs_patient: bool = False, patient_required: bool = False):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to run config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument(
            "--deterministic",
            action="store_true",
            help="force deterministic (mean-weight) forward passes",
        )
        if needs_patient:
            p.add_argument(
                "--patient", required=patient_required, default=None,
                help="patient id",
            )
        p.set_defaults(func=func)
        return p

    add("generate", cmd_generate)
    add("ingest", cmd_ingest)
    add("train", cmd_train)
    add("evaluate", cmd_evaluate)
    add("predict", cmd_predict, needs_patient=True)
    add("ablate", cmd_ablate)
    add("attention-dump", cmd_attention_dump, needs_patient=True, patient_required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CohortFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except PatientLookupError as exc:
        print(f"unknown patient: {exc.args[0]}", file=sys.stderr)
        return EXIT_LOOKUP
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
