"""``medrecon-bench`` command-line driver.

Every command works inside one output directory (``--out``)::

    ingest COHORT_DIR   -> manifest.jsonl, ground_truth.jsonl
    serialise           -> prompts/<patient_id>/<strategy>.txt, prompts/prompts.jsonl
    run                 -> runs.jsonl (append-only, resumable)
    score               -> metrics.jsonl
    analyse             -> stats/table4.csv, stats/omissions.csv
    report              -> report/table3.{txt,csv}, report/table4.*, report/figures/*.csv

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from functools import lru_cache
from pathlib import Path
from typing import Sequence

from . import fhir_ingest, report, serialise
from .evaluate import MetricRow
from .inference import (
    MOCK_MODES,
    STORE_PATH_ENV,
    BackendError,
    MockBackend,
    ModelConfig,
    OllamaBackend,
    RunStore,
    StoreCorruptionError,
    run_campaign,
)
from ._common import read_jsonl

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

logger = logging.getLogger("medrecon_bench")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args: argparse.Namespace) -> report.CampaignConfig:
    if args.config:
        try:
            return report.load_config(args.config)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_USAGE) from exc
    return report.CampaignConfig()


def _out(args: argparse.Namespace, cfg: report.CampaignConfig) -> Path:
    return Path(args.out) if args.out else cfg.output_dir


def _store_path(args: argparse.Namespace, out: Path) -> Path:
    return Path(args.store or os.environ.get(STORE_PATH_ENV) or out / "runs.jsonl")


def _strategies(text: str | None, cfg: report.CampaignConfig) -> list[str]:
    codes = [c for c in text.split(",") if c.strip()] if text else list(cfg.strategies)
    try:
        return [serialise.Strategy.from_code(c).code for c in codes]
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CliError(f"{path} not found; run `{hint}` first", EXIT_DATA)
    return path


def _ground_truth(out: Path) -> dict[str, fhir_ingest.GroundTruth]:
    return fhir_ingest.read_ground_truth(_need(out / "ground_truth.jsonl", "ingest"))


def _manifest(out: Path) -> list[dict]:
    return fhir_ingest.read_manifest(_need(out / "manifest.jsonl", "ingest"))


def _prompt_reader(out: Path):
    root = out / "prompts"

    @lru_cache(maxsize=None)
    def prompt_for(patient_id: str, strategy: str) -> str:
        path = serialise.prompt_path(root, patient_id, serialise.Strategy.from_code(strategy))
        try:
            return path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise CliError(f"{path} not found; run `serialise` first", EXIT_DATA) from None

    return prompt_for


def _open_store(path: Path) -> RunStore:
    try:
        return RunStore(path)
    except StoreCorruptionError as exc:
        raise CliError(f"run store is corrupt: {exc}", EXIT_DATA) from exc


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _config(args)
    cohort_dir = Path(args.cohort_dir) if args.cohort_dir else cfg.cohort_dir
    if cohort_dir is None:
        raise CliError("no cohort directory given", EXIT_USAGE)
    if not cohort_dir.is_dir():
        raise CliError(f"{cohort_dir} is not a directory", EXIT_DATA)
    out = _out(args, cfg)
    result = fhir_ingest.ingest_directory(cohort_dir)
    for path, message in result.errors:
        print(f"error: {message}", file=sys.stderr)
    for path, reason in result.rejected:
        logger.info("rejected %s: %s", path.name, reason)
    if not result.accepted and not result.errors:
        raise CliError(f"{cohort_dir}: no bundles accepted into the cohort", EXIT_DATA)
    fhir_ingest.write_manifest(out / "manifest.jsonl", result.accepted)
    fhir_ingest.write_ground_truth(out / "ground_truth.jsonl", (gt for _, _, gt in result.accepted))
    print(f"accepted {len(result.accepted)}, rejected {len(result.rejected)}, errors {len(result.errors)} -> {out}")
    return EXIT_DATA if result.errors else EXIT_OK


def cmd_serialise(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    strategies = _strategies(args.strategies, cfg)
    prompts = []
    for row in _manifest(out):
        try:
            patient = fhir_ingest.load_bundle(row["source"])
        except (OSError, fhir_ingest.BundleError) as exc:
            raise CliError(f"cannot re-read {row['source']}: {exc}", EXIT_DATA) from exc
        prompts += [serialise.serialise(patient, s) for s in strategies]
    manifest = serialise.write_prompts(out / "prompts", prompts)
    print(f"wrote {len(prompts)} prompts -> {manifest.parent}")
    return EXIT_OK


def _models(args: argparse.Namespace, cfg: report.CampaignConfig, backend_kind: str, mode: str) -> list[ModelConfig]:
    if args.model:
        return [ModelConfig(m, args.num_ctx) for m in args.model]
    if cfg.models:
        return list(cfg.models)
    if backend_kind == "mock":
        return [ModelConfig(f"mock-{mode}", args.num_ctx)]
    raise CliError("no models configured; pass --model or a config file", EXIT_USAGE)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    backend_kind = args.backend or cfg.backend
    mode = args.mock_mode or cfg.mock_mode
    strategies = _strategies(args.strategies, cfg)
    models = _models(args, cfg, backend_kind, mode)
    gt = _ground_truth(out)
    patient_ids = [row["patient_id"] for row in _manifest(out)]
    prompt_for = _prompt_reader(out)
    for pid in patient_ids:
        for s in strategies:
            prompt_for(pid, s)

    store_path = _store_path(args, out)
    if store_path.exists() and store_path.stat().st_size > 0:
        if args.force:
            store_path.unlink()
        elif not args.resume:
            raise CliError(f"{store_path} already holds runs; pass --resume to continue or --force to start over", EXIT_USAGE)
    store = _open_store(store_path)

    if backend_kind == "mock":
        if mode not in MOCK_MODES:
            raise CliError(f"unknown mock mode {mode!r}", EXIT_USAGE)
        backend = MockBackend(mode, gt, k=args.mock_k if args.mock_k is not None else cfg.mock_k)
    elif backend_kind == "live":
        backend = OllamaBackend(args.backend_url or cfg.backend_url)
    else:
        raise CliError(f"unknown backend {backend_kind!r}", EXIT_USAGE)

    rep = run_campaign(
        patient_ids, strategies, models, backend, store, prompt_for,
        concurrency=args.concurrency or cfg.concurrency,
        max_attempts=cfg.max_attempts,
    )
    print(f"runs done {rep.done}, skipped {rep.skipped}, failed {rep.failed} -> {store_path}")
    for err in rep.errors:
        print(f"backend error: {err}", file=sys.stderr)
    return EXIT_BACKEND if rep.failed else EXIT_OK


def _scored(args: argparse.Namespace, out: Path) -> tuple[list[MetricRow], RunStore]:
    store = _open_store(_need(_store_path(args, out), "run"))
    gt = _ground_truth(out)
    missing = sorted({r.patient_id for r in store} - set(gt))
    if missing:
        raise CliError(f"runs reference patients without ground truth: {missing[:3]}", EXIT_DATA)
    return report.score_runs(store, gt), store


def cmd_score(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    metrics, _ = _scored(args, out)
    report.write_metrics(out / "metrics.jsonl", metrics)
    print(f"scored {len(metrics)} runs -> {out / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_analyse(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    metrics = [MetricRow.from_dict(d) for d in read_jsonl(_need(out / "metrics.jsonl", "score"))]
    if not metrics:
        raise CliError("metrics file is empty", EXIT_DATA)
    stats = out / "stats"
    stats.mkdir(parents=True, exist_ok=True)
    try:
        rows = report.statistics_rows(metrics, cfg.analysis)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    if rows is not None:
        (stats / "table4.csv").write_text(report.csv_text(report.TABLE4_COLUMNS, rows), encoding="utf-8")
    (stats / "omissions.csv").write_text(
        report.csv_text(report.OMISSION_COLUMNS, report.omission_rows(metrics, cfg.analysis)), encoding="utf-8"
    )
    print(f"statistics -> {stats}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    metrics, store = _scored(args, out)
    if not metrics:
        raise CliError("run store is empty", EXIT_DATA)
    gt = _ground_truth(out)
    spans = {row["patient_id"]: float(row["history_span_years"]) for row in _manifest(out)}
    try:
        written = report.write_report(
            out / "report", metrics, list(store), gt, spans, _prompt_reader(out), cfg.analysis, cfg.model_sizes
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    print((out / "report" / "table3.txt").read_text(encoding="utf-8"), end="")
    print(f"wrote {len(written)} files -> {out / 'report'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML campaign config")
    common.add_argument("--out", help="output directory (default: config output_dir or ./out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="medrecon-bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="parse bundles, filter the cohort, write ground truth")
    p.add_argument("cohort_dir", nargs="?")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("serialise", parents=[common], help="render prompts for each strategy")
    p.add_argument("--strategies", help="comma-separated subset of A,B,C,D")
    p.set_defaults(func=cmd_serialise)

    p = sub.add_parser("run", parents=[common], help="run the inference campaign")
    p.add_argument("--strategies", help="comma-separated subset of A,B,C,D")
    p.add_argument("--backend", choices=("live", "mock"))
    p.add_argument("--backend-url")
    p.add_argument("--mock-mode", help=f"one of: {', '.join(MOCK_MODES)}")
    p.add_argument("--mock-k", type=int)
    p.add_argument("--model", action="append", help="model id (repeatable); overrides the config")
    p.add_argument("--num-ctx", type=int, default=32768)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--store", help=f"run store path (env {STORE_PATH_ENV}; default <out>/runs.jsonl)")
    p.add_argument("--resume", action="store_true", help="continue an existing store")
    p.add_argument("--force", action="store_true", help="discard an existing store")
    p.set_defaults(func=cmd_run)

    for name, func, text in (
        ("score", cmd_score, "score the run store against ground truth"),
        ("analyse", cmd_analyse, "significance tests and omission analysis"),
        ("report", cmd_report, "results tables and figure data"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--store", help=f"run store path (env {STORE_PATH_ENV})")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
