"""Campaign configuration, scoring of a run store, and table/figure emission.

Figure data is written as one CSV per figure; columns per file:

=====================  ==========================================================
heatmap.csv            model_id, strategy, mean_f1
strategy_rank.csv      model_id, params_billion, strategy, mean_f1
pr_scatter.csv         model_id, strategy, mean_precision, mean_recall
recall_by_count.csv    model_id, strategy, bin_label, bin_lo, bin_hi, mean_recall, n_patients
recall_by_span.csv     model_id, strategy, best_strategy, bin_label, bin_lo, bin_hi, mean_recall, n_patients
failure_breakdown.csv  model_id, strategy, failure_class, count
f1_distribution.csv    model_id, strategy, best_strategy, patient_id, f1
=====================  ==========================================================
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import yaml

from . import analyse
from ._common import write_jsonl
from .evaluate import MetricRow, SummaryRow, aggregate, parse_model_output, score
from .fhir_ingest import GroundTruth
from .inference import DEFAULT_BACKEND_URL, ModelConfig, RunResult
from .serialise import Strategy

FIGURE_IDS = (
    "heatmap",
    "strategy_rank",
    "pr_scatter",
    "recall_by_count",
    "recall_by_span",
    "failure_breakdown",
    "f1_distribution",
)

TABLE3_COLUMNS = (
    "Model", "Strategy", "Mean F1", "Mean Prec.", "Mean Rec.", "Median F1", "Perfect", "Zero F1", "Parse Fail",
)
TABLE4_COLUMNS = ("Model", "Test", "W", "z", "p (raw)", "p (corr.)", "r", "effect", "sig", "n_pairs", "n_nonzero", "method")


@dataclass
class AnalysisOptions:
    k: int = 4
    baseline: str = "A"
    challenger: str = "C"
    long_name_chars: int = analyse.LONG_NAME_CHARS
    echo_threshold: int = 80
    active_singleton_max: int = analyse.ACTIVE_COUNT_SINGLETON_MAX
    span_edges: tuple[float, ...] = analyse.SPAN_EDGES
    cross_model_pairs: tuple[tuple[str, str], ...] = ()
    cross_strategy: str = "C"
    top_k_missed: int = 5


@dataclass
class CampaignConfig:
    cohort_dir: Path | None = None
    output_dir: Path = Path("out")
    strategies: tuple[str, ...] = ("A", "B", "C", "D")
    models: tuple[ModelConfig, ...] = ()
    model_sizes: dict[str, float] = field(default_factory=dict)
    backend: str = "mock"
    backend_url: str | None = None
    mock_mode: str = "oracle"
    mock_k: int = 1
    concurrency: int = 1
    max_attempts: int = 3
    analysis: AnalysisOptions = field(default_factory=AnalysisOptions)

    def validate(self) -> None:
        if not self.strategies:
            raise ValueError("config: at least one strategy is required")
        for s in self.strategies:
            Strategy.from_code(s)
        if not self.models:
            raise ValueError("config: at least one model is required")
        if self.backend not in ("live", "mock"):
            raise ValueError(f"config: backend must be 'live' or 'mock', not {self.backend!r}")


def load_config(path: str | Path) -> CampaignConfig:
    """Read a YAML campaign config (see ``demos/campaign.yaml`` for the layout)."""
    with Path(path).open(encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    return config_from_dict(doc)


def config_from_dict(doc: Mapping[str, Any]) -> CampaignConfig:
    backend = doc.get("backend") or {}
    if isinstance(backend, str):
        backend = {"kind": backend}
    models, sizes = [], {}
    for m in doc.get("models") or []:
        cfg = ModelConfig(
            model_id=str(m["model_id"]),
            runtime_context_tokens=int(m.get("runtime_context_tokens", 32768)),
            temperature=float(m.get("temperature", 0.0)),
            backend_url=str(m.get("backend_url") or backend.get("url") or DEFAULT_BACKEND_URL),
            request_timeout_seconds=int(m.get("request_timeout_seconds", 600)),
        )
        models.append(cfg)
        if "params_billion" in m:
            sizes[cfg.model_id] = float(m["params_billion"])
    a = doc.get("analysis") or {}
    analysis = AnalysisOptions(
        k=int(a.get("k", 4)),
        baseline=str(a.get("baseline", "A")),
        challenger=str(a.get("challenger", "C")),
        long_name_chars=int(a.get("long_name_chars", analyse.LONG_NAME_CHARS)),
        echo_threshold=int(a.get("echo_threshold", 80)),
        active_singleton_max=int(a.get("active_singleton_max", analyse.ACTIVE_COUNT_SINGLETON_MAX)),
        span_edges=tuple(float(x) for x in a.get("span_edges", analyse.SPAN_EDGES)),
        cross_model_pairs=tuple((str(x), str(y)) for x, y in a.get("cross_model_pairs", [])),
        cross_strategy=str(a.get("cross_strategy", "C")),
        top_k_missed=int(a.get("top_k_missed", 5)),
    )
    cfg = CampaignConfig(
        cohort_dir=Path(doc["cohort_dir"]) if doc.get("cohort_dir") else None,
        output_dir=Path(doc.get("output_dir", "out")),
        strategies=tuple(str(s).upper() for s in doc.get("strategies", ("A", "B", "C", "D"))),
        models=tuple(models),
        model_sizes=sizes,
        backend=str(backend.get("kind", "mock")),
        backend_url=backend.get("url"),
        mock_mode=str(backend.get("mock_mode", "oracle")),
        mock_k=int(backend.get("k", 1)),
        concurrency=int(backend.get("concurrency", 1)),
        max_attempts=int(backend.get("max_attempts", 3)),
        analysis=analysis,
    )
    return cfg


def score_runs(results: Iterable[RunResult], gt: Mapping[str, GroundTruth]) -> list[MetricRow]:
    """Score every run, in a deterministic (model, strategy, patient) order."""
    rows = [score(parse_model_output(r.raw_output), gt[r.patient_id], r.model_id, r.strategy) for r in results]
    return sorted(rows, key=lambda m: (m.model_id, m.strategy, m.patient_id))


def write_metrics(path: str | Path, rows: Iterable[MetricRow]) -> int:
    return write_jsonl(path, (r.to_dict() for r in rows))


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def table3_rows(summary: Sequence[SummaryRow]) -> list[list[str]]:
    return [
        [
            s.model_id, s.strategy, _fmt(s.mean_f1), _fmt(s.mean_precision), _fmt(s.mean_recall),
            _fmt(s.median_f1), str(s.perfect), str(s.zero_f1), str(s.parse_fail),
        ]
        for s in summary
    ]


def aligned_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]

    def line(cells: Sequence[str]) -> str:
        return "  ".join(
            str(c).ljust(w) if i < 2 else str(c).rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
        ).rstrip()

    out = [line(header), "  ".join("-" * w for w in widths)]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _p_text(p: float) -> str:
    if p < 1e-10:
        return "<1e-10"
    return f"{p:.3g}" if p < 0.001 else f"{p:.3f}"


def table4_rows(rows: Sequence[analyse.ComparisonRow]) -> list[list[str]]:
    out = []
    for row in rows:
        o = row.outcome
        out.append([
            row.label, row.test, f"{o.W:g}", f"{o.z_score:.4f}", _p_text(o.p_raw), _p_text(o.p_corrected),
            f"{o.r_effect:.3f}", o.effect_label, o.stars, str(o.n_pairs), str(o.n_nonzero), o.method,
        ])
    return out


def best_strategy(summary: Sequence[SummaryRow]) -> dict[str, str]:
    """Strategy with the highest mean F1 per model (ties go to the earlier code)."""
    best: dict[str, SummaryRow] = {}
    for s in summary:
        cur = best.get(s.model_id)
        if cur is None or s.mean_f1 > cur.mean_f1 or (s.mean_f1 == cur.mean_f1 and s.strategy < cur.strategy):
            best[s.model_id] = s
    return {m: s.strategy for m, s in best.items()}


def _inf(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:g}"


def figure_tables(
    metrics: Sequence[MetricRow],
    results: Sequence[RunResult],
    gt: Mapping[str, GroundTruth],
    spans: Mapping[str, float],
    prompt_for: Callable[[str, str], str],
    options: AnalysisOptions,
    model_sizes: Mapping[str, float] | None = None,
) -> dict[str, tuple[tuple[str, ...], list[list[Any]]]]:
    summary = aggregate(metrics)
    best = best_strategy(summary)
    sizes = model_sizes or {}
    figs: dict[str, tuple[tuple[str, ...], list[list[Any]]]] = {}
    figs["heatmap"] = (("model_id", "strategy", "mean_f1"), [[s.model_id, s.strategy, _fmt(s.mean_f1)] for s in summary])
    figs["strategy_rank"] = (
        ("model_id", "params_billion", "strategy", "mean_f1"),
        [[s.model_id, _inf(sizes[s.model_id]) if s.model_id in sizes else "", s.strategy, _fmt(s.mean_f1)] for s in summary],
    )
    figs["pr_scatter"] = (
        ("model_id", "strategy", "mean_precision", "mean_recall"),
        [[s.model_id, s.strategy, _fmt(s.mean_precision), _fmt(s.mean_recall)] for s in summary],
    )
    by_count = analyse.recall_by_active_count(metrics, gt, options.active_singleton_max)
    figs["recall_by_count"] = (
        ("model_id", "strategy", "bin_label", "bin_lo", "bin_hi", "mean_recall", "n_patients"),
        [
            [m, s, b.bin_label, _inf(b.bin_lo), _inf(b.bin_hi), _fmt(b.mean_recall), b.n_patients]
            for (m, s), bins in sorted(by_count.items()) for b in bins
        ],
    )
    by_span = analyse.recall_by_history_span(metrics, spans, options.span_edges)
    figs["recall_by_span"] = (
        ("model_id", "strategy", "best_strategy", "bin_label", "bin_lo", "bin_hi", "mean_recall", "n_patients"),
        [
            [m, s, int(best.get(m) == s), b.bin_label, _inf(b.bin_lo), _inf(b.bin_hi), _fmt(b.mean_recall), b.n_patients]
            for (m, s), bins in sorted(by_span.items()) for b in bins
        ],
    )
    breakdown = analyse.failure_breakdown(results, prompt_for, echo_threshold=options.echo_threshold)
    figs["failure_breakdown"] = (
        ("model_id", "strategy", "failure_class", "count"),
        [[m, s, fc.value, n] for (m, s), counts in sorted(breakdown.items()) for fc, n in counts.items()],
    )
    figs["f1_distribution"] = (
        ("model_id", "strategy", "best_strategy", "patient_id", "f1"),
        [[r.model_id, r.strategy, int(best.get(r.model_id) == r.strategy), r.patient_id, f"{r.f1:.6f}"] for r in metrics],
    )
    return figs


def omission_rows(metrics: Sequence[MetricRow], options: AnalysisOptions) -> list[list[Any]]:
    """One summary line per (model, strategy) plus its top missed names."""
    out = []
    groups: dict[tuple[str, str], list[MetricRow]] = {}
    for m in metrics:
        groups.setdefault((m.model_id, m.strategy), []).append(m)
    for (model, strategy), rows in sorted(groups.items()):
        rep = analyse.omission_analysis(rows, options.long_name_chars, options.top_k_missed)
        top = "; ".join(f"{name} ({n}/{rep.active_counts[name]})" for name, n in rep.top_missed)
        out.append([model, strategy, rep.total_fn, rep.total_tp, f"{rep.fn_long_share:.4f}", f"{rep.tp_long_share:.4f}", top])
    return out


OMISSION_COLUMNS = ("model_id", "strategy", "omissions", "true_positives", "fn_long_share", "tp_long_share", "top_missed")


def write_report(
    outdir: str | Path,
    metrics: Sequence[MetricRow],
    results: Sequence[RunResult],
    gt: Mapping[str, GroundTruth],
    spans: Mapping[str, float],
    prompt_for: Callable[[str, str], str],
    options: AnalysisOptions | None = None,
    model_sizes: Mapping[str, float] | None = None,
) -> list[Path]:
    """Write the results table (text + CSV), significance table, omissions, and figure CSVs."""
    options = options or AnalysisOptions()
    outdir = Path(outdir)
    (outdir / "figures").mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name: str, text: str) -> None:
        path = outdir / name
        path.write_text(text, encoding="utf-8")
        written.append(path)

    summary = aggregate(metrics)
    t3 = table3_rows(summary)
    emit("table3.txt", aligned_text(TABLE3_COLUMNS, t3))
    emit("table3.csv", csv_text(TABLE3_COLUMNS, t3))

    t4 = statistics_rows(metrics, options)
    if t4 is not None:
        emit("table4.csv", csv_text(TABLE4_COLUMNS, t4))
        emit("table4.txt", aligned_text(TABLE4_COLUMNS, t4))
    emit("omissions.csv", csv_text(OMISSION_COLUMNS, omission_rows(metrics, options)))

    for fig_id, (header, rows) in figure_tables(metrics, results, gt, spans, prompt_for, options, model_sizes).items():
        emit(f"figures/{fig_id}.csv", csv_text(header, rows))
    return written


def statistics_rows(metrics: Sequence[MetricRow], options: AnalysisOptions) -> list[list[str]] | None:
    """Significance-table rows, or None when no model has both compared strategies."""
    strategies_by_model: dict[str, set[str]] = {}
    for m in metrics:
        strategies_by_model.setdefault(m.model_id, set()).add(m.strategy)
    models = [
        model for model in dict.fromkeys(m.model_id for m in metrics)
        if {options.baseline, options.challenger} <= strategies_by_model[model]
    ]
    if not models and not options.cross_model_pairs:
        return None
    rows = analyse.comparison_table(
        metrics, models, options.baseline, options.challenger, options.k,
        options.cross_model_pairs, options.cross_strategy,
    )
    return table4_rows(rows)
