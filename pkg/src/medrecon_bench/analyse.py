"""Paired significance tests and the stratified/omission/failure analyses."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from scipy.stats import norm

from .evaluate import FailureClass, MetricRow, classify_failure
from .fhir_ingest import GroundTruth, PatientRecord
from .inference import RunResult

EXACT_MAX_NONZERO = 25
CONTINUITY_CORRECTION = 0.5
DIFF_DECIMALS = 12
LONG_NAME_CHARS = 50
ACTIVE_COUNT_SINGLETON_MAX = 10
SPAN_EDGES = (10.0, 15.0, 20.0, 25.0)
EFFECT_THRESHOLDS = ((0.5, "large"), (0.3, "medium"), (0.1, "small"))


@dataclass(frozen=True)
class WilcoxonOutcome:
    W: float
    z_score: float
    p_raw: float
    p_corrected: float
    r_effect: float
    n_pairs: int
    n_nonzero: int
    method: str

    @property
    def effect_label(self) -> str:
        return effect_size_label(self.r_effect)

    @property
    def stars(self) -> str:
        return significance_stars(self.p_corrected)


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    test: str
    outcome: WilcoxonOutcome


@dataclass(frozen=True)
class StratifiedRecall:
    bin_label: str
    bin_lo: float
    bin_hi: float
    mean_recall: float
    n_patients: int


@dataclass
class OmissionReport:
    fn_counts: Counter = field(default_factory=Counter)
    tp_counts: Counter = field(default_factory=Counter)
    active_counts: Counter = field(default_factory=Counter)
    fn_long_share: float = 0.0
    tp_long_share: float = 0.0
    top_missed: list[tuple[str, int]] = field(default_factory=list)
    threshold_chars: int = LONG_NAME_CHARS

    @property
    def total_fn(self) -> int:
        return sum(self.fn_counts.values())

    @property
    def total_tp(self) -> int:
        return sum(self.tp_counts.values())


def _doubled_ranks(abs_values: Sequence[float]) -> list[int]:
    """Twice the average rank of each value, so tied ranks stay integral."""
    order = sorted(range(len(abs_values)), key=lambda i: abs_values[i])
    ranks = [0] * len(abs_values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and abs_values[order[j + 1]] == abs_values[order[i]]:
            j += 1
        # positions i+1 .. j+1 share the average rank (i + j + 2) / 2
        for k in range(i, j + 1):
            ranks[order[k]] = i + j + 2
        i = j + 1
    return ranks


def _exact_two_sided(doubled: Sequence[int], w2: int) -> float:
    """P(|W - E W| >= |w - E W|) under random signs, by counting subset sums."""
    total = sum(doubled)
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in doubled:
        for s in range(reach, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        reach += r
    threshold = abs(2 * w2 - total)
    hits = sum(c for s, c in enumerate(counts) if c and abs(2 * s - total) >= threshold)
    return min(1.0, hits / 2 ** len(doubled))


def _tie_sizes(abs_values: Sequence[float]) -> list[int]:
    return [t for t in Counter(abs_values).values() if t > 1]


def wilcoxon_signed_rank(
    pairs: Sequence[tuple[float, float]],
    method: str = "auto",
) -> WilcoxonOutcome:
    """Two-sided Wilcoxon signed-rank test on differences ``b - a``.

    Zero differences are dropped before ranking but still count toward
    ``n_pairs`` (and hence the effect size).  With up to 25 non-zero
    differences the p-value comes from the exact, tie-aware null distribution;
    above that a tie-corrected normal approximation with continuity correction
    is used.  ``method`` may force ``"exact"`` or ``"normal_approx"``.
    """
    if not pairs:
        raise ValueError("wilcoxon_signed_rank needs at least one pair")
    diffs = [round(b - a, DIFF_DECIMALS) for a, b in pairs]
    nonzero = [d for d in diffs if d != 0]
    n_pairs, n = len(diffs), len(nonzero)
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_NONZERO else "normal_approx"
    if method not in ("exact", "normal_approx"):
        raise ValueError(f"unknown method {method!r}")
    if n == 0:
        return WilcoxonOutcome(0.0, 0.0, 1.0, 1.0, 0.0, n_pairs, 0, method)

    abs_d = [abs(d) for d in nonzero]
    doubled = _doubled_ranks(abs_d)
    w2 = sum(r for r, d in zip(doubled, nonzero) if d > 0)
    w = w2 / 2

    mean = n * (n + 1) / 4
    var = n * (n + 1) * (2 * n + 1) / 24 - sum(t**3 - t for t in _tie_sizes(abs_d)) / 48
    dev = w - mean
    z = math.copysign(max(abs(dev) - CONTINUITY_CORRECTION, 0.0), dev) / math.sqrt(var)

    if method == "exact":
        p = _exact_two_sided(doubled, w2)
    else:
        p = min(1.0, 2 * norm.sf(abs(z)))
    return WilcoxonOutcome(
        W=w,
        z_score=z,
        p_raw=p,
        p_corrected=p,
        r_effect=effect_size_r(z, n_pairs),
        n_pairs=n_pairs,
        n_nonzero=n,
        method=method,
    )


def bonferroni(p: float, k: int) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if k < 1:
        raise ValueError("k must be >= 1")
    return min(1.0, k * p)


def effect_size_r(z: float, n_pairs: int) -> float:
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    return abs(z) / math.sqrt(n_pairs)


def effect_size_label(r: float) -> str:
    for cut, label in EFFECT_THRESHOLDS:
        if r >= cut:
            return label
    return "below-small"


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "ns"


def _f1_by_patient(metrics: Iterable[MetricRow], model: str, strategy: str) -> dict[str, float]:
    return {m.patient_id: m.f1 for m in metrics if m.model_id == model and m.strategy == strategy}


def _paired(a: Mapping[str, float], b: Mapping[str, float], what: str) -> list[tuple[float, float]]:
    if not a or not b:
        raise ValueError(f"{what}: no scored runs")
    if set(a) != set(b):
        only_a, only_b = sorted(set(a) - set(b)), sorted(set(b) - set(a))
        raise ValueError(f"{what}: patient sets differ (only first: {only_a[:3]}, only second: {only_b[:3]})")
    return [(a[pid], b[pid]) for pid in sorted(a)]


def _with_correction(outcome: WilcoxonOutcome, k: int) -> WilcoxonOutcome:
    return WilcoxonOutcome(
        outcome.W, outcome.z_score, outcome.p_raw, bonferroni(outcome.p_raw, k),
        outcome.r_effect, outcome.n_pairs, outcome.n_nonzero, outcome.method,
    )


def strategy_comparison_suite(
    metrics: Sequence[MetricRow],
    model: str,
    baseline: str = "A",
    challenger: str = "C",
    k: int = 4,
) -> WilcoxonOutcome:
    """Within-model strategy test, paired by patient, Bonferroni-corrected by ``k``."""
    pairs = _paired(
        _f1_by_patient(metrics, model, baseline),
        _f1_by_patient(metrics, model, challenger),
        f"{model} {baseline} vs {challenger}",
    )
    return _with_correction(wilcoxon_signed_rank(pairs), k)


def cross_model_comparison(
    metrics: Sequence[MetricRow],
    model_a: str,
    model_b: str,
    strategy: str = "C",
    k: int = 1,
) -> WilcoxonOutcome:
    pairs = _paired(
        _f1_by_patient(metrics, model_a, strategy),
        _f1_by_patient(metrics, model_b, strategy),
        f"{model_a} vs {model_b} on {strategy}",
    )
    return _with_correction(wilcoxon_signed_rank(pairs), k)


def comparison_table(
    metrics: Sequence[MetricRow],
    models: Sequence[str],
    baseline: str = "A",
    challenger: str = "C",
    k: int = 4,
    cross_pairs: Sequence[tuple[str, str]] = (),
    cross_strategy: str = "C",
) -> list[ComparisonRow]:
    """Within-model rows for each model, then any requested cross-model rows."""
    rows = [
        ComparisonRow(model, f"{baseline} vs {challenger}", strategy_comparison_suite(metrics, model, baseline, challenger, k))
        for model in models
    ]
    for a, b in cross_pairs:
        rows.append(ComparisonRow(f"{a} vs {b}", f"{cross_strategy} cross-model", cross_model_comparison(metrics, a, b, cross_strategy)))
    return rows


def _group(metrics: Iterable[MetricRow]) -> dict[tuple[str, str], list[MetricRow]]:
    out: dict[tuple[str, str], list[MetricRow]] = {}
    for m in metrics:
        out.setdefault((m.model_id, m.strategy), []).append(m)
    return out


def _bin_means(members: Sequence[tuple[float, MetricRow]], bins: Sequence[tuple[str, float, float]]) -> list[StratifiedRecall]:
    out = []
    for label, lo, hi in bins:
        inside = [m.recall for v, m in members if lo <= v < hi]
        if inside:
            out.append(StratifiedRecall(label, lo, hi, sum(inside) / len(inside), len(inside)))
    return out


def active_count_bins(singleton_max: int = ACTIVE_COUNT_SINGLETON_MAX) -> list[tuple[str, float, float]]:
    bins = [(str(k), float(k), float(k + 1)) for k in range(1, singleton_max + 1)]
    bins.append((f"{singleton_max + 1}+", float(singleton_max + 1), math.inf))
    return bins


def span_bins(edges: Sequence[float] = SPAN_EDGES) -> list[tuple[str, float, float]]:
    bins = [(f"<{edges[0]:g}", 0.0, edges[0])]
    for lo, hi in zip(edges, edges[1:]):
        bins.append((f"{lo:g}-{hi:g}", lo, hi))
    bins.append((f"{edges[-1]:g}+", edges[-1], math.inf))
    return bins


def recall_by_active_count(
    metrics: Iterable[MetricRow],
    gt: Mapping[str, GroundTruth],
    singleton_max: int = ACTIVE_COUNT_SINGLETON_MAX,
) -> dict[tuple[str, str], list[StratifiedRecall]]:
    bins = active_count_bins(singleton_max)
    return {
        key: _bin_means([(len(gt[m.patient_id].active_names), m) for m in rows], bins)
        for key, rows in _group(metrics).items()
    }


def recall_by_history_span(
    metrics: Iterable[MetricRow],
    patients: Mapping[str, PatientRecord] | Mapping[str, float],
    edges: Sequence[float] = SPAN_EDGES,
) -> dict[tuple[str, str], list[StratifiedRecall]]:
    """Mean recall per history-span bin; ``patients`` maps id to a record or a span in years."""
    bins = span_bins(edges)

    def span(pid: str) -> float:
        v = patients[pid]
        return v.history_span_years if isinstance(v, PatientRecord) else float(v)

    return {key: _bin_means([(span(m.patient_id), m) for m in rows], bins) for key, rows in _group(metrics).items()}


def omission_analysis(
    metrics: Iterable[MetricRow],
    threshold_chars: int = LONG_NAME_CHARS,
    top_k: int = 5,
    include_parse_failures: bool = False,
) -> OmissionReport:
    """Which ground-truth names get missed, and are the missed ones longer?

    Long-name shares are computed over occurrences (one per run in which the
    name was missed or matched).
    """
    report = OmissionReport(threshold_chars=threshold_chars)
    for m in metrics:
        if m.parse_failed and not include_parse_failures:
            continue
        report.fn_counts.update(m.missed)
        report.tp_counts.update(m.matched)
        report.active_counts.update(m.missed + m.matched)

    def long_share(c: Counter) -> float:
        total = sum(c.values())
        return sum(n for name, n in c.items() if len(name) > threshold_chars) / total if total else 0.0

    report.fn_long_share = long_share(report.fn_counts)
    report.tp_long_share = long_share(report.tp_counts)
    report.top_missed = sorted(report.fn_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    return report


def failure_breakdown(
    results: Iterable[RunResult],
    prompt_for: Callable[[str, str], str],
    **classifier_options,
) -> dict[tuple[str, str], dict[FailureClass, int]]:
    out: dict[tuple[str, str], dict[FailureClass, int]] = {}
    for r in results:
        counts = out.setdefault((r.model_id, r.strategy), {fc: 0 for fc in FailureClass})
        counts[classify_failure(r.raw_output, prompt_for(r.patient_id, r.strategy), **classifier_options)] += 1
    return out
