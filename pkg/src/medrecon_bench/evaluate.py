"""Parse raw model output, score it against ground truth, and classify failures.

Matching is byte-exact: no trimming, no case folding, no RxNorm
normalisation.  A prediction that cannot be read as a JSON array of strings
scores zero on every metric.
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

from ._common import lower_median
from .fhir_ingest import GroundTruth

ECHO_PREFIX_CHARS = 80
GREETING_WINDOW_CHARS = 40
GREETING_LEXICON = (
    "hello",
    "hi",
    "hey",
    "greetings",
    "good morning",
    "good afternoon",
    "good evening",
    "thank you",
    "thanks",
    "dear",
    "welcome",
    "how can i help",
    "how may i help",
    "i'm here to help",
    "i am here to help",
)

_FENCE_RE = re.compile(r"\A\s*```[^\n`]*\n(.*?)\n?[ \t]*```\s*\Z", re.DOTALL)


class ParsePath(str, enum.Enum):
    STRICT = "strict"
    FENCE_STRIPPED = "fence_stripped"
    FAILED = "failed"


class FailureClass(str, enum.Enum):
    PARSEABLE = "parseable"
    GARBLED = "garbled"
    PROMPT_ECHO = "prompt_echo"
    EMPTY = "empty"
    GREETING = "greeting"


@dataclass(frozen=True)
class ParsedPrediction:
    names: frozenset[str] | None
    parse_path: ParsePath

    @property
    def parse_failed(self) -> bool:
        return self.names is None


FAILED_PARSE = ParsedPrediction(None, ParsePath.FAILED)


@dataclass(frozen=True)
class MetricRow:
    patient_id: str
    model_id: str
    strategy: str
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    parse_failed: bool
    matched: tuple[str, ...] = field(default=(), repr=False)
    spurious: tuple[str, ...] = field(default=(), repr=False)
    missed: tuple[str, ...] = field(default=(), repr=False)

    @property
    def perfect(self) -> bool:
        return self.f1 == 1.0

    @property
    def zero(self) -> bool:
        return self.f1 == 0.0

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.patient_id, self.model_id, self.strategy)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for name in ("matched", "spurious", "missed"):
            d[name] = list(d[name])
        d["perfect"] = self.perfect
        d["zero"] = self.zero
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MetricRow":
        return cls(
            patient_id=d["patient_id"],
            model_id=d["model_id"],
            strategy=d["strategy"],
            tp=int(d["tp"]),
            fp=int(d["fp"]),
            fn=int(d["fn"]),
            precision=float(d["precision"]),
            recall=float(d["recall"]),
            f1=float(d["f1"]),
            parse_failed=bool(d["parse_failed"]),
            matched=tuple(d.get("matched", ())),
            spurious=tuple(d.get("spurious", ())),
            missed=tuple(d.get("missed", ())),
        )


@dataclass(frozen=True)
class SummaryRow:
    model_id: str
    strategy: str
    n: int
    mean_f1: float
    mean_precision: float
    mean_recall: float
    median_f1: float
    perfect: int
    zero_f1: int
    parse_fail: int


def _string_array(text: str) -> frozenset[str] | None:
    try:
        value = json.loads(text)
    except (json.JSONDecodeError, RecursionError):
        return None
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        return None
    return frozenset(value)


def parse_model_output(raw: str) -> ParsedPrediction:
    """Read ``raw`` as a JSON array of strings.

    One leniency is allowed: a single surrounding markdown code fence is
    stripped and the inner text parsed again.  Anything else fails.
    """
    names = _string_array(raw)
    if names is not None:
        return ParsedPrediction(names, ParsePath.STRICT)
    m = _FENCE_RE.match(raw)
    if m:
        names = _string_array(m.group(1))
        if names is not None:
            return ParsedPrediction(names, ParsePath.FENCE_STRIPPED)
    return FAILED_PARSE


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def score(
    pred: ParsedPrediction,
    gt: GroundTruth,
    model_id: str = "",
    strategy: str = "",
) -> MetricRow:
    truth = gt.active_names
    if pred.names is None:
        return MetricRow(
            gt.patient_id, model_id, strategy,
            tp=0, fp=0, fn=len(truth),
            precision=0.0, recall=0.0, f1=0.0, parse_failed=True,
            missed=tuple(sorted(truth)),
        )
    names = pred.names
    matched = names & truth
    spurious = names - truth
    missed = truth - names
    tp, fp, fn = len(matched), len(spurious), len(missed)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return MetricRow(
        gt.patient_id, model_id, strategy,
        tp=tp, fp=fp, fn=fn,
        precision=precision, recall=recall, f1=_f1(precision, recall),
        parse_failed=False,
        matched=tuple(sorted(matched)),
        spurious=tuple(sorted(spurious)),
        missed=tuple(sorted(missed)),
    )


def common_prefix_length(a: str, b: str) -> int:
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


def _greeting_pattern(lexicon: Sequence[str]) -> re.Pattern[str]:
    alternatives = "|".join(re.escape(w) for w in sorted(lexicon, key=len, reverse=True))
    return re.compile(rf"(?<![a-z])(?:{alternatives})(?![a-z])", re.IGNORECASE)


_DEFAULT_GREETING_RE = _greeting_pattern(GREETING_LEXICON)


def classify_failure(
    raw: str,
    prompt: str,
    echo_threshold: int = ECHO_PREFIX_CHARS,
    greeting_lexicon: Sequence[str] | None = None,
) -> FailureClass:
    """Assign a run to exactly one failure class.

    Checked in order: parseable, empty (whitespace only), prompt echo (shares
    at least ``echo_threshold`` leading characters with the prompt), greeting
    (a lexicon phrase inside the first 40 characters), and garbled otherwise.
    """
    if not parse_model_output(raw).parse_failed:
        return FailureClass.PARSEABLE
    if not raw.strip():
        return FailureClass.EMPTY
    if common_prefix_length(raw, prompt) >= echo_threshold:
        return FailureClass.PROMPT_ECHO
    pattern = _DEFAULT_GREETING_RE if greeting_lexicon is None else _greeting_pattern(greeting_lexicon)
    if pattern.search(raw[:GREETING_WINDOW_CHARS]):
        return FailureClass.GREETING
    return FailureClass.GARBLED


def aggregate(rows: Iterable[MetricRow]) -> list[SummaryRow]:
    """Per (model, strategy) summary with the columns of the main results table.

    Models keep their order of first appearance; strategies are sorted.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("nothing to aggregate")
    groups: dict[tuple[str, str], list[MetricRow]] = {}
    model_order: dict[str, int] = {}
    for row in rows:
        model_order.setdefault(row.model_id, len(model_order))
        groups.setdefault((row.model_id, row.strategy), []).append(row)
    out = []
    for (model, strategy), members in sorted(groups.items(), key=lambda kv: (model_order[kv[0][0]], kv[0][1])):
        n = len(members)
        f1s = [r.f1 for r in members]
        out.append(
            SummaryRow(
                model_id=model,
                strategy=strategy,
                n=n,
                mean_f1=sum(f1s) / n,
                mean_precision=sum(r.precision for r in members) / n,
                mean_recall=sum(r.recall for r in members) / n,
                median_f1=lower_median(f1s),
                perfect=sum(r.perfect for r in members),
                zero_f1=sum(r.zero for r in members),
                parse_fail=sum(r.parse_failed for r in members),
            )
        )
    return out
