"""Render a patient's medication history into the four prompt formats.

A  raw FHIR-shaped JSON (capped at 100 resources, actives always kept)
B  six-column markdown table, oldest to newest
C  clinical narrative with an explicit active/historical split
D  pipe-delimited chronological timeline, no status separation

Every format starts with the same ``Patient: ... | Age: ... | Gender: ...``
header line followed by a blank line.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from ._common import write_jsonl
from .fhir_ingest import MedicationRecord, PatientRecord

STRATEGY_A_CAP = 100

PROMPT_TEMPLATE = (
    "You are a clinical assistant performing medication reconciliation.\n"
    "You will be given a patient's medication history. Your task is to identify all "
    "medications that are currently ACTIVE for this patient.\n"
    'A medication is currently active if its status is "active". Medications with '
    'status "completed", "stopped", "cancelled", or "on-hold" are historical '
    "and must NOT be included in your answer.\n"
    "Return your answer as a JSON array of medication names exactly as they appear "
    "in the data. Return nothing else — no explanation, no prose, just the JSON array.\n"
    "If there are no active medications, return an empty array: []"
)

DASH_NOTE = (
    'In the data below, a dash ("-") marks a missing field such as an unrecorded dose '
    "or frequency; it does not mean the medication is inactive."
)

ACTIVE_HEADING = "Currently active medications:"
HISTORY_HEADING = "Medication history (no longer active):"
TIMELINE_HEADING = "Chronological medication history (oldest to newest):"
TABLE_COLUMNS = ("Medication", "RxNorm", "Status", "Prescribed", "Dose", "Frequency")


class Strategy(str, enum.Enum):
    RAW_JSON = "A"
    MARKDOWN_TABLE = "B"
    CLINICAL_NARRATIVE = "C"
    CHRONOLOGICAL_TIMELINE = "D"

    @property
    def code(self) -> str:
        return self.value

    @property
    def uses_dash(self) -> bool:
        return self is not Strategy.RAW_JSON

    @classmethod
    def from_code(cls, code: str) -> "Strategy":
        try:
            return cls(code.strip().upper())
        except ValueError:
            raise ValueError(f"unknown strategy {code!r}; expected one of A, B, C, D") from None


ALL_STRATEGIES = tuple(Strategy)


@dataclass(frozen=True)
class SerialisedPrompt:
    patient_id: str
    strategy: Strategy
    header_line: str
    data_block: str
    full_prompt: str
    cap_applied: bool
    resource_count_serialised: int

    @property
    def char_count(self) -> int:
        return len(self.full_prompt)


def header_line(patient: PatientRecord) -> str:
    return f"Patient: {patient.given_name} {patient.family_name} | Age: {patient.age_years} | Gender: {patient.gender}"


def chronological(records: Iterable[MedicationRecord]) -> list[MedicationRecord]:
    """Oldest-to-newest by displayed calendar date; equal dates keep bundle order."""
    return sorted(records, key=lambda m: (m.local_date, m.bundle_index))


def apply_strategy_a_cap(
    records: Sequence[MedicationRecord], cap: int = STRATEGY_A_CAP
) -> tuple[list[MedicationRecord], bool]:
    """Trim a medication list to ``cap`` entries without ever dropping an active one.

    Free slots after the actives go to the most recent historical records.
    The result is returned in original bundle order.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if len(records) <= cap:
        return list(records), False
    actives = [m for m in records if m.is_active]
    historical = [m for m in records if not m.is_active]
    free = max(cap - len(actives), 0)
    newest_first = sorted(historical, key=lambda m: (m.authored_on, m.bundle_index), reverse=True)
    kept = actives + newest_first[:free]
    kept.sort(key=lambda m: m.bundle_index)
    return kept, True


def _resource_dict(m: MedicationRecord) -> dict[str, Any]:
    concept: dict[str, Any] = {}
    if m.codings:
        concept["coding"] = [dict(c) for c in m.codings]
    concept["text"] = m.name
    out: dict[str, Any] = {
        "resourceType": "MedicationRequest",
        "status": m.status_word,
        "medicationCodeableConcept": concept,
        "authoredOn": m.authored_on_text or m.authored_on.isoformat(),
    }
    if m.dosage_instruction:
        out["dosageInstruction"] = [dict(d) for d in m.dosage_instruction]
    return out


def _code_suffix(m: MedicationRecord) -> str:
    return f" (RxNorm: {m.rxnorm_code})" if m.rxnorm_code else ""


def _narrative_line(m: MedicationRecord) -> str:
    if m.dose is None:
        dosage = "Dosage not recorded."
    elif m.frequency:
        dosage = f"Dosage: {m.dose}, {m.frequency}."
    else:
        dosage = f"Dosage: {m.dose}."
    return (
        f"  - {m.name}{_code_suffix(m)}, prescribed on {m.local_date.isoformat()}, "
        f"status: {m.status_word}. {dosage}"
    )


def render_raw_json(records: Sequence[MedicationRecord]) -> str:
    return json.dumps([_resource_dict(m) for m in records], indent=2, ensure_ascii=False)


def render_markdown_table(records: Sequence[MedicationRecord]) -> str:
    lines = [
        "| " + " | ".join(TABLE_COLUMNS) + " |",
        "| " + " | ".join("---" for _ in TABLE_COLUMNS) + " |",
    ]
    for m in chronological(records):
        cells = (
            m.name,
            m.rxnorm_code or "-",
            m.status_word,
            m.local_date.isoformat(),
            m.dose or "-",
            m.frequency or "-",
        )
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def render_narrative(records: Sequence[MedicationRecord]) -> str:
    ordered = chronological(records)
    lines = [ACTIVE_HEADING]
    lines += [_narrative_line(m) for m in ordered if m.is_active]
    lines += ["", HISTORY_HEADING]
    lines += [_narrative_line(m) for m in ordered if not m.is_active]
    return "\n".join(lines)


def render_timeline(records: Sequence[MedicationRecord]) -> str:
    lines = [TIMELINE_HEADING, ""]
    for m in chronological(records):
        lines.append(
            f"{m.local_date.isoformat()} | {m.status_word} | {m.name}{_code_suffix(m)} | {m.dose or '-'}"
        )
    return "\n".join(lines)


_RENDERERS = {
    Strategy.MARKDOWN_TABLE: render_markdown_table,
    Strategy.CLINICAL_NARRATIVE: render_narrative,
    Strategy.CHRONOLOGICAL_TIMELINE: render_timeline,
}


def build_prompt(strategy: Strategy, data_block: str) -> str:
    """Prompt template, the dash note for B/C/D, then the serialised data."""
    preamble = PROMPT_TEMPLATE
    if Strategy(strategy).uses_dash:
        preamble += "\n" + DASH_NOTE
    return preamble + "\n\n" + data_block


def serialise(patient: PatientRecord, strategy: Strategy | str, cap: int = STRATEGY_A_CAP) -> SerialisedPrompt:
    if not isinstance(strategy, Strategy):
        strategy = Strategy.from_code(strategy)
    head = header_line(patient)
    records = list(patient.medications)
    cap_applied = False
    if strategy is Strategy.RAW_JSON:
        records, cap_applied = apply_strategy_a_cap(records, cap)
        body = render_raw_json(records)
    else:
        body = _RENDERERS[strategy](records)
    block = head + "\n\n" + body
    return SerialisedPrompt(
        patient_id=patient.patient_id,
        strategy=strategy,
        header_line=head,
        data_block=block,
        full_prompt=build_prompt(strategy, block),
        cap_applied=cap_applied,
        resource_count_serialised=len(records),
    )


def prompt_path(outdir: str | Path, patient_id: str, strategy: Strategy) -> Path:
    return Path(outdir) / patient_id / f"{strategy.code}.txt"


def write_prompts(outdir: str | Path, prompts: Iterable[SerialisedPrompt]) -> Path:
    """Write each full prompt to ``<outdir>/<patient_id>/<strategy>.txt`` plus a JSONL manifest."""
    outdir = Path(outdir)
    rows = []
    for sp in prompts:
        path = prompt_path(outdir, sp.patient_id, sp.strategy)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(sp.full_prompt, encoding="utf-8")
        rows.append(
            {
                "patient_id": sp.patient_id,
                "strategy": sp.strategy.code,
                "path": str(path.relative_to(outdir)),
                "cap_applied": sp.cap_applied,
                "resource_count_serialised": sp.resource_count_serialised,
                "char_count": sp.char_count,
                "sha256": hashlib.sha256(sp.full_prompt.encode("utf-8")).hexdigest(),
            }
        )
    manifest = outdir / "prompts.jsonl"
    write_jsonl(manifest, rows)
    return manifest


def read_prompt(outdir: str | Path, patient_id: str, strategy: Strategy) -> str:
    return prompt_path(outdir, patient_id, strategy).read_text(encoding="utf-8")
