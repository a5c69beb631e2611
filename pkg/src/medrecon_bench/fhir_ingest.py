"""Parse FHIR R4 patient bundles into the benchmark's patient model.

Only ``Patient`` and ``MedicationRequest`` resources are consumed.  For each
MedicationRequest the clinical content (status, medicationCodeableConcept,
authoredOn, dosageInstruction) is kept; administrative fields such as
``subject``, ``encounter``, ``requester``, ``meta`` and ``id`` are dropped
here so that no serialiser can ever see them.
"""
from __future__ import annotations

import copy
import enum
import json
import logging
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

from ._common import lower_median, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

MIN_AGE = 40
MAX_AGE = 75
MIN_HISTORY_YEARS = 10.0
DAYS_PER_YEAR = 365.25


class BundleError(ValueError):
    """Raised when a bundle cannot be turned into a PatientRecord."""


class MedicationStatus(str, enum.Enum):
    ACTIVE = "active"
    COMPLETED = "completed"
    STOPPED = "stopped"
    CANCELLED = "cancelled"
    ON_HOLD = "on-hold"
    OTHER = "other"

    @classmethod
    def parse(cls, raw: str) -> "MedicationStatus":
        key = raw.strip().lower().replace("_", "-")
        for member in cls:
            if member is not cls.OTHER and member.value == key:
                return member
        return cls.OTHER


@dataclass(frozen=True)
class MedicationRecord:
    name: str
    status: MedicationStatus
    authored_on: datetime
    bundle_index: int
    rxnorm_code: str | None = None
    dose: str | None = None
    frequency: str | None = None
    # raw FHIR text of status/authoredOn, kept for the raw-JSON strategy
    status_text: str = ""
    authored_on_text: str = ""
    codings: tuple[dict[str, Any], ...] = ()
    dosage_instruction: tuple[dict[str, Any], ...] | None = None

    @property
    def is_active(self) -> bool:
        return self.status is MedicationStatus.ACTIVE

    @property
    def local_date(self) -> date:
        """Calendar date in the timestamp's own UTC offset."""
        return self.authored_on.date()

    @property
    def status_word(self) -> str:
        return self.status_text or self.status.value


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    given_name: str
    family_name: str
    gender: str
    birth_date: date
    age_years: int
    medications: tuple[MedicationRecord, ...]
    history_span_years: float

    @property
    def active_medications(self) -> tuple[MedicationRecord, ...]:
        return tuple(m for m in self.medications if m.is_active)

    def with_medications(self, medications: Sequence[MedicationRecord]) -> "PatientRecord":
        """Return a copy with a different medication list and re-derived age/span."""
        meds = tuple(medications)
        age, span = _derive_age_and_span(self.birth_date, meds)
        return PatientRecord(
            patient_id=self.patient_id,
            given_name=self.given_name,
            family_name=self.family_name,
            gender=self.gender,
            birth_date=self.birth_date,
            age_years=age,
            medications=meds,
            history_span_years=span,
        )


@dataclass(frozen=True)
class GroundTruth:
    patient_id: str
    active_names: frozenset[str]

    def sorted_names(self) -> list[str]:
        return sorted(self.active_names)


@dataclass(frozen=True)
class CohortDecision:
    accepted: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.accepted


@dataclass(frozen=True)
class CohortSummary:
    count: int
    active_min: int
    active_median: int
    active_max: int
    span_min: float
    span_max: float


def parse_timestamp(raw: str) -> datetime:
    """Parse a FHIR dateTime keeping its UTC offset (date-only values become UTC midnight)."""
    text = raw.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    if len(text) == 10:
        return datetime.combine(date.fromisoformat(text), datetime.min.time(), tzinfo=timezone.utc)
    value = datetime.fromisoformat(text)
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    return value


def compute_age(birth_date: date, reference_date: date) -> int:
    """Completed whole years from birth_date to reference_date."""
    if reference_date < birth_date:
        raise ValueError(f"reference date {reference_date} precedes birth date {birth_date}")
    years = reference_date.year - birth_date.year
    if (reference_date.month, reference_date.day) < (birth_date.month, birth_date.day):
        years -= 1
    return years


def _derive_age_and_span(birth_date: date, meds: Sequence[MedicationRecord]) -> tuple[int, float]:
    if not meds:
        return 0, 0.0
    latest = max(meds, key=lambda m: m.authored_on)
    earliest = min(meds, key=lambda m: m.authored_on)
    age = compute_age(birth_date, latest.local_date)
    span_days = (latest.authored_on - earliest.authored_on).total_seconds() / 86400.0
    return age, span_days / DAYS_PER_YEAR


def _format_number(value: Any) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def _extract_dose(dosage: list[dict[str, Any]] | None) -> str | None:
    if not dosage:
        return None
    for dose_and_rate in dosage[0].get("doseAndRate") or []:
        qty = dose_and_rate.get("doseQuantity")
        if qty and "value" in qty:
            unit = qty.get("unit") or qty.get("code") or ""
            return f"{_format_number(qty['value'])} {unit}".rstrip()
    return None


def _extract_frequency(dosage: list[dict[str, Any]] | None) -> str | None:
    if not dosage:
        return None
    repeat = (dosage[0].get("timing") or {}).get("repeat") or {}
    if "frequency" not in repeat:
        return None
    period = _format_number(repeat.get("period", 1))
    unit = repeat.get("periodUnit", "")
    return f"{_format_number(repeat['frequency'])} per {period}{unit}"


def _pick_rxnorm(codings: Sequence[dict[str, Any]]) -> str | None:
    for coding in codings:
        if "rxnorm" in str(coding.get("system", "")).lower() and coding.get("code"):
            return str(coding["code"])
    for coding in codings:
        if coding.get("code"):
            return str(coding["code"])
    return None


def _parse_medication_request(resource: dict[str, Any], position: int, ordinal: int) -> MedicationRecord:
    where = f"entry[{position}] (MedicationRequest #{ordinal})"
    status = resource.get("status")
    if not isinstance(status, str) or not status:
        raise BundleError(f"{where}: missing 'status'")
    concept = resource.get("medicationCodeableConcept")
    if not isinstance(concept, dict):
        raise BundleError(f"{where}: missing 'medicationCodeableConcept'")
    name = concept.get("text")
    if not isinstance(name, str) or not name:
        raise BundleError(f"{where}: missing 'medicationCodeableConcept.text'")
    authored = resource.get("authoredOn")
    if not isinstance(authored, str):
        raise BundleError(f"{where}: missing 'authoredOn'")
    try:
        authored_on = parse_timestamp(authored)
    except ValueError as exc:
        raise BundleError(f"{where}: bad authoredOn {authored!r}") from exc

    codings = tuple(copy.deepcopy(c) for c in concept.get("coding") or [] if isinstance(c, dict))
    dosage = resource.get("dosageInstruction")
    dosage_copy = tuple(copy.deepcopy(d) for d in dosage) if isinstance(dosage, list) and dosage else None
    return MedicationRecord(
        name=name,
        status=MedicationStatus.parse(status),
        status_text=status,
        authored_on=authored_on,
        authored_on_text=authored,
        bundle_index=ordinal,
        rxnorm_code=_pick_rxnorm(codings),
        dose=_extract_dose(dosage if isinstance(dosage, list) else None),
        frequency=_extract_frequency(dosage if isinstance(dosage, list) else None),
        codings=codings,
        dosage_instruction=dosage_copy,
    )


def _official_name(patient: dict[str, Any]) -> tuple[str, str]:
    names = patient.get("name") or []
    if not names:
        return "", ""
    chosen = next((n for n in names if n.get("use") == "official"), names[0])
    given = chosen.get("given") or [""]
    return str(given[0]), str(chosen.get("family", ""))


def parse_bundle(bundle: bytes | str | dict[str, Any], source: str = "<bundle>") -> PatientRecord:
    """Parse one FHIR R4 bundle into a :class:`PatientRecord`.

    Raises :class:`BundleError` for malformed JSON, a missing or duplicated
    Patient resource, or a MedicationRequest lacking ``status`` or
    ``medicationCodeableConcept.text``.
    """
    if isinstance(bundle, (bytes, str)):
        try:
            doc = json.loads(bundle)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise BundleError(f"{source}: malformed JSON ({exc})") from exc
    else:
        doc = bundle
    if not isinstance(doc, dict) or not isinstance(doc.get("entry", []), list):
        raise BundleError(f"{source}: not a FHIR Bundle")

    patient: dict[str, Any] | None = None
    meds: list[MedicationRecord] = []
    for position, entry in enumerate(doc.get("entry", [])):
        resource = entry.get("resource") if isinstance(entry, dict) else None
        if not isinstance(resource, dict):
            continue
        rtype = resource.get("resourceType")
        if rtype == "Patient":
            if patient is not None:
                raise BundleError(f"{source}: entry[{position}] is a second Patient resource")
            patient = resource
        elif rtype == "MedicationRequest":
            try:
                meds.append(_parse_medication_request(resource, position, len(meds)))
            except BundleError as exc:
                raise BundleError(f"{source}: {exc}") from None
    if patient is None:
        raise BundleError(f"{source}: no Patient resource")

    birth_raw = patient.get("birthDate")
    try:
        birth_date = date.fromisoformat(str(birth_raw))
    except ValueError as exc:
        raise BundleError(f"{source}: Patient has invalid birthDate {birth_raw!r}") from exc
    given, family = _official_name(patient)
    try:
        age, span = _derive_age_and_span(birth_date, meds)
    except ValueError as exc:
        raise BundleError(f"{source}: {exc}") from exc
    return PatientRecord(
        patient_id=str(patient.get("id") or Path(source).stem),
        given_name=given,
        family_name=family,
        gender=str(patient.get("gender", "unknown")),
        birth_date=birth_date,
        age_years=age,
        medications=tuple(meds),
        history_span_years=span,
    )


def load_bundle(path: str | Path) -> PatientRecord:
    path = Path(path)
    return parse_bundle(path.read_bytes(), source=str(path))


def cohort_filter(patient: PatientRecord) -> CohortDecision:
    """Apply the age, history-span and active-medication cohort rules."""
    if not patient.medications:
        return CohortDecision(False, "no_medications")
    if not MIN_AGE <= patient.age_years <= MAX_AGE:
        return CohortDecision(False, "age")
    if patient.history_span_years < MIN_HISTORY_YEARS:
        return CohortDecision(False, "history_span")
    if not any(m.is_active for m in patient.medications):
        return CohortDecision(False, "no_active")
    return CohortDecision(True)


def extract_ground_truth(patient: PatientRecord) -> GroundTruth:
    return GroundTruth(patient.patient_id, frozenset(m.name for m in patient.medications if m.is_active))


def cohort_stats(patients: Sequence[PatientRecord], truths: Sequence[GroundTruth]) -> CohortSummary:
    if not patients:
        raise ValueError("cohort is empty")
    counts = [len(gt.active_names) for gt in truths]
    spans = [p.history_span_years for p in patients]
    return CohortSummary(
        count=len(patients),
        active_min=min(counts),
        active_median=int(lower_median(counts)),
        active_max=max(counts),
        span_min=min(spans),
        span_max=max(spans),
    )


@dataclass
class IngestResult:
    accepted: list[tuple[Path, PatientRecord, GroundTruth]] = field(default_factory=list)
    rejected: list[tuple[Path, str]] = field(default_factory=list)
    errors: list[tuple[Path, str]] = field(default_factory=list)


def ingest_directory(cohort_dir: str | Path) -> IngestResult:
    """Parse every ``*.json`` bundle in a directory and split it by cohort decision.

    Bundles are visited in sorted filename order.  Malformed bundles end up in
    ``errors``; well-formed patients failing a cohort rule end up in ``rejected``.
    """
    cohort_dir = Path(cohort_dir)
    result = IngestResult()
    for path in sorted(cohort_dir.glob("*.json")):
        try:
            patient = load_bundle(path)
        except BundleError as exc:
            result.errors.append((path, str(exc)))
            continue
        decision = cohort_filter(patient)
        if decision:
            result.accepted.append((path, patient, extract_ground_truth(patient)))
        else:
            result.rejected.append((path, decision.reason or "unknown"))
    return result


def manifest_rows(accepted: Iterable[tuple[Path, PatientRecord, GroundTruth]]) -> list[dict[str, Any]]:
    return [
        {
            "patient_id": patient.patient_id,
            "source": str(path),
            "age": patient.age_years,
            "history_span_years": round(patient.history_span_years, 4),
            "active_count": len(gt.active_names),
        }
        for path, patient, gt in accepted
    ]


def write_manifest(path: str | Path, accepted: Iterable[tuple[Path, PatientRecord, GroundTruth]]) -> int:
    return write_jsonl(path, manifest_rows(accepted))


def read_manifest(path: str | Path) -> list[dict[str, Any]]:
    return list(read_jsonl(path))


def write_ground_truth(path: str | Path, truths: Iterable[GroundTruth]) -> int:
    return write_jsonl(path, ({"patient_id": gt.patient_id, "active_names": gt.sorted_names()} for gt in truths))


def read_ground_truth(path: str | Path) -> dict[str, GroundTruth]:
    out: dict[str, GroundTruth] = {}
    for row in read_jsonl(path):
        out[row["patient_id"]] = GroundTruth(row["patient_id"], frozenset(row["active_names"]))
    return out
