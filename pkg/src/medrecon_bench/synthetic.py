"""Seeded generator of Synthea-shaped FHIR bundles for offline campaigns.

The bundles mimic what Synthea writes for chronic-disease patients: one
MedicationRequest per refill, mixed UTC offsets, administrative references
on every resource.  They are meant for exercising the pipeline, not for
clinical realism.
"""
from __future__ import annotations

import json
import random
from datetime import date, timedelta
from pathlib import Path
from typing import Any

RXNORM_SYSTEM = "http://www.nlm.nih.gov/research/umls/rxnorm"

DRUGS = (
    ("314076", "lisinopril 10 MG Oral Tablet"),
    ("310798", "Hydrochlorothiazide 25 MG Oral Tablet"),
    ("866412", "24 HR metoprolol succinate 100 MG Extended Release Oral Tablet"),
    ("312961", "Simvastatin 20 MG Oral Tablet"),
    ("309362", "Clopidogrel 75 MG Oral Tablet"),
    ("705129", "Nitroglycerin 0.4 MG/ACTUAT Mucosal Spray"),
    ("860975", "24 HR Metformin hydrochloride 500 MG Extended Release Oral Tablet"),
    ("197361", "Amlodipine 5 MG Oral Tablet"),
    ("243670", "aspirin 81 MG Oral Tablet"),
    ("259255", "atorvastatin 80 MG Oral Tablet"),
    ("106892", "insulin isophane, human 70 UNT/ML / insulin, regular, human 30 UNT/ML Injectable Suspension [Humulin]"),
    ("895994", "120 ACTUAT fluticasone propionate 0.044 MG/ACTUAT Metered Dose Inhaler"),
    ("745679", "200 ACTUAT Albuterol 0.09 MG/ACTUAT Metered Dose Inhaler"),
    ("1049221", "Acetaminophen 325 MG / Oxycodone Hydrochloride 5 MG Oral Tablet"),
    ("849574", "Naproxen sodium 220 MG Oral Tablet"),
    ("313782", "Acetaminophen 325 MG Oral Tablet"),
    ("562251", "Amoxicillin 250 MG / Clavulanate 125 MG Oral Tablet"),
    ("198405", "Ibuprofen 100 MG Oral Tablet"),
    ("308136", "amLODIPine 2.5 MG Oral Tablet"),
    ("1719286", "10 ML Furosemide 10 MG/ML Injection"),
    ("904419", "Alendronic acid 10 MG Oral Tablet"),
    ("310965", "Ibuprofen 200 MG Oral Tablet"),
    ("1361048", "1 ML glucagon 1 MG/ML Injection"),
    ("200064", "furosemide 40 MG Oral Tablet"),
    ("831533", "Errin 0.35 MG Oral Tablet"),
    ("1732186", "100 ML Epinephrine 0.1 MG/ML Injection"),
    ("834061", "Penicillin V Potassium 250 MG Oral Tablet"),
    ("746030", "Neomycin 3.5 MG/ML / Polymyxin B 10000 UNT/ML Ophthalmic Suspension"),
    ("1000126", "1 ML medroxyprogesterone acetate 150 MG/ML Injection"),
    ("583214", "Paclitaxel 100 MG Injection"),
)

OFFSETS = ("+00:00", "-05:00", "-08:00", "+05:30", "+01:00")


def _timestamp(day: date, rng: random.Random, offset: str) -> str:
    return f"{day.isoformat()}T{rng.randint(0, 23):02d}:{rng.randint(0, 59):02d}:{rng.randint(0, 59):02d}{offset}"


def _medication_request(
    pid: str, idx: int, code: str, name: str, status: str, when: str, dosage: list[dict[str, Any]] | None
) -> dict[str, Any]:
    res: dict[str, Any] = {
        "resourceType": "MedicationRequest",
        "id": f"{pid}-mr-{idx:05d}",
        "meta": {"profile": ["http://hl7.org/fhir/us/core/StructureDefinition/us-core-medicationrequest"]},
        "status": status,
        "intent": "order",
        "medicationCodeableConcept": {"coding": [{"system": RXNORM_SYSTEM, "code": code, "display": name}], "text": name},
        "subject": {"reference": f"urn:uuid:{pid}"},
        "encounter": {"reference": f"urn:uuid:{pid}-enc-{idx:05d}"},
        "authoredOn": when,
        "requester": {"reference": "Practitioner?identifier=http://hl7.org/fhir/sid/us-npi|9999999999"},
    }
    if dosage is not None:
        res["dosageInstruction"] = dosage
    return res


def _dosage(rng: random.Random) -> list[dict[str, Any]] | None:
    if rng.random() < 0.7:
        return None
    return [
        {
            "sequence": 1,
            "timing": {"repeat": {"frequency": rng.choice((1, 2, 3)), "period": 1.0, "periodUnit": "d"}},
            "asNeededBoolean": False,
            "doseAndRate": [{"type": {"text": "ordered"}, "doseQuantity": {"value": 1.0}}],
        }
    ]


def synthetic_bundle(
    rng: random.Random,
    index: int,
    n_active: int | None = None,
    end_date: date = date(2025, 10, 17),
) -> dict[str, Any]:
    """One patient bundle that satisfies the cohort rules by construction."""
    pid = f"synthetic-{index:04d}"
    age = rng.randint(40, 75)
    birth = end_date.replace(year=end_date.year - age) - timedelta(days=rng.randint(1, 360))
    span_years = rng.uniform(10.5, 30.0)
    start = end_date - timedelta(days=int(span_years * 365.25))
    offset = rng.choice(OFFSETS)
    if n_active is None:
        n_active = min(16, max(1, int(round(rng.lognormvariate(1.55, 0.55)))))
    drugs = rng.sample(DRUGS, k=min(len(DRUGS), n_active + rng.randint(1, 6)))
    active, historical = drugs[:n_active], drugs[n_active:]

    events: list[tuple[date, str, str, str]] = [(start, *historical[0], "completed"), (end_date, *historical[-1], "completed")]
    for code, name in historical:
        for _ in range(rng.randint(1, 6)):
            events.append((start + timedelta(days=rng.randint(0, (end_date - start).days)), code, name, "completed"))
    for code, name in active:
        first = start + timedelta(days=rng.randint(0, (end_date - start).days // 2))
        refills = rng.randint(1, 12)
        step = max(1, (end_date - first).days // refills)
        days = [first + timedelta(days=step * i) for i in range(refills)]
        for d in days[:-1]:
            events.append((d, code, name, rng.choice(("completed", "completed", "stopped"))))
        events.append((days[-1], code, name, "active"))
    # Synthea writes encounters roughly in time order, but not strictly
    events.sort(key=lambda e: (e[0].toordinal() + rng.randint(-200, 200)))

    entries: list[dict[str, Any]] = [
        {
            "fullUrl": f"urn:uuid:{pid}",
            "resource": {
                "resourceType": "Patient",
                "id": pid,
                "meta": {"profile": ["http://hl7.org/fhir/us/core/StructureDefinition/us-core-patient"]},
                "name": [{"use": "official", "family": f"Family{index}", "given": [f"Given{index}"]}],
                "gender": rng.choice(("female", "male")),
                "birthDate": birth.isoformat(),
            },
            "request": {"method": "POST", "url": "Patient"},
        }
    ]
    for i, (day, code, name, status) in enumerate(events):
        res = _medication_request(pid, i, code, name, status, _timestamp(day, rng, offset), _dosage(rng))
        entries.append({"fullUrl": f"urn:uuid:{res['id']}", "resource": res, "request": {"method": "POST", "url": "MedicationRequest"}})
    return {"resourceType": "Bundle", "type": "transaction", "entry": entries}


def generate_cohort(n: int, seed: int = 0) -> list[dict[str, Any]]:
    rng = random.Random(seed)
    return [synthetic_bundle(rng, i) for i in range(n)]


def write_cohort(directory: str | Path, n: int, seed: int = 0) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for bundle in generate_cohort(n, seed):
        pid = bundle["entry"][0]["resource"]["id"]
        path = directory / f"{pid}.json"
        path.write_text(json.dumps(bundle, indent=1), encoding="utf-8")
        paths.append(path)
    return paths
