from __future__ import annotations

import copy
import json
import random
import re
from pathlib import Path

import pytest

from medrecon_bench.fhir_ingest import extract_ground_truth, load_bundle, parse_bundle
from medrecon_bench.synthetic import synthetic_bundle

FIXTURES = Path(__file__).parent / "fixtures"
MERRY_BUNDLE = FIXTURES / "merry217_parisian75.json"

MERRY_ACTIVE = {
    "Clopidogrel 75 MG Oral Tablet",
    "Simvastatin 20 MG Oral Tablet",
    "24 HR metoprolol succinate 100 MG Extended Release Oral Tablet",
    "Nitroglycerin 0.4 MG/ACTUAT Mucosal Spray",
}


@pytest.fixture
def merry_doc():
    return json.loads(MERRY_BUNDLE.read_text())


@pytest.fixture
def merry_patient():
    return load_bundle(MERRY_BUNDLE)


@pytest.fixture
def merry_gt(merry_patient):
    return extract_ground_truth(merry_patient)


def med_request(name, status="active", when="2015-01-01T10:00:00+00:00", code="123", **extra):
    res = {
        "resourceType": "MedicationRequest",
        "status": status,
        "medicationCodeableConcept": {
            "coding": [{"system": "http://www.nlm.nih.gov/research/umls/rxnorm", "code": code, "display": name}],
            "text": name,
        },
        "authoredOn": when,
    }
    res.update(extra)
    return res


def make_bundle(meds, birth="1965-03-10", gender="female", pid="p1"):
    patient = {
        "resourceType": "Patient",
        "id": pid,
        "name": [{"use": "official", "family": "Doe", "given": ["Jan"]}],
        "gender": gender,
        "birthDate": birth,
    }
    return {"resourceType": "Bundle", "type": "transaction", "entry": [{"resource": patient}] + [{"resource": m} for m in meds]}


@pytest.fixture
def small_cohort():
    """Ten synthetic accepted patients with their ground truth."""
    rng = random.Random(11)
    patients = [parse_bundle(synthetic_bundle(rng, i)) for i in range(10)]
    return patients, {p.patient_id: extract_ground_truth(p) for p in patients}


def with_extra_entries(doc, entries):
    out = copy.deepcopy(doc)
    out["entry"].extend({"resource": e} for e in entries)
    return out


def unwrap_listing(text):
    """Undo the cosmetic line wrapping and column padding of the published golden listings."""
    out = []
    for line in text.rstrip("\n").split("\n"):
        if line.startswith("    ") and out:
            out[-1] += " " + line.strip()
        else:
            out.append(line)
    joined = "\n".join(out)
    return re.sub(r"(?m)^(\d{4}-\d\d-\d\d \| \w+) +\|", r"\1 |", joined)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion; lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(criterion, ok, detail):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"criterion {criterion:<3} {status}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
