from __future__ import annotations

import json
from datetime import date, timedelta

import pytest
from dateutil.relativedelta import relativedelta
from hypothesis import given, settings
from hypothesis import strategies as st

from medrecon_bench.fhir_ingest import (
    BundleError,
    GroundTruth,
    MedicationStatus,
    cohort_filter,
    cohort_stats,
    compute_age,
    extract_ground_truth,
    ingest_directory,
    load_bundle,
    parse_bundle,
    read_ground_truth,
    read_manifest,
    write_ground_truth,
    write_manifest,
)

from conftest import MERRY_ACTIVE, MERRY_BUNDLE, make_bundle, med_request, with_extra_entries


def test_golden_bundle_counts(merry_patient):
    meds = merry_patient.medications
    assert len(meds) == 9
    assert sum(m.status is MedicationStatus.ACTIVE for m in meds) == 4
    assert sum(m.status is MedicationStatus.COMPLETED for m in meds) == 5
    assert merry_patient.given_name == "Merry217"
    assert merry_patient.family_name == "Parisian75"
    assert merry_patient.gender == "female"
    assert merry_patient.age_years == 60


def test_golden_bundle_index_preserves_order(merry_patient):
    assert [m.bundle_index for m in merry_patient.medications] == list(range(9))
    assert merry_patient.medications[5].name == "Acetaminophen 325 MG Oral Tablet"


def test_local_date_uses_stored_offset(merry_patient):
    m = merry_patient.medications[7]
    # 02:22 at +05:30 is still the previous day in UTC
    assert m.authored_on_text == "2019-09-21T02:22:22+05:30"
    assert m.local_date == date(2019, 9, 21)


def test_ground_truth_merry(merry_patient):
    assert extract_ground_truth(merry_patient).active_names == MERRY_ACTIVE


def test_zero_medication_requests():
    p = parse_bundle(make_bundle([]))
    assert p.medications == ()
    assert not cohort_filter(p)


def test_names_are_byte_identical():
    name = "  lisinopril 10 MG Oral Tablet "
    p = parse_bundle(make_bundle([med_request(name)]))
    assert p.medications[0].name == name


def test_administrative_fields_dropped():
    med = med_request(
        "Foo 1 MG Oral Tablet",
        subject={"reference": "urn:uuid:secret-subject"},
        encounter={"reference": "urn:uuid:secret-encounter"},
        requester={"display": "Dr. Secret"},
        meta={"versionId": "9"},
        id="secret-id",
    )
    p = parse_bundle(make_bundle([med]))
    dumped = repr(p.medications[0])
    for token in ("secret-subject", "secret-encounter", "Dr. Secret", "secret-id", "versionId"):
        assert token not in dumped


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("active", MedicationStatus.ACTIVE),
        ("ACTIVE", MedicationStatus.ACTIVE),
        ("Completed", MedicationStatus.COMPLETED),
        ("on-hold", MedicationStatus.ON_HOLD),
        ("on_hold", MedicationStatus.ON_HOLD),
        ("stopped", MedicationStatus.STOPPED),
        ("cancelled", MedicationStatus.CANCELLED),
        ("entered-in-error", MedicationStatus.OTHER),
        ("draft", MedicationStatus.OTHER),
    ],
)
def test_status_parsing(raw, expected):
    assert MedicationStatus.parse(raw) is expected


def test_unknown_status_keeps_raw_text_and_is_historical():
    p = parse_bundle(make_bundle([med_request("X", status="draft"), med_request("Y")]))
    assert p.medications[0].status_text == "draft"
    assert extract_ground_truth(p).active_names == {"Y"}


@pytest.mark.parametrize(
    "mutate,needle",
    [
        (lambda m: m.pop("status"), "status"),
        (lambda m: m["medicationCodeableConcept"].pop("text"), "medicationCodeableConcept.text"),
        (lambda m: m.pop("medicationCodeableConcept"), "medicationCodeableConcept"),
    ],
)
def test_missing_required_field_names_position(mutate, needle):
    meds = [med_request("A"), med_request("B")]
    mutate(meds[1])
    with pytest.raises(BundleError) as err:
        parse_bundle(make_bundle(meds), source="x.json")
    msg = str(err.value)
    assert "entry[2]" in msg and "MedicationRequest #1" in msg and needle in msg


def test_malformed_json():
    with pytest.raises(BundleError, match="malformed JSON"):
        parse_bundle(b"{not json", source="bad.json")


def test_missing_patient():
    doc = make_bundle([med_request("A")])
    doc["entry"] = doc["entry"][1:]
    with pytest.raises(BundleError, match="no Patient"):
        parse_bundle(doc)


def test_reparse_is_identical():
    raw = MERRY_BUNDLE.read_bytes()
    assert parse_bundle(raw) == parse_bundle(raw)


@pytest.mark.parametrize(
    "birth,ref,expected",
    [
        (date(1965, 3, 10), date(2025, 3, 9), 59),
        (date(1965, 3, 10), date(2025, 3, 10), 60),
        (date(2000, 1, 1), date(2000, 1, 1), 0),
        (date(2000, 2, 29), date(2001, 2, 28), 0),
        (date(2000, 2, 29), date(2001, 3, 1), 1),
    ],
)
def test_compute_age_examples(birth, ref, expected):
    assert compute_age(birth, ref) == expected


@given(st.dates(min_value=date(1900, 1, 1), max_value=date(2030, 1, 1)), st.integers(0, 40000))
def test_compute_age_matches_calendar_oracle(birth, days):
    ref = birth + timedelta(days=days)
    if ref > date(2100, 1, 1):
        return
    assert compute_age(birth, ref) == relativedelta(ref, birth).years


def test_compute_age_rejects_reference_before_birth():
    with pytest.raises(ValueError):
        compute_age(date(2000, 1, 2), date(2000, 1, 1))


def _qualifying(birth="1965-03-10", actives=1):
    meds = [med_request("Old", status="completed", when="2005-01-01T00:00:00+00:00")]
    meds += [med_request(f"Drug {i}", when="2025-01-01T00:00:00+00:00") for i in range(actives)]
    return make_bundle(meds, birth=birth)


def test_cohort_accepts_merry(merry_patient):
    assert merry_patient.history_span_years == pytest.approx(19.65, abs=0.01)
    assert cohort_filter(merry_patient).accepted


def test_cohort_age_boundaries():
    # reference date is 2025-01-01, the latest authoredOn
    assert cohort_filter(parse_bundle(_qualifying(birth="1985-01-01"))).accepted  # 40
    assert cohort_filter(parse_bundle(_qualifying(birth="1985-01-02"))).reason == "age"  # 39
    assert cohort_filter(parse_bundle(_qualifying(birth="1949-01-02"))).accepted  # 75


def test_cohort_upper_age_bound():
    p = parse_bundle(_qualifying(birth="1949-01-01"))
    assert p.age_years == 76
    assert cohort_filter(p).reason == "age"


def test_cohort_rejects_short_history():
    meds = [med_request("A", when="2020-01-01T00:00:00+00:00"), med_request("B", when="2025-01-01T00:00:00+00:00")]
    assert cohort_filter(parse_bundle(make_bundle(meds))).reason == "history_span"


def test_cohort_rejects_no_active():
    meds = [
        med_request("A", status="completed", when="2005-01-01T00:00:00+00:00"),
        med_request("B", status="stopped", when="2025-01-01T00:00:00+00:00"),
    ]
    assert cohort_filter(parse_bundle(make_bundle(meds))).reason == "no_active"


def test_history_span_zero_when_single_date():
    p = parse_bundle(make_bundle([med_request("A"), med_request("B")]))
    assert p.history_span_years == 0.0


def test_refill_duplicates_collapse(merry_doc):
    refill = med_request("Clopidogrel 75 MG Oral Tablet", when="2024-01-01T00:00:00+00:00")
    p = parse_bundle(with_extra_entries(merry_doc, [refill, refill]))
    assert extract_ground_truth(p).active_names == MERRY_ACTIVE


def test_sixteen_active_names():
    meds = [med_request(f"Drug {i} MG Oral Tablet") for i in range(16)] + [med_request("Drug 0 MG Oral Tablet")]
    assert len(extract_ground_truth(parse_bundle(make_bundle(meds))).active_names) == 16


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_ground_truth_invariant_under_refill_duplication(data):
    merry_doc = json.loads(MERRY_BUNDLE.read_text())
    p = parse_bundle(merry_doc)
    actives = [e["resource"] for e in merry_doc["entry"] if e["resource"].get("status") == "active"]
    copies = data.draw(st.lists(st.sampled_from(actives), min_size=1, max_size=5))
    q = parse_bundle(with_extra_entries(merry_doc, copies))
    assert extract_ground_truth(q).active_names == extract_ground_truth(p).active_names


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 5), st.sampled_from(["1950-06-01", "1965-03-10", "1984-06-01", "1990-01-01"]))
def test_cohort_filter_monotone_in_actives(n_extra, birth):
    base = _qualifying(birth=birth, actives=0)
    before = cohort_filter(parse_bundle(base))
    extra = [med_request(f"New {i}", when="2015-06-01T00:00:00+00:00") for i in range(n_extra)]
    after = cohort_filter(parse_bundle(with_extra_entries(base, extra)))
    if before.accepted:
        assert after.accepted


def test_cohort_stats_single():
    gt = GroundTruth("a", frozenset({"w", "x", "y", "z"}))
    s = cohort_stats([load_bundle(MERRY_BUNDLE)], [gt])
    assert (s.active_min, s.active_median, s.active_max) == (4, 4, 4)


def test_cohort_stats_lower_median(merry_patient):
    gts = [GroundTruth("a", frozenset({"1", "2"})), GroundTruth("b", frozenset(str(i) for i in range(6)))]
    s = cohort_stats([merry_patient, merry_patient], gts)
    assert s.active_median == 2


def test_cohort_stats_empty():
    with pytest.raises(ValueError):
        cohort_stats([], [])


def test_ingest_directory_and_files(tmp_path, merry_doc):
    (tmp_path / "a.json").write_text(json.dumps(merry_doc))
    (tmp_path / "young.json").write_text(json.dumps(_qualifying(birth="1995-01-01")))
    (tmp_path / "broken.json").write_text("{")
    result = ingest_directory(tmp_path)
    assert [p.patient_id for _, p, _ in result.accepted] == [merry_doc["entry"][0]["resource"]["id"]]
    assert [(p.name, r) for p, r in result.rejected] == [("young.json", "age")]
    assert [p.name for p, _ in result.errors] == ["broken.json"]

    write_manifest(tmp_path / "out" / "manifest.jsonl", result.accepted)
    write_ground_truth(tmp_path / "out" / "gt.jsonl", [gt for _, _, gt in result.accepted])
    rows = read_manifest(tmp_path / "out" / "manifest.jsonl")
    assert rows[0]["age"] == 60 and rows[0]["active_count"] == 4
    gt = read_ground_truth(tmp_path / "out" / "gt.jsonl")
    assert next(iter(gt.values())).active_names == MERRY_ACTIVE
    line = (tmp_path / "out" / "gt.jsonl").read_text().splitlines()[0]
    assert json.loads(line)["active_names"] == sorted(MERRY_ACTIVE)
