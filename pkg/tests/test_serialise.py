from __future__ import annotations

import json
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medrecon_bench.fhir_ingest import MedicationRecord, MedicationStatus, parse_bundle
from medrecon_bench.serialise import (
    ALL_STRATEGIES,
    DASH_NOTE,
    HISTORY_HEADING,
    PROMPT_TEMPLATE,
    STRATEGY_A_CAP,
    Strategy,
    apply_strategy_a_cap,
    build_prompt,
    chronological,
    read_prompt,
    serialise,
    write_prompts,
)

from conftest import MERRY_ACTIVE, FIXTURES, make_bundle, med_request, unwrap_listing


def _golden(code):
    return (FIXTURES / f"golden_{code.lower()}.txt").read_text(encoding="utf-8")


@pytest.mark.parametrize("code", ["B", "C", "D"])
def test_golden_golden(merry_patient, code):
    assert serialise(merry_patient, code).data_block == unwrap_listing(_golden(code))


def test_golden_golden_raw_json_prefix(merry_patient):
    # the listing elides the last seven resources
    text = _golden("A")
    visible = text[: text.index("  ... (7")].rstrip("\n")
    block = serialise(merry_patient, "A").data_block
    assert block.startswith(visible)


def test_raw_json_structure(merry_patient):
    block = serialise(merry_patient, Strategy.RAW_JSON).data_block
    header, body = block.split("\n\n", 1)
    assert header == "Patient: Merry217 Parisian75 | Age: 60 | Gender: female"
    resources = json.loads(body)
    assert len(resources) == 9
    for r in resources:
        assert list(r) == ["resourceType", "status", "medicationCodeableConcept", "authoredOn"]
        assert r["medicationCodeableConcept"]["coding"][0]["system"].endswith("/rxnorm")
    assert {r["medicationCodeableConcept"]["text"] for r in resources if r["status"] == "active"} == MERRY_ACTIVE
    for banned in ("subject", "encounter", "requester", "meta", '"id"'):
        assert banned not in body


def test_table_row_with_missing_dose(merry_patient):
    rows = serialise(merry_patient, "B").data_block.split("\n")
    # header, blank, column row, separator, then two 2006 entries
    assert rows[6] == "| Clopidogrel 75 MG Oral Tablet | 309362 | active | 2014-12-17 | - | - |"


def test_dose_rendering():
    dosage = [
        {
            "timing": {"repeat": {"frequency": 2, "period": 1, "periodUnit": "d"}},
            "doseAndRate": [{"doseQuantity": {"value": 1, "unit": "tablet"}}],
        }
    ]
    p = parse_bundle(make_bundle([med_request("X 5 MG Oral Tablet", code="1", dosageInstruction=dosage)]))
    assert "| X 5 MG Oral Tablet | 1 | active | 2015-01-01 | 1 tablet | 2 per 1d |" in serialise(p, "B").data_block
    assert "Dosage: 1 tablet, 2 per 1d." in serialise(p, "C").data_block
    assert serialise(p, "D").data_block.endswith("| 1 tablet")
    assert json.loads(serialise(p, "A").data_block.split("\n\n", 1)[1])[0]["dosageInstruction"] == dosage


def test_prompt_layout(merry_patient):
    for s in ALL_STRATEGIES:
        sp = serialise(merry_patient, s)
        assert sp.full_prompt.startswith(PROMPT_TEMPLATE)
        assert sp.full_prompt.endswith("\n\n" + sp.data_block)
        assert sp.full_prompt.count(DASH_NOTE) == (0 if s is Strategy.RAW_JSON else 1)
        assert sp.char_count == len(sp.full_prompt)


def test_build_prompt_exact():
    assert build_prompt(Strategy.RAW_JSON, "X") == PROMPT_TEMPLATE + "\n\nX"
    assert build_prompt(Strategy.MARKDOWN_TABLE, "X") == PROMPT_TEMPLATE + "\n" + DASH_NOTE + "\n\nX"


def test_narrative_without_history():
    p = parse_bundle(make_bundle([med_request("Only 1 MG Oral Tablet")]))
    block = serialise(p, "C").data_block
    assert block.endswith(HISTORY_HEADING)
    assert "Only 1 MG Oral Tablet" in block


def test_unknown_strategy():
    with pytest.raises(ValueError, match="E"):
        serialise(parse_bundle(make_bundle([med_request("A")])), "E")


def test_timeline_order_uses_local_date():
    meds = [
        med_request("Late", when="2020-01-02T01:00:00+05:30"),  # 2020-01-01 in UTC
        med_request("Early", when="2020-01-01T22:00:00+00:00"),
    ]
    block = serialise(parse_bundle(make_bundle(meds)), "D").data_block
    assert block.index("Early") < block.index("Late")


def _record(i, active, days_ago):
    when = datetime(2025, 1, 1, tzinfo=timezone.utc) - timedelta(days=days_ago)
    return MedicationRecord(
        name=f"Drug {i}",
        status=MedicationStatus.ACTIVE if active else MedicationStatus.COMPLETED,
        authored_on=when,
        bundle_index=i,
        status_text="active" if active else "completed",
        authored_on_text=when.isoformat(),
    )


def test_cap_identity_below_limit(merry_patient):
    kept, applied = apply_strategy_a_cap(merry_patient.medications)
    assert kept == list(merry_patient.medications) and not applied


def test_cap_keeps_actives_and_newest_history():
    records = [_record(i, i % 15 == 0, days_ago=i) for i in range(150)]  # 10 actives
    kept, applied = apply_strategy_a_cap(records)
    assert applied and len(kept) == STRATEGY_A_CAP
    assert sum(m.is_active for m in kept) == 10
    historical = [m for m in records if not m.is_active]
    expected = {m.bundle_index for m in sorted(historical, key=lambda m: m.authored_on, reverse=True)[:90]}
    assert {m.bundle_index for m in kept if not m.is_active} == expected
    assert [m.bundle_index for m in kept] == sorted(m.bundle_index for m in kept)


def test_cap_exceeded_by_actives_alone():
    records = [_record(i, True, i) for i in range(120)]
    kept, applied = apply_strategy_a_cap(records)
    assert len(kept) == 120 and applied


def test_cap_only_affects_raw_json():
    meds = [med_request(f"H{i}", status="completed", when=f"20{10 + i % 10}-01-01T00:00:00+00:00") for i in range(110)]
    p = parse_bundle(make_bundle(meds + [med_request("Live")]))
    a = serialise(p, "A")
    assert a.cap_applied and a.resource_count_serialised == 100
    assert '"text": "Live"' in a.data_block
    for code in "BCD":
        sp = serialise(p, code)
        assert not sp.cap_applied and sp.resource_count_serialised == 111


def test_write_and_read_prompts(tmp_path, merry_patient):
    prompts = [serialise(merry_patient, s) for s in ALL_STRATEGIES]
    manifest = write_prompts(tmp_path, prompts)
    rows = [json.loads(line) for line in manifest.read_text().splitlines()]
    assert [r["strategy"] for r in rows] == ["A", "B", "C", "D"]
    for sp in prompts:
        assert read_prompt(tmp_path, sp.patient_id, sp.strategy) == sp.full_prompt


def test_serialise_is_deterministic(small_cohort):
    patients, _ = small_cohort
    for p in patients:
        for s in ALL_STRATEGIES:
            assert serialise(p, s) == serialise(p, s)


# property tests over randomly built medication lists

_names = st.sampled_from(["Alpha 1 MG Oral Tablet", "Beta 2 MG", "Gamma / Delta 3 MG Injection", "Epsilon"])
_med = st.builds(
    lambda name, status, day, hour: med_request(
        name, status=status, when=f"{2000 + day // 365:04d}-{1 + (day % 365) // 31:02d}-{1 + day % 28:02d}T{hour:02d}:00:00+05:30"
    ),
    _names,
    st.sampled_from(["active", "completed", "stopped", "on-hold"]),
    st.integers(0, 365 * 25),
    st.integers(0, 23),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(_med, min_size=1, max_size=30))
def test_every_record_rendered_once(meds):
    p = parse_bundle(make_bundle(meds))
    n = len(meds)
    b = serialise(p, "B").data_block.split("\n\n", 1)[1].split("\n")
    assert len(b) == 2 + n
    c = serialise(p, "C").data_block
    assert sum(line.startswith("  - ") for line in c.split("\n")) == n
    d = serialise(p, "D").data_block.split("\n\n", 2)[2].split("\n")
    assert len(d) == n
    a = json.loads(serialise(p, "A").data_block.split("\n\n", 1)[1])
    assert len(a) == n


@settings(max_examples=60, deadline=None)
@given(st.lists(_med, min_size=1, max_size=30))
def test_narrative_partitions_by_status(meds):
    p = parse_bundle(make_bundle(meds))
    c = serialise(p, "C").data_block
    active_part, history_part = c.split(HISTORY_HEADING)
    assert active_part.count("  - ") == sum(m.is_active for m in p.medications)
    assert history_part.count("  - ") == sum(not m.is_active for m in p.medications)
    for name in {m.name for m in p.active_medications}:
        assert f"  - {name}" in active_part


@settings(max_examples=60, deadline=None)
@given(st.lists(_med, min_size=1, max_size=30))
def test_timeline_dates_non_decreasing(meds):
    p = parse_bundle(make_bundle(meds))
    lines = serialise(p, "D").data_block.split("\n\n", 2)[2].split("\n")
    dates = [line[:10] for line in lines]
    assert dates == sorted(dates)
    assert chronological(chronological(p.medications)) == chronological(p.medications)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 5000)), min_size=1, max_size=200), st.integers(1, 120))
def test_cap_properties(spec, cap):
    records = [_record(i, a, d) for i, (a, d) in enumerate(spec)]
    kept, applied = apply_strategy_a_cap(records, cap)
    n_active = sum(a for a, _ in spec)
    assert applied == (len(records) > cap)
    assert len(kept) == (len(records) if not applied else max(cap, n_active))
    assert {m.bundle_index for m in records if m.is_active} <= {m.bundle_index for m in kept}
    assert [m.bundle_index for m in kept] == sorted(m.bundle_index for m in kept)
    assert apply_strategy_a_cap(kept, cap)[0] == kept or len(kept) > cap
