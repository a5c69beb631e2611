"""
One patient, four prompts
=========================

Parse the Merry217 Parisian75 test bundle and print what the model would
see under each serialisation strategy.
"""
from pathlib import Path

from medrecon_bench.fhir_ingest import extract_ground_truth, load_bundle
from medrecon_bench.serialise import ALL_STRATEGIES, serialise

bundle = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "merry217_parisian75.json"
patient = load_bundle(bundle)

# nine MedicationRequests survive ingestion; four of them are active
print(patient.given_name, patient.family_name, patient.age_years, len(patient.medications))
print(sorted(extract_ground_truth(patient).active_names))

for strategy in ALL_STRATEGIES:
    sp = serialise(patient, strategy)
    print(f"\n===== {strategy.code} ({strategy.name.lower()}), {sp.char_count} chars =====")
    print(sp.data_block)

# the full prompt is the instruction template followed by the data block
print("\n" + serialise(patient, "C").full_prompt[:400])
