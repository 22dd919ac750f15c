import sys
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from labsentry.domain import LabSeries, default_registry
from labsentry.gateway import PatientSnapshot


def utc(year=2025, month=1, day=6, hour=0, minute=0, second=0):
    return datetime(year, month, day, hour, minute, second, tzinfo=timezone.utc)


def make_snapshot(
    encounter_id="enc-1",
    as_of=None,
    labs=(),
    age=70.0,
    sex="female",
    race="white",
    unit="MED-1",
    admitted_hours_before=48.0,
    medications=(),
    procedures=(),
    transfusions=(),
):
    as_of = as_of or utc(hour=12)
    return PatientSnapshot(
        patient_id="pat-1",
        encounter_id=encounter_id,
        as_of=as_of,
        age=age,
        sex=sex,
        race=race,
        admission_at=as_of - timedelta(hours=admitted_hours_before),
        unit=unit,
        labs=LabSeries(encounter_id, labs),
        medications=tuple(medications),
        procedures=tuple(procedures),
        transfusions=tuple(transfusions),
    )


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, independent of -s."""
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, note in ACCEPTANCE_RESULTS:
        suffix = f" -- {note}" if note else ""
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}{suffix}")


@pytest.fixture(scope="session")
def registry():
    return default_registry()


@pytest.fixture(scope="session")
def codes():
    from labsentry.gateway import default_code_config

    return default_code_config()


def make_artifact(weights_by_component=None, intercepts=None, thresholds=None, flags=None,
                  panel=("WBC", "HGB", "PLT")):
    """Hand-built model artifact; default is all-zero weights (p = 0.5)."""
    from labsentry.features import NUMERIC_COLUMNS
    from labsentry.predictor import ComponentModel, ModelArtifact

    components = {}
    for code in panel:
        w = [0.0] * len(NUMERIC_COLUMNS)
        if weights_by_component and code in weights_by_component:
            w = weights_by_component[code]
        components[code] = ComponentModel(
            trained=True,
            intercept=(intercepts or {}).get(code, 0.0),
            weights=tuple(w),
            threshold=(thresholds or {}).get(code, 0.5),
            threshold_flags=(flags or {}).get(code, ()),
        )
    return ModelArtifact(
        model_version="logistic-1",
        version_seq=1,
        components=components,
        feature_columns=NUMERIC_COLUMNS,
        k=3,
        dataset_hash="0" * 64,
        trained_at="2025-01-06T00:00:00+00:00",
    )
