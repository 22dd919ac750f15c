"""Encounter-level randomization and the append-only alert event log.

Arms are drawn with a fair coin per encounter at first touch and never change.
Blinding is structural: arm influences nothing but the `displayed` flag on an
event; predictions and gate reasons are computed before the arm is consulted.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
from dataclasses import dataclass, replace
from datetime import datetime
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional

from .alerts import AlertAction, AlertOutcome, GateDecision, GateReason, OrderAttempt
from .gateway import format_ts, parse_ts
from .store import StabilityPrediction

ASSIGNMENT_SCHEMA = "arm-assignment/1"
EVENT_SCHEMA = "alert-event/1"
ENCOUNTER_SCHEMA = "encounter-record/1"


class Arm(IntEnum):
    TREATMENT = 1
    CONTROL = 2


@dataclass(frozen=True)
class ArmAssignment:
    encounter_id: str
    arm: Arm
    assigned_at: datetime
    eligible: bool = True

    def to_record(self) -> dict:
        return {
            "encounter_id": self.encounter_id,
            "arm": int(self.arm),
            "assigned_at": format_ts(self.assigned_at),
            "eligible": self.eligible,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ArmAssignment":
        return cls(
            encounter_id=record["encounter_id"],
            arm=Arm(record["arm"]),
            assigned_at=parse_ts(record["assigned_at"]),
            eligible=record.get("eligible", True),
        )


class ArmRegistry:
    """Create-if-absent arm assignments, optionally persisted as JSONL.

    The file line is written and flushed before the in-memory commit, so a
    failed write leaks no assignment; the next call retries the draw.
    """

    def __init__(self, path: Optional[str | Path] = None):
        self._lock = threading.Lock()
        self._assignments: dict[str, ArmAssignment] = {}
        self._fh = None
        if path is None:
            return
        path = Path(path)
        if path.exists():
            with open(path, "r", encoding="utf-8") as fh:
                header = json.loads(fh.readline())
                if header.get("schema") != ASSIGNMENT_SCHEMA:
                    raise ValueError(f"{path} is not an arm-assignment file")
                for line in fh:
                    assignment = ArmAssignment.from_record(json.loads(line))
                    self._assignments[assignment.encounter_id] = assignment
            self._fh = open(path, "a", encoding="utf-8")
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", encoding="utf-8")
            self._fh.write(json.dumps({"schema": ASSIGNMENT_SCHEMA}) + "\n")
            self._fh.flush()

    def assign(
        self,
        encounter_id: str,
        rng: random.Random,
        assigned_at: datetime,
        eligible: bool = True,
    ) -> ArmAssignment:
        """First call draws the arm and persists it; later calls return it."""
        with self._lock:
            existing = self._assignments.get(encounter_id)
            if existing is not None:
                return existing
            arm = Arm.TREATMENT if rng.random() < 0.5 else Arm.CONTROL
            assignment = ArmAssignment(encounter_id, arm, assigned_at, eligible)
            if self._fh is not None:
                self._fh.write(json.dumps(assignment.to_record()) + "\n")
                self._fh.flush()
            self._assignments[encounter_id] = assignment
            return assignment

    def get(self, encounter_id: str) -> Optional[ArmAssignment]:
        with self._lock:
            return self._assignments.get(encounter_id)

    def all(self) -> list[ArmAssignment]:
        with self._lock:
            return sorted(self._assignments.values(), key=lambda a: a.encounter_id)

    def arm_counts(self) -> dict[Arm, int]:
        counts = {Arm.TREATMENT: 0, Arm.CONTROL: 0}
        for assignment in self.all():
            counts[assignment.arm] += 1
        return counts

    def close(self) -> None:
        if self._fh is not None and not self._fh.closed:
            self._fh.close()


@dataclass(frozen=True)
class AlertEvent:
    """One gate evaluation at order entry, displayed or not."""

    event_id: str
    encounter_id: str
    arm: Arm
    triggered_at: datetime
    displayed: bool
    gate: GateDecision
    outcome: Optional[AlertOutcome] = None

    def __post_init__(self):
        if self.displayed and (self.arm != Arm.TREATMENT or not self.gate.show):
            raise ValueError("displayed requires treatment arm and a passing gate")
        if self.arm == Arm.CONTROL and (self.displayed or self.outcome is not None):
            raise ValueError("control events are never displayed and carry no outcome")
        if self.outcome is not None and not self.displayed:
            raise ValueError("outcomes only exist for displayed alerts")

    @property
    def prediction(self) -> Optional[StabilityPrediction]:
        return self.gate.prediction_used

    @property
    def silently_triggered(self) -> bool:
        return self.arm == Arm.CONTROL and self.gate.show

    def to_record(self) -> dict:
        record = {
            "kind": "event",
            "event_id": self.event_id,
            "encounter_id": self.encounter_id,
            "arm": int(self.arm),
            "triggered_at": format_ts(self.triggered_at),
            "displayed": self.displayed,
            "gate": self.gate.to_dict(),
        }
        if self.outcome is not None:
            record["outcome"] = _outcome_to_dict(self.outcome)
        return record

    @classmethod
    def from_record(cls, record: dict) -> "AlertEvent":
        gate_raw = record["gate"]
        prediction = gate_raw.get("prediction_used")
        gate = GateDecision(
            show=gate_raw["show"],
            reasons=tuple(GateReason(r) for r in gate_raw["reasons"]),
            prediction_used=StabilityPrediction.from_record(prediction) if prediction else None,
        )
        outcome_raw = record.get("outcome")
        return cls(
            event_id=record["event_id"],
            encounter_id=record["encounter_id"],
            arm=Arm(record["arm"]),
            triggered_at=parse_ts(record["triggered_at"]),
            displayed=record["displayed"],
            gate=gate,
            outcome=_outcome_from_dict(outcome_raw) if outcome_raw else None,
        )


def _outcome_to_dict(outcome: AlertOutcome) -> dict:
    return {
        "alert_event_id": outcome.alert_event_id,
        "action": outcome.action.value,
        "acted_at": format_ts(outcome.acted_at),
        "acknowledge_reason": outcome.acknowledge_reason,
    }


def _outcome_from_dict(raw: dict) -> AlertOutcome:
    return AlertOutcome(
        alert_event_id=raw["alert_event_id"],
        action=AlertAction(raw["action"]),
        acted_at=parse_ts(raw["acted_at"]),
        acknowledge_reason=raw.get("acknowledge_reason"),
    )


class EventLog:
    """Append-only alert event channel with a reproducible total order.

    With a path, every append lands as one JSONL line; outcome attachment is
    a separate appended record merged on load, so nothing is ever rewritten.
    """

    def __init__(self, path: Optional[str | Path] = None):
        self._lock = threading.Lock()
        self._events: dict[str, AlertEvent] = {}
        self._seq = 1
        self._fh = None
        if path is None:
            return
        path = Path(path)
        if path.exists():
            self._load_lines(path)
            self._fh = open(path, "a", encoding="utf-8")
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", encoding="utf-8")
            self._fh.write(json.dumps({"schema": EVENT_SCHEMA}) + "\n")
            self._fh.flush()

    def _load_lines(self, path: Path) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("schema") != EVENT_SCHEMA:
                raise ValueError(f"{path} is not an alert-event file")
            for line in fh:
                record = json.loads(line)
                if record["kind"] == "event":
                    event = AlertEvent.from_record(record)
                    self._events[event.event_id] = event
                    seq = int(event.event_id.rsplit("-", 1)[1])
                    self._seq = max(self._seq, seq + 1)
                elif record["kind"] == "outcome":
                    event = self._events[record["event_id"]]
                    self._events[event.event_id] = replace(
                        event, outcome=_outcome_from_dict(record["outcome"])
                    )
                else:
                    raise ValueError(f"unknown event-log record kind {record['kind']!r}")

    @classmethod
    def load(cls, path: str | Path) -> "EventLog":
        log = cls()
        log._load_lines(Path(path))
        return log

    def _write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def record_alert(self, attempt: OrderAttempt, gate: GateDecision, arm: Arm) -> AlertEvent:
        """Log one gate evaluation; display follows the arm, nothing else does."""
        with self._lock:
            event = AlertEvent(
                event_id=f"evt-{self._seq:06d}",
                encounter_id=attempt.encounter_id,
                arm=arm,
                triggered_at=attempt.attempted_at,
                displayed=arm == Arm.TREATMENT and gate.show,
                gate=gate,
            )
            self._seq += 1
            self._write(event.to_record())
            self._events[event.event_id] = event
            return event

    def attach_outcome(self, event_id: str, outcome: AlertOutcome) -> AlertEvent:
        with self._lock:
            event = self._events.get(event_id)
            if event is None:
                raise KeyError(f"unknown alert event {event_id}")
            if event.outcome is not None:
                raise ValueError(f"alert event {event_id} already has an outcome")
            updated = replace(event, outcome=outcome)
            self._write({"kind": "outcome", "event_id": event_id,
                         "outcome": _outcome_to_dict(outcome)})
            self._events[event_id] = updated
            return updated

    def get(self, event_id: str) -> Optional[AlertEvent]:
        with self._lock:
            return self._events.get(event_id)

    def events(
        self, window: Optional[tuple[datetime, datetime]] = None
    ) -> list[AlertEvent]:
        with self._lock:
            out = list(self._events.values())
        if window is not None:
            start, end = window
            out = [e for e in out if start <= e.triggered_at <= end]
        return sorted(out, key=lambda e: (e.triggered_at, e.event_id))

    def last_trigger_at(self, encounter_id: str) -> Optional[datetime]:
        """Most recent gate-passing evaluation for the encounter, either arm.

        Keyed to passing gates (not displays) so snooze state is identical
        across arms and blinding survives.
        """
        with self._lock:
            times = [
                e.triggered_at
                for e in self._events.values()
                if e.encounter_id == encounter_id and e.gate.show
            ]
        return max(times) if times else None

    def export(self, path: str | Path, window=None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"schema": EVENT_SCHEMA}) + "\n")
            for event in self.events(window):
                fh.write(json.dumps(event.to_record()) + "\n")
        return path

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps({"schema": EVENT_SCHEMA}).encode())
        for event in self.events():
            digest.update(json.dumps(event.to_record()).encode())
        return digest.hexdigest()

    def close(self) -> None:
        if self._fh is not None and not self._fh.closed:
            self._fh.close()


@dataclass(frozen=True)
class EncounterRecord:
    """Per-encounter outcome row consumed by the analytics module."""

    encounter_id: str
    arm: Arm
    admitted_at: datetime
    discharged_at: Optional[datetime]
    icu_on_admission: bool
    icu_transfer_times: tuple[datetime, ...]
    died_in_hospital: bool
    readmitted_within_30d: bool
    age: float
    sex: str
    race: str
    unit: str = ""
    patient_id: str = ""
    eligible: bool = True
    cbc_result_times: tuple[datetime, ...] = ()

    def __post_init__(self):
        if self.discharged_at is not None and self.discharged_at <= self.admitted_at:
            raise ValueError(f"{self.encounter_id}: discharged_at must follow admitted_at")

    @property
    def los_hours(self) -> Optional[float]:
        if self.discharged_at is None:
            return None
        return (self.discharged_at - self.admitted_at).total_seconds() / 3600.0

    def to_record(self) -> dict:
        return {
            "encounter_id": self.encounter_id,
            "arm": int(self.arm),
            "admitted_at": format_ts(self.admitted_at),
            "discharged_at": format_ts(self.discharged_at) if self.discharged_at else None,
            "icu_on_admission": self.icu_on_admission,
            "icu_transfer_times": [format_ts(t) for t in self.icu_transfer_times],
            "died_in_hospital": self.died_in_hospital,
            "readmitted_within_30d": self.readmitted_within_30d,
            "age": self.age,
            "sex": self.sex,
            "race": self.race,
            "unit": self.unit,
            "patient_id": self.patient_id,
            "eligible": self.eligible,
            "cbc_result_times": [format_ts(t) for t in self.cbc_result_times],
        }

    @classmethod
    def from_record(cls, record: dict) -> "EncounterRecord":
        return cls(
            encounter_id=record["encounter_id"],
            arm=Arm(record["arm"]),
            admitted_at=parse_ts(record["admitted_at"]),
            discharged_at=parse_ts(record["discharged_at"]) if record["discharged_at"] else None,
            icu_on_admission=record["icu_on_admission"],
            icu_transfer_times=tuple(parse_ts(t) for t in record["icu_transfer_times"]),
            died_in_hospital=record["died_in_hospital"],
            readmitted_within_30d=record["readmitted_within_30d"],
            age=record["age"],
            sex=record["sex"],
            race=record["race"],
            unit=record.get("unit", ""),
            patient_id=record.get("patient_id", ""),
            eligible=record.get("eligible", True),
            cbc_result_times=tuple(parse_ts(t) for t in record.get("cbc_result_times", ())),
        )


def save_encounter_records(records: Iterable[EncounterRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(records, key=lambda r: r.encounter_id)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": ENCOUNTER_SCHEMA}) + "\n")
        for record in ordered:
            fh.write(json.dumps(record.to_record()) + "\n")
    return path


def load_encounter_records(path: str | Path) -> list[EncounterRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != ENCOUNTER_SCHEMA:
            raise ValueError(f"{path} is not an encounter-record file")
        return [EncounterRecord.from_record(json.loads(line)) for line in fh]
