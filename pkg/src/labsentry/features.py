"""Feature extraction from a patient snapshot for the stability model.

Every maybe-missing numeric entry travels as a (value, presence) pair so a
missing observation is an explicit marker the model can see, never a silent
zero. A component with no prior results at all is marked not predictable;
the predictor turns that into a zero panel probability rather than invent
history.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Mapping, Sequence

from .gateway import PatientSnapshot

DEFAULT_ANTICOAGULANT_CODES = frozenset(
    {"heparin-iv", "heparin-sc", "warfarin", "enoxaparin", "apixaban", "rivaroxaban"}
)

# Numeric layout per component, newest history first. Presence indicators
# immediately follow the value they describe.
NUMERIC_COLUMNS = (
    "value_1", "present_1",
    "value_2", "present_2",
    "value_3", "present_3",
    "delta", "delta_present",
    "hours_since_last", "hours_since_last_present",
    "hours_since_admission",
    "recent_transfusion",
    "recent_procedure",
    "active_anticoagulant",
    "age",
    "sex_female",
)


@dataclass(frozen=True)
class FeatureConfig:
    k: int = 3
    flag_lookback_h: float = 48.0
    anticoagulant_codes: frozenset[str] = DEFAULT_ANTICOAGULANT_CODES


@dataclass(frozen=True)
class ComponentFeatures:
    values: tuple[float, ...]
    present: tuple[bool, ...]
    delta: float
    delta_present: bool
    hours_since_last: float
    hours_since_last_present: bool
    predictable: bool


@dataclass(frozen=True)
class FeatureVector:
    encounter_id: str
    as_of: datetime
    components: Mapping[str, ComponentFeatures]
    hours_since_admission: float
    recent_transfusion: bool
    recent_procedure: bool
    active_anticoagulant: bool
    age: float
    sex_female: bool

    def predictable(self, component: str) -> bool:
        cf = self.components.get(component)
        return cf is not None and cf.predictable

    def numeric(self, component: str) -> list[float]:
        """Model input row for one component, ordered per NUMERIC_COLUMNS."""
        cf = self.components[component]
        row: list[float] = []
        for v, p in zip(cf.values, cf.present):
            row.extend((v, 1.0 if p else 0.0))
        row.extend(
            (
                cf.delta,
                1.0 if cf.delta_present else 0.0,
                cf.hours_since_last,
                1.0 if cf.hours_since_last_present else 0.0,
                self.hours_since_admission,
                1.0 if self.recent_transfusion else 0.0,
                1.0 if self.recent_procedure else 0.0,
                1.0 if self.active_anticoagulant else 0.0,
                self.age,
                1.0 if self.sex_female else 0.0,
            )
        )
        return row

    def to_dict(self) -> dict:
        return {
            "encounter_id": self.encounter_id,
            "as_of": self.as_of.isoformat(),
            "hours_since_admission": self.hours_since_admission,
            "recent_transfusion": self.recent_transfusion,
            "recent_procedure": self.recent_procedure,
            "active_anticoagulant": self.active_anticoagulant,
            "age": self.age,
            "sex_female": self.sex_female,
            "components": {
                code: {
                    "values": list(cf.values),
                    "present": list(cf.present),
                    "delta": cf.delta,
                    "delta_present": cf.delta_present,
                    "hours_since_last": cf.hours_since_last,
                    "hours_since_last_present": cf.hours_since_last_present,
                    "predictable": cf.predictable,
                }
                for code, cf in sorted(self.components.items())
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "FeatureVector":
        components = {
            code: ComponentFeatures(
                values=tuple(entry["values"]),
                present=tuple(entry["present"]),
                delta=entry["delta"],
                delta_present=entry["delta_present"],
                hours_since_last=entry["hours_since_last"],
                hours_since_last_present=entry["hours_since_last_present"],
                predictable=entry["predictable"],
            )
            for code, entry in raw["components"].items()
        }
        return cls(
            encounter_id=raw["encounter_id"],
            as_of=datetime.fromisoformat(raw["as_of"]),
            components=components,
            hours_since_admission=raw["hours_since_admission"],
            recent_transfusion=raw["recent_transfusion"],
            recent_procedure=raw["recent_procedure"],
            active_anticoagulant=raw["active_anticoagulant"],
            age=raw["age"],
            sex_female=raw["sex_female"],
        )


def _hours(later: datetime, earlier: datetime) -> float:
    return (later - earlier).total_seconds() / 3600.0


def extract_features(
    snapshot: PatientSnapshot,
    as_of: datetime,
    components: Sequence[str],
    config: FeatureConfig = FeatureConfig(),
) -> FeatureVector:
    """Deterministic feature vector using only data at or before as_of."""
    if snapshot.as_of != as_of:
        raise ValueError(
            f"snapshot.as_of {snapshot.as_of.isoformat()} does not match as_of {as_of.isoformat()}"
        )

    lookback = timedelta(hours=config.flag_lookback_h)
    recent_transfusion = any(as_of - lookback <= t <= as_of for t in snapshot.transfusions)
    recent_procedure = any(
        as_of - lookback <= p.performed_at <= as_of for p in snapshot.procedures
    )
    active_anticoagulant = any(
        m.active and m.code in config.anticoagulant_codes for m in snapshot.medications
    )

    per_component: dict[str, ComponentFeatures] = {}
    for code in components:
        history = [r for r in snapshot.labs.for_component(code) if r.observed_at <= as_of]
        recent = history[-config.k:][::-1]  # newest first
        values = tuple(r.value for r in recent) + (0.0,) * (config.k - len(recent))
        present = tuple(True for _ in recent) + (False,) * (config.k - len(recent))
        if len(history) >= 2:
            delta, delta_present = history[-1].value - history[-2].value, True
        else:
            delta, delta_present = 0.0, False
        if history:
            hours_since_last, hsl_present = _hours(as_of, history[-1].observed_at), True
        else:
            hours_since_last, hsl_present = 0.0, False
        per_component[code] = ComponentFeatures(
            values=values,
            present=present,
            delta=delta,
            delta_present=delta_present,
            hours_since_last=hours_since_last,
            hours_since_last_present=hsl_present,
            predictable=len(history) >= 1,
        )

    return FeatureVector(
        encounter_id=snapshot.encounter_id,
        as_of=as_of,
        components=per_component,
        hours_since_admission=_hours(as_of, snapshot.admission_at),
        recent_transfusion=recent_transfusion,
        recent_procedure=recent_procedure,
        active_anticoagulant=active_anticoagulant,
        age=snapshot.age,
        sex_female=snapshot.sex == "female",
    )
