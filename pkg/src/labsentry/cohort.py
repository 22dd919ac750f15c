"""Synthetic inpatient cohort and the end-to-end pilot simulation.

The generator fabricates patients, admission windows, and per-component
ground-truth lab trajectories on an hourly grid. Quiescent physiology is a
bounded mean-reverting wiggle around a per-patient baseline, so with the
instability rate at zero every sampled pair labels stable no matter how the
draws are spaced. Instability arrives as Poisson-timed directional shocks
(WBC spikes up, HGB and PLT drop) large enough to break the consensus
bounds, ramping in over hours and decaying over a day or two.

run_pilot drives the real modules end to end under a simulated clock:
scheduled prediction ticks, daily order renewals, gate evaluation,
arm-dependent display, scripted clinician responses, and lab draws that
follow from whatever orders survive. Nothing reads the ground-truth grid
except the draw engine; the predictor only ever sees realized results
through the gateway.
"""

from __future__ import annotations

import heapq
import logging
import math
import random
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .alerts import (
    AlertAction,
    AlertConfig,
    AlertOutcome,
    DEFAULT_ACKNOWLEDGE_REASONS,
    OrderAttempt,
    apply_action,
    evaluate_gate,
)
from .clock import SimClock
from .domain import LabSeries, ThresholdRegistry, default_registry, label_stability
from .features import FeatureConfig, extract_features
from .fixture import FixtureStore
from .gateway import (
    DirectGateway,
    OrderFrequency,
    OrderStatus,
    StandingOrder,
    format_ts,
)
from .predictor import (
    ModelArtifact,
    TrainConfig,
    TrainingRow,
    calibrate_threshold,
    train,
)
from .scheduler import PredictionJob
from .store import PredictionStore, StabilityPrediction
from .trial import ArmRegistry, EncounterRecord, EventLog

logger = logging.getLogger(__name__)

CBC_OBSERVATION_CODES = {"WBC": "6690-2", "HGB": "718-7", "PLT": "777-3"}

RACE_MIX = (
    ("white", 0.55),
    ("black", 0.055),
    ("asian", 0.16),
    ("pacific_islander", 0.01),
    ("native_american", 0.005),
    ("other", 0.19),
    ("unknown", 0.03),
)

UNITS = ("MED-1", "MED-2", "MED-3", "SURG-1", "SURG-2", "ONC-1", "CARD-1", "TELE-1")
EXCLUDED_UNIT = "BMT"

DEFAULT_START = datetime(2024, 8, 15, tzinfo=timezone.utc)


class ConfigError(ValueError):
    """Cohort configuration that cannot produce a runnable simulation."""


def _require_prob(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class TrajectoryParams:
    """Ground-truth dynamics for one panel component.

    wiggle_frac caps quiescent displacement at that fraction of the tighter
    delta bound, which is what guarantees stability between any two samples
    when shock_rate_per_day is zero.
    """

    baseline_mean: float
    baseline_sd: float
    baseline_lo: float
    baseline_hi: float
    shock_rate_per_day: float
    shock_size: float
    shock_direction: int  # +1 spikes up, -1 drops
    shock_onset_h: float = 6.0
    shock_hold_h: float = 12.0
    shock_recovery_h: float = 24.0
    zone_multiplier: float = 3.0
    precision: float = 0.1
    value_floor: float = 0.2
    wiggle_frac: float = 0.35

    def __post_init__(self):
        if not self.baseline_lo < self.baseline_hi:
            raise ConfigError("baseline_lo must be below baseline_hi")
        if self.baseline_sd <= 0 or self.shock_size <= 0 or self.precision <= 0:
            raise ConfigError("baseline_sd, shock_size, precision must be positive")
        if self.shock_rate_per_day < 0:
            raise ConfigError("shock_rate_per_day must be non-negative")
        if self.shock_direction not in (-1, 1):
            raise ConfigError("shock_direction must be -1 or +1")
        if not 0.0 < self.wiggle_frac <= 0.4:
            raise ConfigError("wiggle_frac must lie in (0, 0.4]")


def default_trajectories() -> dict[str, TrajectoryParams]:
    """Per-component defaults tuned so the silent phase lands near the
    governance precision targets; baselines sit far enough inside the stop
    bounds that quiescent wiggle can never cross them."""
    return {
        "WBC": TrajectoryParams(
            baseline_mean=7.5, baseline_sd=1.1, baseline_lo=5.3, baseline_hi=10.8,
            shock_rate_per_day=0.090, shock_size=4.5, shock_direction=1,
            precision=0.1, value_floor=0.3,
        ),
        "HGB": TrajectoryParams(
            baseline_mean=12.6, baseline_sd=1.0, baseline_lo=10.5, baseline_hi=15.9,
            shock_rate_per_day=0.051, shock_size=2.9, shock_direction=-1,
            precision=0.1, value_floor=3.0,
        ),
        "PLT": TrajectoryParams(
            baseline_mean=255.0, baseline_sd=55.0, baseline_lo=160.0, baseline_hi=450.0,
            shock_rate_per_day=0.057, shock_size=100.0, shock_direction=-1,
            precision=1.0, value_floor=5.0,
        ),
    }


@dataclass(frozen=True)
class BehaviorModel:
    """Static per-alert response multinomial plus daily ordering habits."""

    p_discontinue: float = 0.10
    p_reduce_every_other_day: float = 0.08
    p_reduce_weekly: float = 0.015
    p_acknowledge: float = 0.765
    renew_probability: float = 0.92
    reorder_probability: float = 0.35

    def __post_init__(self):
        for name in ("p_discontinue", "p_reduce_every_other_day", "p_reduce_weekly",
                     "p_acknowledge", "renew_probability", "reorder_probability"):
            _require_prob(name, getattr(self, name))
        if self.action_total > 1.0 + 1e-9:
            raise ConfigError("alert action probabilities exceed 1")

    @property
    def action_total(self) -> float:
        return (self.p_discontinue + self.p_reduce_every_other_day
                + self.p_reduce_weekly + self.p_acknowledge)

    @property
    def p_cancel(self) -> float:
        """Closing the dialog without choosing is the leftover mass."""
        return max(0.0, 1.0 - self.action_total)

    def choose(self, u: float) -> AlertAction:
        edges = (
            (self.p_discontinue, AlertAction.DISCONTINUED),
            (self.p_reduce_every_other_day, AlertAction.REDUCED_EVERY_OTHER_DAY),
            (self.p_reduce_weekly, AlertAction.REDUCED_WEEKLY),
            (self.p_acknowledge, AlertAction.ACKNOWLEDGED_CONTINUE),
        )
        acc = 0.0
        for mass, action in edges:
            acc += mass
            if u < acc:
                return action
        return AlertAction.CANCELLED_DIALOG


def null_behavior() -> BehaviorModel:
    """Every displayed alert is acknowledged; orders never change."""
    return BehaviorModel(p_discontinue=0.0, p_reduce_every_other_day=0.0,
                         p_reduce_weekly=0.0, p_acknowledge=1.0)


@dataclass(frozen=True)
class OutcomeRates:
    """Arm-independent scripted clinical outcomes."""

    icu_transfer_per_day: float = 0.004
    mortality: float = 0.006
    readmission_30d: float = 0.12

    def __post_init__(self):
        _require_prob("mortality", self.mortality)
        _require_prob("readmission_30d", self.readmission_30d)
        if self.icu_transfer_per_day < 0:
            raise ConfigError("icu_transfer_per_day must be non-negative")


@dataclass(frozen=True)
class CohortConfig:
    n_encounters: int = 500
    admissions_per_day: float = 9.0
    mean_los_hours: float = 112.0
    los_sigma: float = 0.5
    excluded_fraction: float = 0.03
    heparin_fraction: float = 0.04
    procedure_rate_per_day: float = 0.015
    transfusion_rate_per_day: float = 0.008
    trajectories: Mapping[str, TrajectoryParams] = field(default_factory=default_trajectories)
    behavior: BehaviorModel = field(default_factory=BehaviorModel)
    outcomes: OutcomeRates = field(default_factory=OutcomeRates)
    start: datetime = DEFAULT_START
    seed: int = 0

    def __post_init__(self):
        if self.n_encounters < 1:
            raise ConfigError("n_encounters must be at least 1")
        if self.admissions_per_day <= 0:
            raise ConfigError("admissions_per_day must be positive")
        if self.mean_los_hours < 24:
            raise ConfigError("mean_los_hours must be at least 24")
        if not self.trajectories:
            raise ConfigError("at least one component trajectory is required")
        _require_prob("excluded_fraction", self.excluded_fraction)
        _require_prob("heparin_fraction", self.heparin_fraction)
        if self.start.tzinfo is None:
            raise ConfigError("start must be timezone-aware")

    def scaled_shocks(self, factor: float) -> "CohortConfig":
        """Same cohort shape with every instability rate multiplied."""
        scaled = {
            code: replace(p, shock_rate_per_day=p.shock_rate_per_day * factor)
            for code, p in self.trajectories.items()
        }
        return replace(self, trajectories=scaled)

    def to_dict(self) -> dict:
        return {
            "n_encounters": self.n_encounters,
            "admissions_per_day": self.admissions_per_day,
            "mean_los_hours": self.mean_los_hours,
            "los_sigma": self.los_sigma,
            "excluded_fraction": self.excluded_fraction,
            "heparin_fraction": self.heparin_fraction,
            "procedure_rate_per_day": self.procedure_rate_per_day,
            "transfusion_rate_per_day": self.transfusion_rate_per_day,
            "trajectories": {
                code: {
                    "baseline_mean": p.baseline_mean,
                    "baseline_sd": p.baseline_sd,
                    "baseline_lo": p.baseline_lo,
                    "baseline_hi": p.baseline_hi,
                    "shock_rate_per_day": p.shock_rate_per_day,
                    "shock_size": p.shock_size,
                    "shock_direction": p.shock_direction,
                    "precision": p.precision,
                    "value_floor": p.value_floor,
                }
                for code, p in sorted(self.trajectories.items())
            },
            "behavior": {
                "p_discontinue": self.behavior.p_discontinue,
                "p_reduce_every_other_day": self.behavior.p_reduce_every_other_day,
                "p_reduce_weekly": self.behavior.p_reduce_weekly,
                "p_acknowledge": self.behavior.p_acknowledge,
                "renew_probability": self.behavior.renew_probability,
                "reorder_probability": self.behavior.reorder_probability,
            },
            "outcomes": {
                "icu_transfer_per_day": self.outcomes.icu_transfer_per_day,
                "mortality": self.outcomes.mortality,
                "readmission_30d": self.outcomes.readmission_30d,
            },
            "start": format_ts(self.start),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CohortConfig":
        kwargs = {
            key: raw[key]
            for key in (
                "n_encounters", "admissions_per_day", "mean_los_hours", "los_sigma",
                "excluded_fraction", "heparin_fraction", "procedure_rate_per_day",
                "transfusion_rate_per_day", "seed",
            )
            if key in raw
        }
        if "trajectories" in raw:
            base = default_trajectories()
            merged = {}
            for code, overrides in raw["trajectories"].items():
                if code in base:
                    merged[code] = replace(base[code], **overrides)
                else:
                    merged[code] = TrajectoryParams(**overrides)
            kwargs["trajectories"] = merged
        if "behavior" in raw:
            kwargs["behavior"] = BehaviorModel(**raw["behavior"])
        if "outcomes" in raw:
            kwargs["outcomes"] = OutcomeRates(**raw["outcomes"])
        if "start" in raw:
            from .gateway import parse_ts

            kwargs["start"] = parse_ts(raw["start"])
        return cls(**kwargs)


# -- trajectory generation --------------------------------------------------


def _truncated_normal(rng: random.Random, mean: float, sd: float, lo: float, hi: float) -> float:
    for _ in range(1000):
        value = rng.gauss(mean, sd)
        if lo <= value <= hi:
            return value
    return min(max(mean, lo), hi)


def _shock_profile(hours_since_onset: float, p: TrajectoryParams) -> float:
    """Ramp to full size, hold, then exponential recovery."""
    if hours_since_onset < 0:
        return 0.0
    if hours_since_onset < p.shock_onset_h:
        return hours_since_onset / p.shock_onset_h
    held = hours_since_onset - p.shock_onset_h
    if held < p.shock_hold_h:
        return 1.0
    return math.exp(-(held - p.shock_hold_h) / p.shock_recovery_h)


def _round_to(value: float, precision: float) -> float:
    steps = round(value / precision)
    digits = max(0, -int(math.floor(math.log10(precision))))
    return round(steps * precision, digits)


@dataclass(frozen=True)
class ComponentTrack:
    params: TrajectoryParams
    baseline: float
    grid: tuple[float, ...]  # hourly, index 0 at admission
    shock_onsets: tuple[float, ...]  # hours since admission

    def value_at_hour(self, hours: float) -> float:
        if hours <= 0:
            raw = self.grid[0]
        else:
            idx = min(int(hours), len(self.grid) - 2)
            frac = min(max(hours - idx, 0.0), 1.0)
            raw = self.grid[idx] * (1 - frac) + self.grid[idx + 1] * frac
        return _round_to(max(raw, self.params.value_floor), self.params.precision)


def _build_track(
    rng: random.Random, p: TrajectoryParams, horizon_h: int, bound_min: float,
    hazard_scale: float,
) -> ComponentTrack:
    baseline = _truncated_normal(rng, p.baseline_mean, p.baseline_sd, p.baseline_lo, p.baseline_hi)
    cap = p.wiggle_frac * bound_min

    period_slow = rng.uniform(36.0, 80.0)
    period_fast = rng.uniform(9.0, 22.0)
    phase_slow = rng.uniform(0.0, period_slow)
    phase_fast = rng.uniform(0.0, period_fast)
    amp_slow = 0.18 * bound_min * rng.uniform(0.5, 1.0)
    amp_fast = 0.09 * bound_min * rng.uniform(0.4, 1.0)

    ar = 0.0
    ar_cap = 0.08 * bound_min
    displacement = []
    for hour in range(horizon_h + 2):
        ar = 0.85 * ar + rng.gauss(0.0, 0.035 * bound_min)
        ar = min(max(ar, -ar_cap), ar_cap)
        wiggle = (
            amp_slow * math.sin(2 * math.pi * (hour + phase_slow) / period_slow)
            + amp_fast * math.sin(2 * math.pi * (hour + phase_fast) / period_fast)
            + ar
        )
        displacement.append(min(max(wiggle, -cap), cap))

    onsets: list[float] = []
    base_hazard = hazard_scale * p.shock_rate_per_day / 24.0
    if base_hazard > 0:
        zone_edge = 0.5 * cap
        for hour in range(horizon_h + 2):
            hazard = base_hazard
            if displacement[hour] * p.shock_direction > zone_edge:
                hazard *= p.zone_multiplier
            if rng.random() < hazard:
                onsets.append(float(hour) + rng.random())

    grid = []
    for hour in range(horizon_h + 2):
        shock = sum(_shock_profile(hour - onset, p) for onset in onsets)
        shock = min(shock, 1.8)  # overlapping episodes saturate
        value = baseline + displacement[hour] + p.shock_direction * p.shock_size * shock
        grid.append(max(value, p.value_floor))

    return ComponentTrack(params=p, baseline=baseline, grid=tuple(grid),
                          shock_onsets=tuple(onsets))


@dataclass(frozen=True)
class SimulatedEncounter:
    """One admission with its full ground-truth future."""

    encounter_id: str
    patient_id: str
    admitted_at: datetime
    discharge_at: datetime
    age: float
    sex: str
    race: str
    unit: str
    excluded: bool
    on_iv_heparin: bool
    tracks: Mapping[str, ComponentTrack]
    procedure_times: tuple[datetime, ...]
    transfusion_times: tuple[datetime, ...]
    icu_transfer_times: tuple[datetime, ...]
    died_in_hospital: bool
    readmitted_within_30d: bool
    draw_jitter_minutes: int
    behavior_seed: int

    @property
    def los_hours(self) -> float:
        return (self.discharge_at - self.admitted_at).total_seconds() / 3600.0

    def value_at(self, component: str, at: datetime) -> float:
        hours = (at - self.admitted_at).total_seconds() / 3600.0
        return self.tracks[component].value_at_hour(hours)

    def draw_values(self, at: datetime) -> dict[str, float]:
        return {code: self.value_at(code, at) for code in self.tracks}


@dataclass(frozen=True)
class Cohort:
    config: CohortConfig
    encounters: tuple[SimulatedEncounter, ...]

    def initial_dataset(self) -> dict:
        """Fixture-loadable bundle: patients, encounters, admission CBC
        orders, the admission baseline draw, and any scripted medications,
        procedures, and transfusions. Future lab values stay out."""
        entries = []
        for enc in self.encounters:
            birth_year = enc.admitted_at.year - int(enc.age)
            entries.append({
                "resourceType": "Patient",
                "id": enc.patient_id,
                "birthDate": f"{birth_year:04d}-01-01",
                "gender": enc.sex,
                "extension": [{"url": "race", "valueString": enc.race}],
            })
            entries.append({
                "resourceType": "Encounter",
                "id": enc.encounter_id,
                "subject": {"reference": f"Patient/{enc.patient_id}"},
                "period": {
                    "start": format_ts(enc.admitted_at),
                    "end": format_ts(enc.discharge_at),
                },
                "location": [{"location": {"display": enc.unit}}],
            })
            entries.extend(_observation_resources(enc, enc.admitted_at))
            order = initial_order(enc)
            from .gateway import order_to_resource

            entries.append(order_to_resource(order))
            if enc.on_iv_heparin:
                entries.append({
                    "resourceType": "MedicationRequest",
                    "id": f"med-{enc.encounter_id}",
                    "status": "active",
                    "medicationCodeableConcept": {"coding": [{"code": "heparin-iv"}]},
                    "authoredOn": format_ts(enc.admitted_at),
                    "dosageInstruction": [{"route": {"text": "intravenous"}}],
                    "extension": [{"url": "therapeutic", "valueBoolean": True}],
                    "encounter": {"reference": f"Encounter/{enc.encounter_id}"},
                })
            for i, at in enumerate(enc.procedure_times):
                entries.append({
                    "resourceType": "Procedure",
                    "id": f"proc-{enc.encounter_id}-{i}",
                    "code": {"coding": [{"code": "PROC-GEN"}]},
                    "performedDateTime": format_ts(at),
                    "encounter": {"reference": f"Encounter/{enc.encounter_id}"},
                })
            for i, at in enumerate(enc.transfusion_times):
                entries.append({
                    "resourceType": "Procedure",
                    "id": f"txn-{enc.encounter_id}-{i}",
                    "code": {"coding": [{"code": "TRANSFUSION-RBC"}]},
                    "performedDateTime": format_ts(at),
                    "encounter": {"reference": f"Encounter/{enc.encounter_id}"},
                })
        return {"resourceType": "Bundle", "type": "collection",
                "entry": [{"resource": r} for r in entries]}


def initial_order(enc: SimulatedEncounter) -> StandingOrder:
    return StandingOrder(
        order_id=f"order-{enc.encounter_id}-0",
        encounter_id=enc.encounter_id,
        panel="CBC",
        frequency=OrderFrequency.DAILY_OR_HIGHER,
        start_at=enc.admitted_at,
        end_at=enc.admitted_at + timedelta(hours=72),
    )


def _observation_resources(enc: SimulatedEncounter, at: datetime) -> list[dict]:
    values = enc.draw_values(at)
    stamp = format_ts(at).replace(":", "").replace("-", "")
    resources = []
    for code, value in values.items():
        resources.append({
            "resourceType": "Observation",
            "id": f"obs-{enc.encounter_id}-{code.lower()}-{stamp}",
            "status": "final",
            "category": [{"text": "laboratory"}],
            "code": {"coding": [{"code": CBC_OBSERVATION_CODES[code]}]},
            "valueQuantity": {"value": value},
            "effectiveDateTime": format_ts(at),
            "encounter": {"reference": f"Encounter/{enc.encounter_id}"},
        })
    return resources


def _poisson_times(rng: random.Random, rate_per_day: float,
                   start: datetime, end: datetime) -> tuple[datetime, ...]:
    if rate_per_day <= 0:
        return ()
    times = []
    t = start
    while True:
        gap_days = rng.expovariate(rate_per_day)
        t = t + timedelta(days=gap_days)
        if t >= end:
            return tuple(times)
        times.append(t)


def generate_cohort(config: CohortConfig, hazard_scale: float = 1.0) -> Cohort:
    """Deterministic under (config, hazard_scale); hazard_scale lets the
    training phase run a calmer version of the same population."""
    registry = default_registry()
    try:
        for code in config.trajectories:
            registry.thresholds_for(code)
    except Exception as exc:
        raise ConfigError(f"unknown panel component in trajectories: {exc}") from exc

    master = random.Random(config.seed)
    admit_rng = random.Random(master.randrange(2**63))
    encounters = []
    admitted_at = config.start
    for i in range(config.n_encounters):
        admitted_at = admitted_at + timedelta(
            days=admit_rng.expovariate(config.admissions_per_day)
        )
        enc_rng = random.Random(master.randrange(2**63))
        los_h = min(max(enc_rng.lognormvariate(
            math.log(config.mean_los_hours) - config.los_sigma**2 / 2, config.los_sigma
        ), 30.0), 480.0)
        discharge_at = admitted_at + timedelta(hours=los_h)

        age = round(min(max(enc_rng.gauss(67.0, 16.0), 18.0), 102.0), 1)
        sex = "female" if enc_rng.random() < 0.505 else "male"
        u = enc_rng.random()
        race = RACE_MIX[-1][0]
        acc = 0.0
        for name, mass in RACE_MIX:
            acc += mass
            if u < acc:
                race = name
                break
        excluded = enc_rng.random() < config.excluded_fraction
        unit = EXCLUDED_UNIT if excluded else UNITS[enc_rng.randrange(len(UNITS))]

        horizon_h = int(math.ceil(los_h))
        tracks = {}
        for code in sorted(config.trajectories):
            p = config.trajectories[code]
            thresholds = registry.thresholds_for(code)
            bound_min = min(abs(thresholds.acceptable_decrease), thresholds.acceptable_increase)
            age_mult = min(max(0.6 + 0.006 * age, 0.7), 1.3)
            tracks[code] = _build_track(enc_rng, p, horizon_h, bound_min,
                                        hazard_scale * age_mult)

        encounters.append(SimulatedEncounter(
            encounter_id=f"enc-{i:04d}",
            patient_id=f"pat-{i:04d}",
            admitted_at=admitted_at,
            discharge_at=discharge_at,
            age=age,
            sex=sex,
            race=race,
            unit=unit,
            excluded=excluded,
            on_iv_heparin=(not excluded) and enc_rng.random() < config.heparin_fraction,
            tracks=tracks,
            procedure_times=_poisson_times(
                enc_rng, config.procedure_rate_per_day, admitted_at, discharge_at),
            transfusion_times=_poisson_times(
                enc_rng, config.transfusion_rate_per_day, admitted_at, discharge_at),
            icu_transfer_times=_poisson_times(
                enc_rng, config.outcomes.icu_transfer_per_day, admitted_at, discharge_at),
            died_in_hospital=enc_rng.random() < config.outcomes.mortality,
            readmitted_within_30d=enc_rng.random() < config.outcomes.readmission_30d,
            draw_jitter_minutes=enc_rng.randrange(-20, 21),
            behavior_seed=enc_rng.randrange(2**63),
        ))
    return Cohort(config=config, encounters=tuple(encounters))


# -- offline realization and training ---------------------------------------


def scheduled_draw_times(enc: SimulatedEncounter, until: Optional[datetime] = None,
                         every_days: int = 1) -> list[datetime]:
    """The admission baseline plus morning draws at 05:00 with per-patient
    jitter, as they would fall under an uninterrupted standing order."""
    end = min(enc.discharge_at, until) if until else enc.discharge_at
    times = [enc.admitted_at]
    day = enc.admitted_at.replace(hour=5, minute=0, second=0, microsecond=0)
    day += timedelta(days=1 if enc.admitted_at.hour >= 5 else 0)
    step = 0
    while True:
        at = day + timedelta(days=step, minutes=enc.draw_jitter_minutes)
        if at >= end:
            return times
        if at > enc.admitted_at:
            times.append(at)
        step += every_days


def realize_draws(cohort: Cohort, store: FixtureStore,
                  until: Optional[datetime] = None) -> dict[str, list[datetime]]:
    """Append every scheduled draw to the fixture store (no alert loop)."""
    realized: dict[str, list[datetime]] = {}
    for enc in cohort.encounters:
        times = scheduled_draw_times(enc, until=until)
        for at in times[1:]:  # the baseline draw ships with the dataset
            for resource in _observation_resources(enc, at):
                store.create(resource)
        realized[enc.encounter_id] = times
    return realized


def build_training_rows(
    cohort: Cohort,
    gateway: DirectGateway,
    draw_times: Mapping[str, Sequence[datetime]],
    registry: Optional[ThresholdRegistry] = None,
    feature_config: FeatureConfig = FeatureConfig(),
) -> list[TrainingRow]:
    """One row per realized draw with a successor: features as of the draw,
    labels from the next draw's stability per component."""
    registry = registry or default_registry()
    components = sorted(cohort.config.trajectories)
    rows = []
    for enc in cohort.encounters:
        times = list(draw_times.get(enc.encounter_id, ()))
        for k in range(len(times) - 1):
            as_of = times[k]
            snapshot = gateway.fetch_snapshot(enc.encounter_id, as_of)
            features = extract_features(snapshot, as_of, components, feature_config)
            labels = {}
            for code in components:
                prev = snapshot.labs.last_before(code, as_of)
                if prev is None:
                    continue
                nxt_value = enc.value_at(code, times[k + 1])
                nxt = replace(prev, value=nxt_value, observed_at=times[k + 1])
                labels[code] = label_stability(prev, nxt, registry.thresholds_for(code)).stable
            if labels:
                rows.append(TrainingRow(features=features, labels=labels))
    return rows


def train_pilot_artifact(
    config: CohortConfig,
    target_ppv: float = 0.90,
    train_shock_scale: float = 0.35,
    validation_fraction: float = 0.3,
    n_encounters: Optional[int] = None,
) -> ModelArtifact:
    """Train and calibrate on a calmer historical cohort derived from the
    pilot config (separate seed stream, scaled instability)."""
    hist = replace(config, seed=config.seed + 104729,
                   n_encounters=n_encounters or max(config.n_encounters, 240))
    cohort = generate_cohort(hist, hazard_scale=train_shock_scale)
    store = FixtureStore.from_dataset(cohort.initial_dataset())
    gateway = DirectGateway(store)
    draw_times = realize_draws(cohort, store)
    rows = build_training_rows(cohort, gateway, draw_times)
    if len(rows) < 50:
        raise ConfigError(f"training cohort produced only {len(rows)} rows")
    split = max(1, int(len(cohort.encounters) * (1 - validation_fraction)))
    train_ids = {e.encounter_id for e in cohort.encounters[:split]}
    train_rows = [r for r in rows if r.features.encounter_id in train_ids]
    validate_rows = [r for r in rows if r.features.encounter_id not in train_ids]
    artifact = train(train_rows, components=sorted(config.trajectories), config=TrainConfig())
    calibration = calibrate_threshold(artifact, validate_rows, target_ppv=target_ppv)
    return artifact.with_calibration(calibration)


# -- the pilot event loop ----------------------------------------------------


FREQUENCY_DAYS = {
    OrderFrequency.DAILY_OR_HIGHER: 1,
    OrderFrequency.EVERY_OTHER_DAY: 2,
    OrderFrequency.WEEKLY: 7,
}


@dataclass
class PilotResult:
    config: CohortConfig
    cohort: Cohort
    artifact: ModelArtifact
    event_log: EventLog
    arm_registry: ArmRegistry
    encounter_records: list[EncounterRecord]
    predictions: dict[str, list[StabilityPrediction]]
    fixture_store: FixtureStore
    ticks: list
    draw_times: dict[str, list[datetime]]
    prediction_store: Optional[PredictionStore] = None  # only with a persistent workdir

    def lab_series(self) -> dict[str, LabSeries]:
        gateway = DirectGateway(self.fixture_store)
        horizon = max((r.discharged_at or r.admitted_at) for r in self.encounter_records)
        out = {}
        for record in self.encounter_records:
            snap = gateway.fetch_snapshot(record.encounter_id, horizon + timedelta(days=30))
            out[record.encounter_id] = snap.labs
        return out

    def build_report(self):
        from .report import build_report

        return build_report(self.event_log.events(), self.encounter_records)


class _PilotRun:
    """Single-threaded discrete event loop over the wired modules."""

    def __init__(self, cohort: Cohort, artifact: ModelArtifact, duration_days: float,
                 alert_config: AlertConfig, workdir: Path, display_enabled: bool,
                 tick_interval_h: float):
        self.cohort = cohort
        self.config = cohort.config
        self.artifact = artifact
        self.behavior = cohort.config.behavior
        self.alert_config = alert_config
        self.display_enabled = display_enabled
        self.tick_interval_h = tick_interval_h
        self.horizon = cohort.config.start + timedelta(days=duration_days)

        self.fixture_store = FixtureStore.from_dataset(cohort.initial_dataset())
        self.gateway = DirectGateway(self.fixture_store)
        self.clock = SimClock(cohort.config.start)
        self.prediction_store = PredictionStore(workdir / "predictions.log")
        self.job = PredictionJob(
            gateway=self.gateway, artifact=artifact, store=self.prediction_store,
            components=sorted(cohort.config.trajectories), clock=self.clock,
        )
        self.event_log = EventLog(workdir / "events.jsonl")
        self.arm_registry = ArmRegistry(workdir / "arms.jsonl")
        self.arm_rng = random.Random(cohort.config.seed ^ 0x5EED)
        self.by_id = {e.encounter_id: e for e in cohort.encounters}
        self.behavior_rngs = {
            e.encounter_id: random.Random(e.behavior_seed) for e in cohort.encounters
        }
        self.realized: dict[str, list[datetime]] = {e.encounter_id: [] for e in cohort.encounters}
        self.order_seq: dict[str, int] = {e.encounter_id: 0 for e in cohort.encounters}
        self.ticks = []
        self.queue: list[tuple[datetime, int, str, tuple]] = []
        self.seq = 0

    def push(self, at: datetime, kind: str, *payload) -> None:
        if at > self.horizon:
            return
        heapq.heappush(self.queue, (at, self.seq, kind, payload))
        self.seq += 1

    def run(self) -> None:
        tick_at = self.config.start
        while tick_at <= self.horizon:
            self.push(tick_at, "tick")
            tick_at += timedelta(hours=self.tick_interval_h)

        for enc in self.cohort.encounters:
            rng = self.behavior_rngs[enc.encounter_id]
            self.realized[enc.encounter_id].append(enc.admitted_at)
            self.push_order_draws(initial_order(enc))
            rounds_at = (enc.admitted_at + timedelta(days=1)).replace(
                hour=0, minute=0, second=0, microsecond=0
            ) + timedelta(hours=8 + 8 * rng.random())
            self.push(rounds_at, "rounds", enc.encounter_id)

        while self.queue:
            at, _, kind, payload = heapq.heappop(self.queue)
            if self.clock.now() < at:
                self.clock.sleep_until(at)
            if kind == "tick":
                self.ticks.append(self.job.run_tick(self.clock.now()))
            elif kind == "draw":
                self.handle_draw(*payload)
            elif kind == "rounds":
                self.handle_rounds(*payload)

    # draws ------------------------------------------------------------

    def push_order_draws(self, order: StandingOrder) -> None:
        """Queue the first due draw for a just-created order."""
        enc = self.by_id[order.encounter_id]
        every = FREQUENCY_DAYS[order.frequency]
        first = order.start_at.replace(hour=5, minute=0, second=0, microsecond=0)
        first += timedelta(minutes=enc.draw_jitter_minutes)
        while first <= order.start_at:
            first += timedelta(days=every)
        self.push(first, "draw", order.order_id, first)

    def handle_draw(self, order_id: str, at: datetime) -> None:
        order = self.gateway.get_order(order_id)
        enc = self.by_id[order.encounter_id]
        if not order.active_at(at) or not enc.admitted_at <= at < enc.discharge_at:
            return  # lapsed, replaced, or discharged: draw never happens
        for resource in _observation_resources(enc, at):
            self.fixture_store.create(resource)
        self.realized[enc.encounter_id].append(at)
        nxt = at + timedelta(days=FREQUENCY_DAYS[order.frequency])
        self.push(nxt, "draw", order_id, nxt)

    # clinician rounds ---------------------------------------------------

    def handle_rounds(self, encounter_id: str) -> None:
        enc = self.by_id[encounter_id]
        now = self.clock.now()
        rng = self.behavior_rngs[encounter_id]
        if now < enc.discharge_at:
            active = [
                o for o in self.gateway.list_orders(encounter_id) if o.active_at(now)
            ]
            daily = [o for o in active if o.frequency == OrderFrequency.DAILY_OR_HIGHER]
            if daily:
                if rng.random() < self.behavior.renew_probability:
                    self.handle_attempt(enc, daily[0], now, renewal=True)
            elif not active and rng.random() < self.behavior.reorder_probability:
                self.order_seq[encounter_id] += 1
                order = StandingOrder(
                    order_id=f"order-{encounter_id}-{self.order_seq[encounter_id]}",
                    encounter_id=encounter_id,
                    panel="CBC",
                    frequency=OrderFrequency.DAILY_OR_HIGHER,
                    start_at=now,
                    end_at=now + timedelta(hours=72),
                )
                self.gateway.create_order(order)
                self.push_order_draws(order)
                self.handle_attempt(enc, order, now, renewal=False)
            nxt = now.replace(hour=0, minute=0, second=0, microsecond=0) + timedelta(
                days=1, hours=8 + 8 * rng.random()
            )
            self.push(nxt, "rounds", encounter_id)

    def handle_attempt(self, enc: SimulatedEncounter, order: StandingOrder,
                       now: datetime, renewal: bool) -> None:
        attempt = OrderAttempt(
            encounter_id=enc.encounter_id, order=order, attempted_at=now,
            clinician_id=f"md-{enc.encounter_id[-2:]}",
        )
        snapshot = self.gateway.fetch_snapshot(enc.encounter_id, now)
        latest = self.prediction_store.latest(enc.encounter_id, now)
        gate = evaluate_gate(
            attempt, snapshot, latest, self.alert_config,
            last_trigger_at=self.event_log.last_trigger_at(enc.encounter_id),
        )
        assignment = self.arm_registry.assign(
            enc.encounter_id, self.arm_rng, now, eligible=not enc.excluded
        )
        arm = assignment.arm if self.display_enabled else None
        if arm is None:
            # silent phase: log nothing, just keep the order alive
            self.extend_order(order, now, renewal)
            return
        event = self.event_log.record_alert(attempt, gate, arm)
        rng = self.behavior_rngs[enc.encounter_id]
        if event.displayed:
            action = self.behavior.choose(rng.random())
            acted_at = now + timedelta(minutes=1 + int(4 * rng.random()))
            reason = None
            if action == AlertAction.ACKNOWLEDGED_CONTINUE:
                reason = DEFAULT_ACKNOWLEDGE_REASONS[
                    rng.randrange(len(DEFAULT_ACKNOWLEDGE_REASONS))
                ]
            outcome = AlertOutcome(alert_event_id=event.event_id, action=action,
                                   acted_at=acted_at, acknowledge_reason=reason)
            surviving = apply_action(outcome, order, self.gateway)
            self.event_log.attach_outcome(event.event_id, outcome)
            if surviving.order_id != order.order_id:
                self.push_order_draws(surviving)
            elif action in (AlertAction.ACKNOWLEDGED_CONTINUE, AlertAction.CANCELLED_DIALOG):
                self.extend_order(order, now, renewal)
        else:
            self.extend_order(order, now, renewal)

    def extend_order(self, order: StandingOrder, now: datetime, renewal: bool) -> None:
        """A renewal the alert did not stop keeps the order running."""
        if renewal and order.end_at < now + timedelta(hours=72):
            self.gateway.update_order(replace(order, end_at=now + timedelta(hours=72)))

    # wrap-up -------------------------------------------------------------

    def encounter_records(self) -> list[EncounterRecord]:
        records = []
        for enc in self.cohort.encounters:
            assignment = self.arm_registry.assign(
                enc.encounter_id, self.arm_rng, enc.admitted_at, eligible=not enc.excluded
            )
            records.append(EncounterRecord(
                encounter_id=enc.encounter_id,
                arm=assignment.arm,
                admitted_at=enc.admitted_at,
                discharged_at=enc.discharge_at,
                icu_on_admission=False,
                icu_transfer_times=enc.icu_transfer_times,
                died_in_hospital=enc.died_in_hospital,
                readmitted_within_30d=enc.readmitted_within_30d,
                age=enc.age,
                sex=enc.sex,
                race=enc.race,
                unit=enc.unit,
                patient_id=enc.patient_id,
                eligible=not enc.excluded,
                cbc_result_times=tuple(sorted(self.realized[enc.encounter_id])),
            ))
        return records


def run_pilot(
    config: CohortConfig,
    duration_days: float = 60.0,
    artifact: Optional[ModelArtifact] = None,
    alert_config: Optional[AlertConfig] = None,
    workdir: Optional[Path] = None,
    display_enabled: bool = True,
    tick_interval_h: float = 6.0,
) -> PilotResult:
    """Run the whole pipeline under a simulated clock and return every
    artifact the analytics layer needs. The hospital clock is taken as UTC
    so draw and display-window arithmetic stays legible."""
    if duration_days <= 0:
        raise ConfigError("duration_days must be positive")
    artifact = artifact or train_pilot_artifact(config)
    alert_config = alert_config or AlertConfig(timezone="UTC")
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="labsentry-pilot-")
        workdir = Path(tmp.name)
    workdir.mkdir(parents=True, exist_ok=True)

    cohort = generate_cohort(config)
    run = _PilotRun(cohort, artifact, duration_days, alert_config, workdir,
                    display_enabled, tick_interval_h)
    try:
        run.run()
        records = run.encounter_records()
        predictions = {
            enc: list(run.prediction_store.predictions_for(enc))
            for enc in run.prediction_store.encounters()
        }
    finally:
        if tmp is not None:
            run.prediction_store.close()
            tmp.cleanup()

    return PilotResult(
        config=config,
        cohort=cohort,
        artifact=artifact,
        event_log=run.event_log,
        arm_registry=run.arm_registry,
        encounter_records=records,
        predictions=predictions,
        fixture_store=run.fixture_store,
        ticks=run.ticks,
        draw_times={k: sorted(v) for k, v in run.realized.items()},
        prediction_store=run.prediction_store if tmp is None else None,
    )
