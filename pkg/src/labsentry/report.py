"""Trial outcome computation and the pilot report.

Outcome windows start the instant an alert triggers: a result stamped exactly
at the trigger is the triggering draw and excluded (open left), a result
exactly at trigger + 52h counts (closed right). Displayed and silently
triggered alerts are measured identically; only gate-passing events carry
outcome windows.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Mapping, Optional, Sequence

from .stats import fisher_exact, mann_whitney_u, poisson_rate_compare
from .trial import AlertEvent, Arm, EncounterRecord

WINDOW_H = 52.0
SHORT_WINDOW_H = 28.0

RACE_ROWS = (
    ("white", "White"),
    ("black", "Black or African American"),
    ("asian", "Asian"),
    ("pacific_islander", "Pacific Islander"),
    ("native_american", "Native American"),
    ("other", "Other"),
    ("unknown", "Unknown"),
)

TEST_NAMES = ("poisson_rate_ratio", "mann_whitney_u", "fisher_exact")


@dataclass(frozen=True)
class OutcomeWindowCounts:
    event_id: str
    encounter_id: str
    arm: Arm
    n_cbc_52h: int
    n_cbc_28h: int
    icu_transfer_52h: bool

    def __post_init__(self):
        if self.n_cbc_52h < 0 or self.n_cbc_28h < 0:
            raise ValueError("window counts must be non-negative")


@dataclass(frozen=True)
class WindowComputation:
    counts: tuple[OutcomeWindowCounts, ...]
    missing_encounters: int


def compute_windows(
    events: Sequence[AlertEvent],
    records_by_encounter: Mapping[str, EncounterRecord],
    window_h: float = WINDOW_H,
    short_window_h: float = SHORT_WINDOW_H,
) -> WindowComputation:
    """Per-event counts of panel draws and ICU transfers after the trigger.

    Events whose encounter has no record are excluded and counted, never
    fabricated.
    """
    counts = []
    missing = 0
    for event in events:
        record = records_by_encounter.get(event.encounter_id)
        if record is None:
            missing += 1
            continue
        t0 = event.triggered_at
        long_end = t0 + timedelta(hours=window_h)
        short_end = t0 + timedelta(hours=short_window_h)
        n_long = sum(1 for ts in record.cbc_result_times if t0 < ts <= long_end)
        n_short = sum(1 for ts in record.cbc_result_times if t0 < ts <= short_end)
        transfer = any(t0 < ts <= long_end for ts in record.icu_transfer_times)
        counts.append(
            OutcomeWindowCounts(
                event_id=event.event_id,
                encounter_id=event.encounter_id,
                arm=event.arm,
                n_cbc_52h=n_long,
                n_cbc_28h=n_short,
                icu_transfer_52h=transfer,
            )
        )
    return WindowComputation(counts=tuple(counts), missing_encounters=missing)


@dataclass(frozen=True)
class OutcomeRow:
    name: str
    label: str
    test_name: str
    estimate_treatment: Optional[float]
    estimate_control: Optional[float]
    effect: Optional[float]
    p_value: Optional[float]
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.test_name not in TEST_NAMES:
            raise ValueError(f"unknown test {self.test_name!r}")
        if self.p_value is not None and not (0.0 <= self.p_value <= 1.0):
            raise ValueError(f"p_value {self.p_value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "label": self.label,
            "test_name": self.test_name,
            "estimate_treatment": self.estimate_treatment,
            "estimate_control": self.estimate_control,
            "effect": self.effect,
            "p_value": self.p_value,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class ArmDemographics:
    n_encounters: int
    n_patients: int
    median_age: Optional[float]
    age_iqr: Optional[tuple[float, float]]
    pct_female: Optional[float]
    race_pct: Mapping[str, float]
    pct_icu_on_admission: Optional[float]

    def to_dict(self) -> dict:
        return {
            "n_encounters": self.n_encounters,
            "n_patients": self.n_patients,
            "median_age": self.median_age,
            "age_iqr": list(self.age_iqr) if self.age_iqr else None,
            "pct_female": self.pct_female,
            "race_pct": dict(self.race_pct),
            "pct_icu_on_admission": self.pct_icu_on_admission,
        }


@dataclass(frozen=True)
class TrialReport:
    demographics: Mapping[Arm, ArmDemographics]
    alerts_displayed: int
    alerts_silent: int
    outcomes: tuple[OutcomeRow, ...]
    events_total: int
    events_missing_encounter: int
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "demographics": {
                "treatment": self.demographics[Arm.TREATMENT].to_dict(),
                "control": self.demographics[Arm.CONTROL].to_dict(),
            },
            "alerts": {
                "displayed": self.alerts_displayed,
                "silently_triggered": self.alerts_silent,
            },
            "outcomes": [row.to_dict() for row in self.outcomes],
            "coverage": {
                "events_total": self.events_total,
                "events_missing_encounter": self.events_missing_encounter,
            },
            "flags": list(self.flags),
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    def outcome(self, name: str) -> OutcomeRow:
        for row in self.outcomes:
            if row.name == name:
                return row
        raise KeyError(name)


def _median_iqr(values: Sequence[float]) -> tuple[Optional[float], Optional[tuple[float, float]]]:
    if not values:
        return None, None
    if len(values) == 1:
        return values[0], (values[0], values[0])
    quartiles = statistics.quantiles(values, n=4, method="inclusive")
    return statistics.median(values), (quartiles[0], quartiles[2])


def _pct(part: int, whole: int) -> Optional[float]:
    return 100.0 * part / whole if whole else None


def _arm_demographics(records: Sequence[EncounterRecord]) -> ArmDemographics:
    n = len(records)
    ages = sorted(r.age for r in records)
    median_age, iqr = _median_iqr(ages)
    patients = {r.patient_id or r.encounter_id for r in records}
    race_pct = {}
    for key, _ in RACE_ROWS:
        race_pct[key] = _pct(sum(1 for r in records if r.race == key), n) or 0.0
    return ArmDemographics(
        n_encounters=n,
        n_patients=len(patients),
        median_age=median_age,
        age_iqr=iqr,
        pct_female=_pct(sum(1 for r in records if r.sex == "female"), n),
        race_pct=race_pct,
        pct_icu_on_admission=_pct(sum(1 for r in records if r.icu_on_admission), n),
    )


def _poisson_row(name: str, label: str, t_counts, c_counts) -> OutcomeRow:
    if not t_counts or not c_counts:
        return OutcomeRow(name, label, "poisson_rate_ratio", None, None, None, None,
                          flags=("insufficient_data",))
    cmp = poisson_rate_compare(t_counts, c_counts)
    return OutcomeRow(
        name=name,
        label=label,
        test_name="poisson_rate_ratio",
        estimate_treatment=cmp.mean_t,
        estimate_control=cmp.mean_c,
        effect=100.0 * cmp.relative_reduction,
        p_value=cmp.p_value,
        flags=cmp.flags,
    )


def _fisher_row(name: str, label: str, hits_t: int, n_t: int, hits_c: int, n_c: int) -> OutcomeRow:
    if n_t == 0 or n_c == 0:
        return OutcomeRow(name, label, "fisher_exact", None, None, None, None,
                          flags=("insufficient_data",))
    result = fisher_exact(hits_t, n_t - hits_t, hits_c, n_c - hits_c)
    est_t = _pct(hits_t, n_t)
    est_c = _pct(hits_c, n_c)
    return OutcomeRow(
        name=name,
        label=label,
        test_name="fisher_exact",
        estimate_treatment=est_t,
        estimate_control=est_c,
        effect=est_t - est_c,
        p_value=result.p_two_sided,
        flags=result.flags,
    )


def _mwu_row(name: str, label: str, xs, ys) -> OutcomeRow:
    if not xs or not ys:
        return OutcomeRow(name, label, "mann_whitney_u", None, None, None, None,
                          flags=("insufficient_data",))
    result = mann_whitney_u(xs, ys)
    mean_t = sum(xs) / len(xs)
    mean_c = sum(ys) / len(ys)
    return OutcomeRow(
        name=name,
        label=label,
        test_name="mann_whitney_u",
        estimate_treatment=mean_t,
        estimate_control=mean_c,
        effect=mean_t - mean_c,
        p_value=result.p_value,
        flags=result.flags + (result.method,),
    )


def build_report(
    events: Sequence[AlertEvent], records: Sequence[EncounterRecord]
) -> TrialReport:
    """Assemble the pilot report: demographics, alert counts, and every
    outcome wired to its test. Ineligible encounters are out of scope for
    the trial and excluded here."""
    eligible = [r for r in records if r.eligible]
    by_arm = {
        Arm.TREATMENT: [r for r in eligible if r.arm == Arm.TREATMENT],
        Arm.CONTROL: [r for r in eligible if r.arm == Arm.CONTROL],
    }
    records_by_encounter = {r.encounter_id: r for r in eligible}

    triggered = [e for e in events if e.gate.show]
    windows = compute_windows(triggered, records_by_encounter)
    t_windows = [w for w in windows.counts if w.arm == Arm.TREATMENT]
    c_windows = [w for w in windows.counts if w.arm == Arm.CONTROL]

    outcomes = [
        _poisson_row(
            "cbc_52h", "Mean number of CBC results within 52 hrs of alert",
            [w.n_cbc_52h for w in t_windows], [w.n_cbc_52h for w in c_windows],
        ),
        _poisson_row(
            "cbc_28h", "Mean number of CBC results within 28 hrs of alert",
            [w.n_cbc_28h for w in t_windows], [w.n_cbc_28h for w in c_windows],
        ),
        _fisher_row(
            "icu_transfer_52h", "Rate of ICU transfer within 52 hrs of alert (%)",
            sum(1 for w in t_windows if w.icu_transfer_52h), len(t_windows),
            sum(1 for w in c_windows if w.icu_transfer_52h), len(c_windows),
        ),
        _mwu_row(
            "los_hours", "Length of stay (hours)",
            [r.los_hours for r in by_arm[Arm.TREATMENT] if r.los_hours is not None],
            [r.los_hours for r in by_arm[Arm.CONTROL] if r.los_hours is not None],
        ),
        _fisher_row(
            "readmission_30d", "30-day readmission rate (%)",
            sum(1 for r in by_arm[Arm.TREATMENT] if r.readmitted_within_30d),
            len(by_arm[Arm.TREATMENT]),
            sum(1 for r in by_arm[Arm.CONTROL] if r.readmitted_within_30d),
            len(by_arm[Arm.CONTROL]),
        ),
        _fisher_row(
            "mortality", "Encounter mortality rate (%)",
            sum(1 for r in by_arm[Arm.TREATMENT] if r.died_in_hospital),
            len(by_arm[Arm.TREATMENT]),
            sum(1 for r in by_arm[Arm.CONTROL] if r.died_in_hospital),
            len(by_arm[Arm.CONTROL]),
        ),
    ]

    flags = []
    if windows.missing_encounters:
        flags.append(f"{windows.missing_encounters} events lacked encounter records")

    return TrialReport(
        demographics={arm: _arm_demographics(rs) for arm, rs in by_arm.items()},
        alerts_displayed=sum(1 for e in events if e.displayed),
        alerts_silent=sum(1 for e in events if e.silently_triggered),
        outcomes=tuple(outcomes),
        events_total=len(events),
        events_missing_encounter=windows.missing_encounters,
        flags=tuple(flags),
    )


# -- text rendering --------------------------------------------------------


def format_demo_pct(x: Optional[float]) -> str:
    """Demographic percentages print as integers, with <1 below one."""
    if x is None:
        return "-"
    if x == 0:
        return "0"
    if x < 1:
        return "<1"
    return f"{x:.0f}"


def format_rate_pct(x: Optional[float]) -> str:
    """Outcome rates: exact zero as 0.0, two significant figures below ten,
    one decimal from ten up."""
    if x is None:
        return "-"
    if x == 0:
        return "0.0"
    if x >= 10:
        return f"{x:.1f}"
    exponent = math.floor(math.log10(abs(x)))
    decimals = max(0, 1 - exponent)
    return f"{x:.{decimals}f}"


def format_p(p: Optional[float]) -> str:
    if p is None:
        return "-"
    if p < 0.01:
        return "< 0.01"
    return f"{p:.2f}"


def _median_cell(demo: ArmDemographics) -> str:
    if demo.median_age is None:
        return "-"
    lo, hi = demo.age_iqr
    return f"{demo.median_age:.0f} [{lo:.0f}-{hi:.0f}]"


def render_text(report: TrialReport) -> str:
    """Fixed-width table mirroring the pilot summary layout."""
    t = report.demographics[Arm.TREATMENT]
    c = report.demographics[Arm.CONTROL]
    rows: list[tuple[str, str, str, str]] = [
        ("Feature", "Treatment", "Control", "P-values"),
        ("Encounters", str(t.n_encounters), str(c.n_encounters), ""),
        ("Unique patients", str(t.n_patients), str(c.n_patients), ""),
        ("Alerts", f"{report.alerts_displayed} (displayed)",
         f"{report.alerts_silent} (triggered)", ""),
        ("Median Age [IQR]", _median_cell(t), _median_cell(c), ""),
        ("% Female", format_demo_pct(t.pct_female), format_demo_pct(c.pct_female), ""),
        ("Race (%)", "", "", ""),
    ]
    for key, label in RACE_ROWS:
        rows.append(
            (f"  {label}", format_demo_pct(t.race_pct.get(key)),
             format_demo_pct(c.race_pct.get(key)), "")
        )
    rows.append(
        ("% ICU on admission (Encounter level)",
         format_rate_pct(t.pct_icu_on_admission), format_rate_pct(c.pct_icu_on_admission), "")
    )
    for row in report.outcomes:
        if row.name in ("cbc_52h", "cbc_28h"):
            fmt = lambda v: "-" if v is None else f"{v:.2f}"
        elif row.name == "los_hours":
            fmt = lambda v: "-" if v is None else f"{v:.1f}"
        else:
            fmt = format_rate_pct
        rows.append(
            (row.label, fmt(row.estimate_treatment), fmt(row.estimate_control),
             format_p(row.p_value))
        )
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = []
    for idx, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if idx == 0:
            lines.append("-" * (sum(widths) + 6))
    return "\n".join(lines) + "\n"
