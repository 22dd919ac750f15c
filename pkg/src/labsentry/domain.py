"""Core clinical domain types: lab results, consensus stability thresholds,
and the deterministic stability labeler that defines ground truth for the
rest of the system.

Stability of a consecutive result pair means BOTH of:
  * the delta (next - previous) lies within the component's acceptable
    decrease/increase band, and
  * the next value lies within the component's absolute stop-trend bounds.

All four interval checks are closed (boundary values count as stable).
Comparisons run in decimal arithmetic so that e.g. a delta of exactly the
acceptable increase never flips to unstable through float rounding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal
from enum import Enum
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

CBC_PANEL = "CBC"


class InsufficientHistoryError(LookupError):
    """A component does not have enough results to label or predict."""

    def __init__(self, component: str, needed: int = 2):
        self.component = component
        self.needed = needed
        super().__init__(f"component {component} has fewer than {needed} results")


class ResultStatus(str, Enum):
    FINAL = "final"
    CORRECTED = "corrected"


class StabilityReason(str, Enum):
    DELTA_BELOW = "delta_below"
    DELTA_ABOVE = "delta_above"
    BELOW_MIN = "below_min"
    ABOVE_MAX = "above_max"


@dataclass(frozen=True)
class LabComponent:
    """One lab panel component (e.g. WBC within the CBC panel)."""

    code: str
    display_name: str
    unit: str


@dataclass(frozen=True)
class LabResult:
    component: str
    value: float
    observed_at: datetime
    status: ResultStatus = ResultStatus.FINAL

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise ValueError(f"lab value must be finite and non-negative, got {self.value!r}")
        if self.observed_at.tzinfo is None:
            raise ValueError("observed_at must be timezone-aware")
        object.__setattr__(self, "observed_at", self.observed_at.astimezone(timezone.utc))
        if isinstance(self.status, str) and not isinstance(self.status, ResultStatus):
            object.__setattr__(self, "status", ResultStatus(self.status))


class LabSeries:
    """Time-ordered lab results for one encounter.

    Normalization keeps at most one effective result per (component,
    observed_at): corrected results supersede finals at the same instant,
    and among equal-status duplicates the last one added wins.
    """

    def __init__(self, encounter_id: str, results: Iterable[LabResult] = ()):
        self.encounter_id = encounter_id
        effective: dict[tuple[str, datetime], LabResult] = {}
        for r in results:
            key = (r.component, r.observed_at)
            prior = effective.get(key)
            if prior is not None and prior.status == ResultStatus.CORRECTED and r.status == ResultStatus.FINAL:
                continue
            effective[key] = r
        self.results: list[LabResult] = sorted(
            effective.values(), key=lambda r: (r.observed_at, r.component)
        )

    def __len__(self) -> int:
        return len(self.results)

    def __iter__(self):
        return iter(self.results)

    def for_component(self, code: str) -> list[LabResult]:
        return [r for r in self.results if r.component == code]

    def latest_pair(self, code: str) -> tuple[LabResult, LabResult]:
        """Latest consecutive result pair for one component."""
        history = self.for_component(code)
        if len(history) < 2:
            raise InsufficientHistoryError(code)
        return history[-2], history[-1]

    def last_before(self, code: str, as_of: datetime) -> Optional[LabResult]:
        candidates = [r for r in self.for_component(code) if r.observed_at <= as_of]
        return candidates[-1] if candidates else None

    def first_after(self, code: str, as_of: datetime) -> Optional[LabResult]:
        candidates = [r for r in self.for_component(code) if r.observed_at > as_of]
        return candidates[0] if candidates else None

    def sliced(self, start: Optional[datetime] = None, end: Optional[datetime] = None) -> "LabSeries":
        kept = [
            r
            for r in self.results
            if (start is None or r.observed_at >= start) and (end is None or r.observed_at <= end)
        ]
        return LabSeries(self.encounter_id, kept)

    def draw_times(self) -> list[datetime]:
        """Distinct panel draw timestamps (any component counts the draw once)."""
        return sorted({r.observed_at for r in self.results})


@dataclass(frozen=True)
class StabilityThresholds:
    """Consensus stability bounds for one component.

    ``acceptable_decrease``/``acceptable_increase`` bound the next-minus-
    previous delta; ``stop_min``/``stop_max`` bound the next absolute value.
    ``spread`` keeps the reported across-clinician standard deviations as
    metadata only; the deployed bounds are the consensus means.
    """

    component: str
    ref_low: float
    ref_high: float
    acceptable_decrease: float
    acceptable_increase: float
    stop_min: float
    stop_max: float
    spread: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.acceptable_decrease <= 0 <= self.acceptable_increase:
            raise ValueError(
                f"{self.component}: acceptable_decrease must be <= 0 <= acceptable_increase"
            )
        if not self.stop_min < self.stop_max:
            raise ValueError(f"{self.component}: stop_min must be < stop_max")

    def in_reference_range(self, value: float) -> bool:
        return self.ref_low <= value <= self.ref_high


@dataclass(frozen=True)
class StabilityLabel:
    component: str
    previous_value: float
    next_value: float
    delta: float
    stable: bool
    reasons: tuple[StabilityReason, ...]


@dataclass(frozen=True)
class PanelStability:
    labels: Mapping[str, StabilityLabel]
    panel_stable: bool


def _dec(value: float) -> Decimal:
    return Decimal(str(value))


def label_stability(prev: LabResult, next: LabResult, t: StabilityThresholds) -> StabilityLabel:
    """Label one consecutive result pair against consensus thresholds.

    Pure function; closed intervals on all four bounds. The delta is taken
    between consecutive results regardless of their spacing.
    """
    if not (prev.component == next.component == t.component):
        raise ValueError(
            f"component mismatch: prev={prev.component} next={next.component} thresholds={t.component}"
        )
    if next.observed_at <= prev.observed_at:
        raise ValueError("next result must be observed after prev")

    prev_v, next_v = _dec(prev.value), _dec(next.value)
    delta = next_v - prev_v
    reasons: list[StabilityReason] = []
    if delta < _dec(t.acceptable_decrease):
        reasons.append(StabilityReason.DELTA_BELOW)
    if delta > _dec(t.acceptable_increase):
        reasons.append(StabilityReason.DELTA_ABOVE)
    if next_v < _dec(t.stop_min):
        reasons.append(StabilityReason.BELOW_MIN)
    if next_v > _dec(t.stop_max):
        reasons.append(StabilityReason.ABOVE_MAX)
    return StabilityLabel(
        component=t.component,
        previous_value=prev.value,
        next_value=next.value,
        delta=float(delta),
        stable=not reasons,
        reasons=tuple(reasons),
    )


def label_panel(
    series: LabSeries, panel: Sequence[str], registry: "ThresholdRegistry"
) -> PanelStability:
    """Label the latest consecutive pair of every panel component.

    Panel stability is the conjunction of the per-component labels.
    Raises InsufficientHistoryError naming the first component with fewer
    than two results.
    """
    labels: dict[str, StabilityLabel] = {}
    for code in panel:
        prev, latest = series.latest_pair(code)
        labels[code] = label_stability(prev, latest, registry.thresholds_for(code))
    return PanelStability(labels=labels, panel_stable=all(l.stable for l in labels.values()))


class ThresholdRegistry:
    """Versioned registry of components, their thresholds, and panel rosters."""

    def __init__(
        self,
        components: Mapping[str, LabComponent],
        thresholds: Mapping[str, StabilityThresholds],
        panels: Mapping[str, Sequence[str]],
        version: str = "unversioned",
    ):
        self.components = dict(components)
        self.thresholds = dict(thresholds)
        self.panels = {name: tuple(codes) for name, codes in panels.items()}
        self.version = version
        for code in self.thresholds:
            if code not in self.components:
                raise ValueError(f"thresholds reference unknown component {code}")
        for name, codes in self.panels.items():
            for code in codes:
                if code not in self.components:
                    raise ValueError(f"panel {name} references unknown component {code}")

    def component(self, code: str) -> LabComponent:
        return self.components[code]

    def thresholds_for(self, code: str) -> StabilityThresholds:
        try:
            return self.thresholds[code]
        except KeyError:
            raise KeyError(f"no thresholds registered for component {code}") from None

    def panel(self, name: str = CBC_PANEL) -> tuple[str, ...]:
        return self.panels[name]

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ThresholdRegistry":
        components = {}
        thresholds = {}
        for code, entry in raw["components"].items():
            components[code] = LabComponent(
                code=code,
                display_name=entry.get("display_name", code),
                unit=entry.get("unit", ""),
            )
            thresholds[code] = StabilityThresholds(
                component=code,
                ref_low=float(entry["ref_low"]),
                ref_high=float(entry["ref_high"]),
                acceptable_decrease=float(entry["acceptable_decrease"]),
                acceptable_increase=float(entry["acceptable_increase"]),
                stop_min=float(entry["stop_min"]),
                stop_max=float(entry["stop_max"]),
                spread=dict(entry.get("spread", {})),
            )
        return cls(
            components=components,
            thresholds=thresholds,
            panels={name: tuple(codes) for name, codes in raw.get("panels", {}).items()},
            version=str(raw.get("version", "unversioned")),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ThresholdRegistry":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def default_registry() -> ThresholdRegistry:
    """Registry shipped with the package: consensus means for the CBC panel
    plus the other common inpatient components."""
    ref = importlib_resources.files("labsentry.data").joinpath("default_thresholds.json")
    return ThresholdRegistry.from_dict(json.loads(ref.read_text(encoding="utf-8")))
