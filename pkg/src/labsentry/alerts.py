"""Interruptive alert gating at order entry, the clinician-facing payload,
and the order mutations each clinician action implies.

Evaluation is stateless over immutable inputs; snooze state (the last time
this encounter's gate passed) is supplied by the caller so treatment and
control arms share identical gating.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, time, timedelta
from enum import Enum
from typing import Mapping, Optional, Sequence
from zoneinfo import ZoneInfo

from .domain import ThresholdRegistry, default_registry
from .gateway import (
    GatewayClient,
    OrderFrequency,
    OrderStatus,
    PatientSnapshot,
    StandingOrder,
    format_ts,
)
from .store import LatestPrediction, StabilityPrediction

logger = logging.getLogger(__name__)


class ConflictError(Exception):
    """The targeted order is no longer in a state the action applies to."""


class GateReason(str, Enum):
    NOT_DAILY_FREQUENCY = "not_daily_frequency"
    OUTSIDE_DISPLAY_HOURS = "outside_display_hours"
    NO_PREDICTION = "no_prediction"
    STALE_PREDICTION = "stale_prediction"
    PROB_AT_OR_BELOW_THRESHOLD = "prob_at_or_below_threshold"
    RECENT_PROCEDURE = "recent_procedure"
    RECENT_TRANSFUSION = "recent_transfusion"
    ON_IV_HEPARIN = "on_iv_heparin"
    EXCLUDED_POPULATION = "excluded_population"
    RECENTLY_ALERTED = "recently_alerted"


class AlertAction(str, Enum):
    ACKNOWLEDGED_CONTINUE = "acknowledged_continue"
    DISCONTINUED = "discontinued"
    REDUCED_EVERY_OTHER_DAY = "reduced_every_other_day"
    REDUCED_WEEKLY = "reduced_weekly"
    CANCELLED_DIALOG = "cancelled_dialog"


REDUCED_FREQUENCY = {
    AlertAction.REDUCED_EVERY_OTHER_DAY: OrderFrequency.EVERY_OTHER_DAY,
    AlertAction.REDUCED_WEEKLY: OrderFrequency.WEEKLY,
}

PAYLOAD_OPTIONS = ("acknowledge_continue", "discontinue", "every_other_day", "weekly")

DEFAULT_ACKNOWLEDGE_REASONS = (
    "Medical Necessity (TPN, diuresis)",
    "More review needed",
    "I am not the primary provider",
    "Other - Comment required",
)

IV_ROUTES = frozenset({"iv", "intravenous"})


@dataclass(frozen=True)
class AlertConfig:
    probability_threshold: float = 0.90
    display_start: time = time(7, 0)
    display_end: time = time(18, 0)        # exclusive
    timezone: str = "America/Los_Angeles"
    max_staleness_h: float = 8.0
    event_lookback_h: float = 48.0
    heparin_codes: frozenset[str] = frozenset({"heparin-iv"})
    excluded_units: frozenset[str] = frozenset({"BMT", "HEME"})
    snooze_h: float = 24.0
    acknowledge_reasons: tuple[str, ...] = DEFAULT_ACKNOWLEDGE_REASONS
    info_link: str = "https://lab-stewardship.example.org/cbc-stability"

    @property
    def tzinfo(self) -> ZoneInfo:
        return ZoneInfo(self.timezone)


@dataclass(frozen=True)
class OrderAttempt:
    encounter_id: str
    order: StandingOrder
    attempted_at: datetime
    clinician_id: str = ""

    def __post_init__(self):
        if self.attempted_at.tzinfo is None:
            raise ValueError("attempted_at must carry zone info")


@dataclass(frozen=True)
class GateDecision:
    show: bool
    reasons: tuple[GateReason, ...]
    prediction_used: Optional[StabilityPrediction]

    def __post_init__(self):
        if self.show != (not self.reasons):
            raise ValueError("show must equal (reasons empty)")

    def to_dict(self) -> dict:
        return {
            "show": self.show,
            "reasons": [r.value for r in self.reasons],
            "prediction_used": (
                self.prediction_used.to_record() if self.prediction_used else None
            ),
        }


@dataclass(frozen=True)
class ResultCell:
    value: float
    observed_at: datetime
    abnormal: bool

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "observed_at": format_ts(self.observed_at),
            "abnormal": self.abnormal,
        }


@dataclass(frozen=True)
class AlertPayload:
    headline: str
    panel_probability: float
    components: Mapping[str, tuple[ResultCell, ...]]
    info_link: str
    options: tuple[str, ...] = PAYLOAD_OPTIONS
    acknowledge_reasons: tuple[str, ...] = DEFAULT_ACKNOWLEDGE_REASONS

    def to_dict(self) -> dict:
        return {
            "headline": self.headline,
            "panel_probability": self.panel_probability,
            "components": {
                code: [cell.to_dict() for cell in cells]
                for code, cells in self.components.items()
            },
            "info_link": self.info_link,
            "options": list(self.options),
            "acknowledge_reasons": list(self.acknowledge_reasons),
        }


@dataclass(frozen=True)
class AlertOutcome:
    alert_event_id: str
    action: AlertAction
    acted_at: datetime
    acknowledge_reason: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.action, str) and not isinstance(self.action, AlertAction):
            object.__setattr__(self, "action", AlertAction(self.action))
        if self.action == AlertAction.ACKNOWLEDGED_CONTINUE and not self.acknowledge_reason:
            raise ValueError("acknowledged_continue requires an acknowledge_reason")


def evaluate_gate(
    attempt: OrderAttempt,
    snapshot: PatientSnapshot,
    latest: Optional[LatestPrediction],
    config: AlertConfig,
    last_trigger_at: Optional[datetime] = None,
) -> GateDecision:
    """Decide whether this order attempt interrupts, with every failed
    clause enumerated. All abnormal states are non-display reasons, never
    errors."""
    reasons: list[GateReason] = []

    if attempt.order.frequency != OrderFrequency.DAILY_OR_HIGHER:
        reasons.append(GateReason.NOT_DAILY_FREQUENCY)

    local = attempt.attempted_at.astimezone(config.tzinfo).time()
    if not (config.display_start <= local < config.display_end):
        reasons.append(GateReason.OUTSIDE_DISPLAY_HOURS)

    if latest is None:
        reasons.append(GateReason.NO_PREDICTION)
    else:
        if latest.staleness > timedelta(hours=config.max_staleness_h):
            reasons.append(GateReason.STALE_PREDICTION)
        if latest.prediction.panel_probability <= config.probability_threshold:
            reasons.append(GateReason.PROB_AT_OR_BELOW_THRESHOLD)

    window_start = attempt.attempted_at - timedelta(hours=config.event_lookback_h)
    if any(window_start <= p.performed_at <= attempt.attempted_at for p in snapshot.procedures):
        reasons.append(GateReason.RECENT_PROCEDURE)
    if any(window_start <= t <= attempt.attempted_at for t in snapshot.transfusions):
        reasons.append(GateReason.RECENT_TRANSFUSION)

    if any(
        m.active and m.therapeutic and m.route.lower() in IV_ROUTES
        and m.code in config.heparin_codes
        for m in snapshot.medications
    ):
        reasons.append(GateReason.ON_IV_HEPARIN)

    if snapshot.unit in config.excluded_units:
        reasons.append(GateReason.EXCLUDED_POPULATION)

    if (
        last_trigger_at is not None
        and attempt.attempted_at - last_trigger_at < timedelta(hours=config.snooze_h)
    ):
        reasons.append(GateReason.RECENTLY_ALERTED)

    return GateDecision(
        show=not reasons,
        reasons=tuple(reasons),
        prediction_used=latest.prediction if latest else None,
    )


def build_payload(
    snapshot: PatientSnapshot,
    prediction: StabilityPrediction,
    config: AlertConfig,
    registry: Optional[ThresholdRegistry] = None,
) -> AlertPayload:
    """Clinician-facing alert content: probability headline, the last three
    results per component newest first with abnormal values flagged against
    the reference range, and the four interaction options."""
    registry = registry or default_registry()
    components: dict[str, tuple[ResultCell, ...]] = {}
    for code in registry.panel():
        thresholds = registry.thresholds_for(code)
        recent = snapshot.labs.for_component(code)[-3:]
        components[code] = tuple(
            ResultCell(
                value=r.value,
                observed_at=r.observed_at,
                abnormal=not thresholds.in_reference_range(r.value),
            )
            for r in reversed(recent)
        )
    return AlertPayload(
        headline=f">{config.probability_threshold:.0%} stability",
        panel_probability=prediction.panel_probability,
        components=components,
        info_link=config.info_link,
        options=PAYLOAD_OPTIONS,
        acknowledge_reasons=config.acknowledge_reasons,
    )


def apply_action(
    outcome: AlertOutcome, order: StandingOrder, gateway: GatewayClient
) -> StandingOrder:
    """Apply a clinician's alert response to the standing order.

    Returns the order that remains authoritative afterwards: the replacement
    for a frequency reduction, the revoked original for a discontinue, and
    the untouched original otherwise.
    """
    if order.status != OrderStatus.ACTIVE:
        raise ConflictError(f"order {order.order_id} is not active")

    if outcome.action in (AlertAction.ACKNOWLEDGED_CONTINUE, AlertAction.CANCELLED_DIALOG):
        logger.info(
            "alert %s: %s on order %s (reason: %s)",
            outcome.alert_event_id, outcome.action.value, order.order_id,
            outcome.acknowledge_reason or "-",
        )
        return order

    if outcome.action == AlertAction.DISCONTINUED:
        revoked = replace(order, status=OrderStatus.DISCONTINUED)
        gateway.update_order(revoked)
        logger.info("alert %s: discontinued order %s", outcome.alert_event_id, order.order_id)
        return revoked

    new_frequency = REDUCED_FREQUENCY[outcome.action]
    acted_at = outcome.acted_at
    if acted_at >= order.end_at:
        raise ConflictError(f"order {order.order_id} window already over at {acted_at}")
    replacement = StandingOrder(
        order_id=f"{order.order_id}-reduced",
        encounter_id=order.encounter_id,
        panel=order.panel,
        frequency=new_frequency,
        start_at=acted_at,
        end_at=order.end_at,
        status=OrderStatus.ACTIVE,
    )
    gateway.create_order(replacement)
    gateway.update_order(replace(order, status=OrderStatus.MODIFIED), replaced_by=replacement.order_id)
    logger.info(
        "alert %s: order %s reduced to %s as %s",
        outcome.alert_event_id, order.order_id, new_frequency.value, replacement.order_id,
    )
    return replacement
