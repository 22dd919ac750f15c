"""Batch prediction refresh: a job that sweeps the admitted census once, and
a loop that runs that job on a fixed-interval boundary grid.

Boundaries are anchor + k * interval where the anchor is the first tick ever
recorded in the store. A tick that overruns its interval delays, never
overlaps, the next one: missed boundaries are skipped and the count is
attributed to the tick that finally runs. Restart resumes on the same grid
using the persisted last-tick time.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional, Sequence

from .clock import Clock, WallClock
from .domain import default_registry
from .features import FeatureConfig, extract_features
from .gateway import GatewayClient, TransportError
from .predictor import ModelArtifact, predict
from .store import PredictionStore, ScheduleTick, StabilityPrediction

logger = logging.getLogger(__name__)

DEFAULT_INTERVAL = timedelta(hours=6)


@dataclass
class PredictionJob:
    """Everything one census sweep needs, bound together."""

    gateway: GatewayClient
    artifact: ModelArtifact
    store: PredictionStore
    components: Sequence[str] = field(default_factory=lambda: default_registry().panel())
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    clock: Clock = field(default_factory=WallClock)

    def refresh_encounter(self, encounter_id: str, as_of: datetime) -> StabilityPrediction:
        """Fetch, featurize, predict, and append for one encounter."""
        snapshot = self.gateway.fetch_snapshot(encounter_id, as_of)
        features = extract_features(snapshot, as_of, self.components, self.feature_config)
        result = predict(self.artifact, features, self.components)
        prediction = StabilityPrediction(
            encounter_id=encounter_id,
            computed_at=as_of,
            p=result.p,
            panel_probability=result.panel_probability,
            model_version=self.artifact.model_version,
            input_snapshot_hash=snapshot.content_hash(),
            not_predictable=result.not_predictable,
        )
        self.store.append(prediction)
        return prediction

    def run_tick(self, as_of: datetime, skipped_boundaries: int = 0) -> ScheduleTick:
        """One sweep over every admitted encounter; failures never abort it.

        A dead gateway still produces a persisted tick: the census is unknown,
        so attempted stays 0 and the error is recorded on the tick.
        """
        started = self.clock.now()
        error = ""
        try:
            encounter_ids = self.gateway.list_admitted_encounters(as_of)
        except TransportError as exc:
            logger.error("census fetch failed at %s: %s", as_of.isoformat(), exc)
            encounter_ids = []
            error = f"census unavailable: {exc}"
        succeeded = 0
        failed = 0
        for encounter_id in encounter_ids:
            try:
                self.refresh_encounter(encounter_id, as_of)
                succeeded += 1
            except Exception as exc:
                failed += 1
                logger.warning("prediction for %s failed: %s", encounter_id, exc)
        tick = ScheduleTick(
            tick_at=as_of,
            encounters_attempted=succeeded + failed,
            succeeded=succeeded,
            failed=failed,
            duration_s=(self.clock.now() - started).total_seconds(),
            skipped_boundaries=skipped_boundaries,
            error=error,
        )
        self.store.record_tick(tick)
        return tick


def next_boundary(
    anchor: datetime, last_tick: Optional[datetime], now: datetime, interval: timedelta
) -> tuple[datetime, int]:
    """First grid point after the last tick that has not already passed.

    Returns the boundary plus how many grid points in between were skipped.
    """
    if last_tick is None:
        if now <= anchor:
            return anchor, 0
        k = math.ceil((now - anchor) / interval)
        return anchor + k * interval, k
    candidate = last_tick + interval
    skipped = 0
    while candidate < now:
        candidate += interval
        skipped += 1
    return candidate, skipped


def scheduler_loop(
    job: PredictionJob,
    clock: Clock,
    interval: timedelta = DEFAULT_INTERVAL,
    until: Optional[datetime] = None,
    max_ticks: Optional[int] = None,
    stop: Optional[threading.Event] = None,
) -> list[ScheduleTick]:
    """Run ticks on the boundary grid until a bound is reached.

    `until` is inclusive: a 24h horizon from a fresh store yields five ticks
    (t0 plus four 6h boundaries). Exactly one of the bounds must eventually
    fire or the loop runs forever (the serve path passes a stop event).
    """
    ticks: list[ScheduleTick] = []
    while True:
        if stop is not None and stop.is_set():
            break
        if max_ticks is not None and len(ticks) >= max_ticks:
            break
        now = clock.now()
        anchor = job.store.anchor or now
        boundary, skipped = next_boundary(anchor, job.store.last_tick_at, now, interval)
        if until is not None and boundary > until:
            break
        clock.sleep_until(boundary)
        ticks.append(job.run_tick(boundary, skipped_boundaries=skipped))
    return ticks
