"""Wall and simulated clocks behind one interface.

Everything time-driven (scheduler, simulation, snooze bookkeeping) takes a
Clock so the full pipeline runs under a simulated clock in tests and in the
pilot simulation, and under the wall clock in `serve`.
"""

from __future__ import annotations

import time as _time
from datetime import datetime, timedelta, timezone
from typing import Protocol, runtime_checkable


@runtime_checkable
class Clock(Protocol):
    def now(self) -> datetime: ...

    def sleep_until(self, when: datetime) -> None: ...


class WallClock:
    """Real time, UTC."""

    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def sleep_until(self, when: datetime) -> None:
        remaining = (when - self.now()).total_seconds()
        if remaining > 0:
            _time.sleep(remaining)


class SimClock:
    """Deterministic clock that only moves when told to.

    sleep_until never moves time backwards; advance is explicit so simulated
    work can account for its own duration.
    """

    def __init__(self, start: datetime):
        if start.tzinfo is None:
            raise ValueError("SimClock start must be timezone-aware")
        self._now = start.astimezone(timezone.utc)

    def now(self) -> datetime:
        return self._now

    def sleep_until(self, when: datetime) -> None:
        when = when.astimezone(timezone.utc)
        if when > self._now:
            self._now = when

    def advance(self, seconds: float) -> datetime:
        self._now += timedelta(seconds=seconds)
        return self._now
