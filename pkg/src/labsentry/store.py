"""Flowsheet-style prediction storage: an embedded, file-backed, append-only
log with an in-memory index.

Record framing is a 4-byte big-endian length followed by that many bytes of
UTF-8 JSON. An index sidecar (store path + ".idx") caches offsets; it is
trusted only when its recorded byte length matches the log file exactly,
otherwise the log is rescanned. A truncated trailing record (crash during a
write) is cut off and logged; a malformed record inside the log is corruption
and refuses to load.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Optional

from .gateway import format_ts, parse_ts

logger = logging.getLogger(__name__)

LOG_SCHEMA = "prediction-log/1"
INDEX_SCHEMA = "prediction-log-index/1"

# How many appended predictions may accumulate before the sidecar is refreshed.
INDEX_FLUSH_EVERY = 512


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class StabilityPrediction:
    """One stored model output for one encounter at one moment."""

    encounter_id: str
    computed_at: datetime
    p: Mapping[str, float]
    panel_probability: float
    model_version: str
    input_snapshot_hash: str
    not_predictable: tuple[str, ...] = ()

    def __post_init__(self):
        if self.not_predictable:
            expected = 0.0
        elif self.p:
            expected = min(self.p.values())
        else:
            expected = 0.0
        if abs(self.panel_probability - expected) > 1e-9:
            raise StoreError(
                f"panel_probability {self.panel_probability} inconsistent with "
                f"component probabilities (expected {expected})"
            )

    def to_record(self) -> dict:
        return {
            "kind": "prediction",
            "encounter_id": self.encounter_id,
            "computed_at": format_ts(self.computed_at),
            "p": dict(sorted(self.p.items())),
            "panel_probability": self.panel_probability,
            "model_version": self.model_version,
            "input_snapshot_hash": self.input_snapshot_hash,
            "not_predictable": list(self.not_predictable),
        }

    @classmethod
    def from_record(cls, record: dict) -> "StabilityPrediction":
        return cls(
            encounter_id=record["encounter_id"],
            computed_at=parse_ts(record["computed_at"]),
            p=dict(record["p"]),
            panel_probability=record["panel_probability"],
            model_version=record["model_version"],
            input_snapshot_hash=record["input_snapshot_hash"],
            not_predictable=tuple(record.get("not_predictable", ())),
        )


@dataclass(frozen=True)
class ScheduleTick:
    """Outcome of one scheduler pass over the admitted census."""

    tick_at: datetime
    encounters_attempted: int
    succeeded: int
    failed: int
    duration_s: float
    skipped_boundaries: int = 0
    error: str = ""

    def __post_init__(self):
        if self.encounters_attempted != self.succeeded + self.failed:
            raise StoreError(
                f"attempted {self.encounters_attempted} != "
                f"succeeded {self.succeeded} + failed {self.failed}"
            )

    def to_record(self) -> dict:
        return {
            "kind": "tick",
            "tick_at": format_ts(self.tick_at),
            "encounters_attempted": self.encounters_attempted,
            "succeeded": self.succeeded,
            "failed": self.failed,
            "duration_s": self.duration_s,
            "skipped_boundaries": self.skipped_boundaries,
            "error": self.error,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ScheduleTick":
        return cls(
            tick_at=parse_ts(record["tick_at"]),
            encounters_attempted=record["encounters_attempted"],
            succeeded=record["succeeded"],
            failed=record["failed"],
            duration_s=record["duration_s"],
            skipped_boundaries=record.get("skipped_boundaries", 0),
            error=record.get("error", ""),
        )


class LatestPrediction(NamedTuple):
    prediction: StabilityPrediction
    staleness: timedelta


def _encode(record: dict) -> bytes:
    payload = json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(payload)) + payload


class PredictionStore:
    """Append-only prediction and tick log.

    Single writer, concurrent readers; readers see every record whose append
    completed. Existing records are never rewritten.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.index_path = Path(str(path) + ".idx")
        self._lock = threading.Lock()
        # encounter -> [(computed_at, offset)] in append order (computed_at
        # is non-decreasing per encounter, so the list is sorted as built)
        self._predictions: dict[str, list[tuple[datetime, int]]] = {}
        self._ticks: list[tuple[datetime, int]] = []
        self._appends_since_index = 0
        if self.path.exists():
            self._load()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "wb") as fh:
                fh.write(_encode({"kind": "header", "schema": LOG_SCHEMA}))
        self._length = self.path.stat().st_size
        self._fh = open(self.path, "ab")
        self._write_index()

    # -- loading ---------------------------------------------------------

    def _load(self) -> None:
        if self._load_index():
            return
        self._scan()

    def _load_index(self) -> bool:
        if not self.index_path.exists():
            return False
        try:
            with open(self.index_path, "r", encoding="utf-8") as fh:
                index = json.load(fh)
        except (OSError, json.JSONDecodeError):
            return False
        if index.get("schema") != INDEX_SCHEMA:
            return False
        if index.get("byte_length") != self.path.stat().st_size:
            logger.warning("index sidecar %s stale; rescanning log", self.index_path)
            return False
        self._predictions = {
            enc: [(parse_ts(ts), offset) for ts, offset in entries]
            for enc, entries in index["predictions"].items()
        }
        self._ticks = [(parse_ts(ts), offset) for ts, offset in index["ticks"]]
        return True

    def _scan(self) -> None:
        self._predictions = {}
        self._ticks = []
        with open(self.path, "rb") as fh:
            header = self._read_next(fh, 0)
            if header is None or header[0].get("schema") != LOG_SCHEMA:
                raise StoreError(f"{self.path} is not a prediction log")
            offset = header[1]
            while True:
                item = self._read_next(fh, offset)
                if item is None:
                    break
                record, next_offset = item
                kind = record.get("kind")
                if kind == "prediction":
                    parsed = StabilityPrediction.from_record(record)
                    self._predictions.setdefault(parsed.encounter_id, []).append(
                        (parsed.computed_at, offset)
                    )
                elif kind == "tick":
                    self._ticks.append((parse_ts(record["tick_at"]), offset))
                else:
                    raise StoreError(f"unknown record kind {kind!r} at offset {offset}")
                offset = next_offset
        size = self.path.stat().st_size
        if offset < size:
            logger.warning(
                "truncating %s: partial record after offset %d (%d bytes lost)",
                self.path, offset, size - offset,
            )
            with open(self.path, "r+b") as fh:
                fh.truncate(offset)

    @staticmethod
    def _read_next(fh, offset: int) -> Optional[tuple[dict, int]]:
        """Record at offset plus the next offset; None when the tail is short."""
        fh.seek(offset)
        prefix = fh.read(4)
        if len(prefix) < 4:
            return None
        (n,) = struct.unpack(">I", prefix)
        payload = fh.read(n)
        if len(payload) < n:
            return None
        try:
            record = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise StoreError(f"corrupt record at offset {offset}: {exc}") from exc
        return record, offset + 4 + n

    # -- writing ---------------------------------------------------------

    def _append_record(self, record: dict) -> int:
        data = _encode(record)
        offset = self._length
        self._fh.write(data)
        self._fh.flush()
        self._length += len(data)
        return offset

    def append(self, prediction: StabilityPrediction) -> None:
        with self._lock:
            history = self._predictions.setdefault(prediction.encounter_id, [])
            if history and prediction.computed_at < history[-1][0]:
                raise StoreError(
                    f"computed_at regression for {prediction.encounter_id}: "
                    f"{prediction.computed_at.isoformat()} < {history[-1][0].isoformat()}"
                )
            offset = self._append_record(prediction.to_record())
            history.append((prediction.computed_at, offset))
            self._appends_since_index += 1
            if self._appends_since_index >= INDEX_FLUSH_EVERY:
                self._write_index()

    def record_tick(self, tick: ScheduleTick) -> None:
        with self._lock:
            offset = self._append_record(tick.to_record())
            self._ticks.append((tick.tick_at, offset))
            self._write_index()

    def _write_index(self) -> None:
        index = {
            "schema": INDEX_SCHEMA,
            "byte_length": self._length,
            "predictions": {
                enc: [[format_ts(ts), offset] for ts, offset in entries]
                for enc, entries in self._predictions.items()
            },
            "ticks": [[format_ts(ts), offset] for ts, offset in self._ticks],
        }
        tmp = Path(str(self.index_path) + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(index, fh)
        os.replace(tmp, self.index_path)
        self._appends_since_index = 0

    # -- reading ---------------------------------------------------------

    def _record_at(self, offset: int) -> dict:
        with open(self.path, "rb") as fh:
            item = self._read_next(fh, offset)
        if item is None:
            raise StoreError(f"dangling index offset {offset}")
        return item[0]

    def latest(self, encounter_id: str, as_of: datetime) -> Optional[LatestPrediction]:
        """Newest prediction with computed_at <= as_of; appended-later wins ties."""
        with self._lock:
            history = self._predictions.get(encounter_id, [])
            # linear from the right: lookups sit near the tail in practice
            offset = None
            computed_at = None
            for ts, off in reversed(history):
                if ts <= as_of:
                    offset, computed_at = off, ts
                    break
        if offset is None:
            return None
        prediction = StabilityPrediction.from_record(self._record_at(offset))
        return LatestPrediction(prediction, as_of - computed_at)

    def predictions_for(self, encounter_id: str) -> Iterator[StabilityPrediction]:
        with self._lock:
            offsets = [off for _, off in self._predictions.get(encounter_id, [])]
        for offset in offsets:
            yield StabilityPrediction.from_record(self._record_at(offset))

    def encounters(self) -> list[str]:
        with self._lock:
            return sorted(self._predictions)

    def prediction_count(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._predictions.values())

    def ticks(self) -> list[ScheduleTick]:
        with self._lock:
            offsets = [off for _, off in self._ticks]
        return [ScheduleTick.from_record(self._record_at(off)) for off in offsets]

    @property
    def last_tick_at(self) -> Optional[datetime]:
        with self._lock:
            return self._ticks[-1][0] if self._ticks else None

    @property
    def anchor(self) -> Optional[datetime]:
        """First-ever tick time; the boundary grid hangs off this."""
        with self._lock:
            return self._ticks[0][0] if self._ticks else None

    def close(self) -> None:
        with self._lock:
            if self._fh.closed:
                return
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()
            self._write_index()

    def __enter__(self) -> "PredictionStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
