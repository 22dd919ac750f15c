"""Append-only prediction log: lookups, persistence, and crash recovery."""

import json
import struct
from datetime import timedelta

import pytest

from conftest import utc
from labsentry.store import (
    LatestPrediction,
    PredictionStore,
    ScheduleTick,
    StabilityPrediction,
    StoreError,
)


def prediction(encounter_id="enc-1", hour=0, p=None, version="logistic-1", minute=0):
    p = p if p is not None else {"WBC": 0.9, "HGB": 0.95, "PLT": 0.92}
    return StabilityPrediction(
        encounter_id=encounter_id,
        computed_at=utc(hour=hour, minute=minute),
        p=p,
        panel_probability=min(p.values()) if p else 0.0,
        model_version=version,
        input_snapshot_hash="a" * 64,
    )


def tick(hour=0, attempted=3, succeeded=3, failed=0, skipped=0, error=""):
    return ScheduleTick(
        tick_at=utc(hour=hour),
        encounters_attempted=attempted,
        succeeded=succeeded,
        failed=failed,
        duration_s=1.25,
        skipped_boundaries=skipped,
        error=error,
    )


@pytest.fixture
def store_path(tmp_path):
    return tmp_path / "predictions.log"


class TestRecordTypes:
    def test_panel_probability_must_match_min(self):
        with pytest.raises(StoreError):
            StabilityPrediction(
                encounter_id="enc-1",
                computed_at=utc(),
                p={"WBC": 0.9, "HGB": 0.8},
                panel_probability=0.9,
                model_version="logistic-1",
                input_snapshot_hash="a" * 64,
            )

    def test_not_predictable_forces_zero_panel(self):
        ok = StabilityPrediction(
            encounter_id="enc-1",
            computed_at=utc(),
            p={"WBC": 0.9},
            panel_probability=0.0,
            model_version="logistic-1",
            input_snapshot_hash="a" * 64,
            not_predictable=("HGB",),
        )
        assert ok.panel_probability == 0.0
        with pytest.raises(StoreError):
            StabilityPrediction(
                encounter_id="enc-1",
                computed_at=utc(),
                p={"WBC": 0.9},
                panel_probability=0.9,
                model_version="logistic-1",
                input_snapshot_hash="a" * 64,
                not_predictable=("HGB",),
            )

    def test_tick_counts_must_reconcile(self):
        with pytest.raises(StoreError):
            ScheduleTick(
                tick_at=utc(),
                encounters_attempted=3,
                succeeded=1,
                failed=1,
                duration_s=0.0,
            )

    def test_round_trip_through_records(self):
        p = prediction()
        assert StabilityPrediction.from_record(p.to_record()) == p
        t = tick(error="census unavailable")
        assert ScheduleTick.from_record(t.to_record()) == t


class TestLookup:
    def test_latest_picks_greatest_computed_at_within_as_of(self, store_path):
        with PredictionStore(store_path) as store:
            store.append(prediction(hour=0))
            store.append(prediction(hour=6, p={"WBC": 0.8, "HGB": 0.95, "PLT": 0.92}))
            found = store.latest("enc-1", utc(hour=7, minute=30))
            assert isinstance(found, LatestPrediction)
            assert found.prediction.computed_at == utc(hour=6)
            assert found.prediction.p["WBC"] == 0.8
            assert found.staleness == timedelta(hours=1, minutes=30)

    def test_as_of_before_first_prediction_is_none(self, store_path):
        with PredictionStore(store_path) as store:
            store.append(prediction(hour=6))
            assert store.latest("enc-1", utc(hour=5)) is None
            assert store.latest("enc-unknown", utc(hour=23)) is None

    def test_same_computed_at_later_append_wins(self, store_path):
        with PredictionStore(store_path) as store:
            store.append(prediction(hour=6, version="logistic-1"))
            store.append(prediction(hour=6, version="logistic-2"))
            found = store.latest("enc-1", utc(hour=6))
            assert found.prediction.model_version == "logistic-2"
            assert found.staleness == timedelta(0)

    def test_computed_at_regression_rejected(self, store_path):
        with PredictionStore(store_path) as store:
            store.append(prediction(hour=6))
            with pytest.raises(StoreError):
                store.append(prediction(hour=5))
            # other encounters are unaffected by enc-1's history
            store.append(prediction(encounter_id="enc-2", hour=5))

    def test_iteration_and_counts(self, store_path):
        with PredictionStore(store_path) as store:
            store.append(prediction(hour=0))
            store.append(prediction(hour=6))
            store.append(prediction(encounter_id="enc-2", hour=3))
            assert store.encounters() == ["enc-1", "enc-2"]
            assert store.prediction_count() == 3
            hours = [p.computed_at.hour for p in store.predictions_for("enc-1")]
            assert hours == [0, 6]


class TestTicks:
    def test_tick_bookkeeping(self, store_path):
        with PredictionStore(store_path) as store:
            assert store.last_tick_at is None
            assert store.anchor is None
            store.record_tick(tick(hour=0))
            store.record_tick(tick(hour=6, skipped=1))
            assert store.anchor == utc(hour=0)
            assert store.last_tick_at == utc(hour=6)
            recorded = store.ticks()
            assert [t.tick_at for t in recorded] == [utc(hour=0), utc(hour=6)]
            assert recorded[1].skipped_boundaries == 1


class TestPersistence:
    def seed(self, store_path):
        with PredictionStore(store_path) as store:
            store.append(prediction(hour=0))
            store.append(prediction(hour=6))
            store.append(prediction(encounter_id="enc-2", hour=3))
            store.record_tick(tick(hour=0))
            store.record_tick(tick(hour=6))

    def assert_intact(self, store):
        assert store.prediction_count() == 3
        assert store.latest("enc-1", utc(hour=9)).prediction.computed_at == utc(hour=6)
        assert store.last_tick_at == utc(hour=6)
        assert store.anchor == utc(hour=0)

    def test_reopen_with_trusted_index(self, store_path):
        self.seed(store_path)
        with PredictionStore(store_path) as store:
            self.assert_intact(store)

    def test_reopen_rebuilds_when_sidecar_missing(self, store_path):
        self.seed(store_path)
        index_path = store_path.parent / (store_path.name + ".idx")
        index_path.unlink()
        with PredictionStore(store_path) as store:
            self.assert_intact(store)
            assert index_path.exists()

    def test_reopen_rebuilds_when_sidecar_stale(self, store_path):
        self.seed(store_path)
        index_path = store_path.parent / (store_path.name + ".idx")
        index = json.loads(index_path.read_text())
        index["byte_length"] -= 10
        index["predictions"] = {}
        index_path.write_text(json.dumps(index))
        with PredictionStore(store_path) as store:
            self.assert_intact(store)

    def test_partial_trailing_record_truncated(self, store_path):
        self.seed(store_path)
        (store_path.parent / (store_path.name + ".idx")).unlink()
        with open(store_path, "ab") as fh:
            fh.write(struct.pack(">I", 500) + b'{"kind": "predic')
        with PredictionStore(store_path) as store:
            self.assert_intact(store)
            store.append(prediction(hour=12))
            assert store.latest("enc-1", utc(hour=13)).prediction.computed_at == utc(hour=12)

    def test_corrupt_interior_record_refuses_to_load(self, store_path):
        self.seed(store_path)
        (store_path.parent / (store_path.name + ".idx")).unlink()
        payload = b"not json at all!"
        with open(store_path, "ab") as fh:
            fh.write(struct.pack(">I", len(payload)) + payload)
            fh.write(struct.pack(">I", 2) + b"{}")
        with pytest.raises(StoreError):
            PredictionStore(store_path)

    def test_non_log_file_rejected(self, tmp_path):
        path = tmp_path / "other.bin"
        path.write_bytes(struct.pack(">I", 2) + b"{}")
        with pytest.raises(StoreError):
            PredictionStore(path)

    def test_append_visible_before_close(self, store_path):
        # the writer flushes per append, so a concurrent reader of the same
        # file sees completed records without waiting for close()
        writer = PredictionStore(store_path)
        writer.append(prediction(hour=0))
        assert writer.latest("enc-1", utc(hour=1)) is not None
        writer.close()
