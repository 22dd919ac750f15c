"""Census sweeps and the 6-hour boundary grid."""

from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_artifact, utc
from labsentry.clock import SimClock
from labsentry.fixture import FixtureStore
from labsentry.gateway import DirectGateway, TransportError, format_ts
from labsentry.scheduler import PredictionJob, next_boundary, scheduler_loop
from labsentry.store import PredictionStore

SIX_HOURS = timedelta(hours=6)


def patient(pid):
    return {"resourceType": "Patient", "id": pid, "birthDate": "1955-01-06",
            "gender": "female", "extension": [{"url": "race", "valueString": "white"}]}


def encounter(eid, pid, start):
    return {
        "resourceType": "Encounter",
        "id": eid,
        "subject": {"reference": f"Patient/{pid}"},
        "period": {"start": format_ts(start)},
        "location": [{"location": {"display": "MED-1"}}],
    }


def cbc(eid, code, value, at):
    return {
        "resourceType": "Observation",
        "status": "final",
        "category": [{"text": "laboratory"}],
        "code": {"coding": [{"code": code}]},
        "valueQuantity": {"value": value},
        "effectiveDateTime": format_ts(at),
        "encounter": {"reference": f"Encounter/{eid}"},
    }


def admitted_fixture(n=3, with_labs=True, start=None):
    start = start or utc(hour=0)
    resources = []
    for i in range(1, n + 1):
        eid, pid = f"enc-{i}", f"pat-{i}"
        resources += [patient(pid), encounter(eid, pid, start)]
        if with_labs:
            for h, (w, g, p) in ((1, (8.0, 12.0, 250.0)), (3, (8.4, 11.8, 240.0))):
                resources += [
                    cbc(eid, "6690-2", w, start + timedelta(hours=h)),
                    cbc(eid, "718-7", g, start + timedelta(hours=h)),
                    cbc(eid, "777-3", p, start + timedelta(hours=h)),
                ]
    return FixtureStore(resources)


def make_job(fixture, store_path, clock=None):
    return PredictionJob(
        gateway=DirectGateway(fixture),
        artifact=make_artifact(),
        store=PredictionStore(store_path),
        clock=clock or SimClock(utc(hour=0)),
    )


class BrokenGateway:
    def list_admitted_encounters(self, as_of):
        raise TransportError("connection refused")

    def fetch_snapshot(self, encounter_id, as_of):
        raise TransportError("connection refused")


class TestRunTick:
    def test_happy_path_three_encounters(self, tmp_path):
        job = make_job(admitted_fixture(3), tmp_path / "p.log")
        tick = job.run_tick(utc(hour=6))
        assert tick.encounters_attempted == 3
        assert tick.succeeded == 3
        assert tick.failed == 0
        assert tick.error == ""
        for i in (1, 2, 3):
            found = job.store.latest(f"enc-{i}", utc(hour=6))
            assert found is not None
            # two prior draws per component and zero-weight model: p = 0.5
            assert found.prediction.panel_probability == 0.5
        assert job.store.ticks()[-1].tick_at == utc(hour=6)

    def test_one_malformed_encounter_is_isolated(self, tmp_path):
        fixture = admitted_fixture(2)
        # admitted encounter whose bundle lacks its Patient resource
        fixture.create(encounter("enc-bad", "pat-missing", utc(hour=0)))
        job = make_job(fixture, tmp_path / "p.log")
        tick = job.run_tick(utc(hour=6))
        assert tick.encounters_attempted == 3
        assert (tick.succeeded, tick.failed) == (2, 1)
        assert job.store.latest("enc-1", utc(hour=6)) is not None
        assert job.store.latest("enc-bad", utc(hour=6)) is None

    def test_zero_admitted_still_records_tick(self, tmp_path):
        job = make_job(FixtureStore(), tmp_path / "p.log")
        tick = job.run_tick(utc(hour=6))
        assert tick.encounters_attempted == 0
        assert tick.succeeded == 0
        assert job.store.ticks() == [tick]

    def test_gateway_down_records_error_tick(self, tmp_path):
        job = PredictionJob(
            gateway=BrokenGateway(),
            artifact=make_artifact(),
            store=PredictionStore(tmp_path / "p.log"),
            clock=SimClock(utc(hour=0)),
        )
        tick = job.run_tick(utc(hour=6))
        assert tick.encounters_attempted == 0
        assert "census unavailable" in tick.error
        assert job.store.ticks() == [tick]

    def test_predictions_carry_snapshot_hash_and_version(self, tmp_path):
        job = make_job(admitted_fixture(1), tmp_path / "p.log")
        job.run_tick(utc(hour=6))
        stored = job.store.latest("enc-1", utc(hour=6)).prediction
        assert stored.model_version == "logistic-1"
        snap = job.gateway.fetch_snapshot("enc-1", utc(hour=6))
        assert stored.input_snapshot_hash == snap.content_hash()


class TestNextBoundary:
    def test_fresh_store_ticks_immediately(self):
        t0 = utc(hour=0)
        assert next_boundary(t0, None, t0, SIX_HOURS) == (t0, 0)

    def test_following_boundary_after_fast_tick(self):
        t0 = utc(hour=0)
        assert next_boundary(t0, t0, t0, SIX_HOURS) == (t0 + SIX_HOURS, 0)

    def test_overrun_skips_missed_boundary(self):
        t0 = utc(hour=0)
        boundary, skipped = next_boundary(t0, t0, t0 + timedelta(hours=7), SIX_HOURS)
        assert boundary == t0 + timedelta(hours=12)
        assert skipped == 1

    def test_restart_resumes_grid(self):
        t0 = utc(hour=0)
        boundary, skipped = next_boundary(
            t0, t0 + SIX_HOURS, t0 + timedelta(hours=8), SIX_HOURS
        )
        assert boundary == t0 + timedelta(hours=12)
        assert skipped == 0

    def test_late_restart_counts_missed_grid_points(self):
        t0 = utc(hour=0)
        boundary, skipped = next_boundary(
            t0, t0 + SIX_HOURS, t0 + timedelta(hours=13), SIX_HOURS
        )
        assert boundary == t0 + timedelta(hours=18)
        assert skipped == 1


class TestSchedulerLoop:
    def test_simulated_24h_run_yields_five_periodic_ticks(self, tmp_path):
        clock = SimClock(utc(hour=0))
        job = make_job(admitted_fixture(2), tmp_path / "p.log", clock=clock)
        ticks = scheduler_loop(job, clock, until=utc(hour=0) + timedelta(hours=24))
        assert [t.tick_at for t in ticks] == [
            utc(hour=0) + k * SIX_HOURS for k in range(5)
        ]
        assert all(t.skipped_boundaries == 0 for t in ticks)

    def test_long_tick_delays_and_counts_skip(self, tmp_path):
        clock = SimClock(utc(hour=0))
        job = make_job(admitted_fixture(1), tmp_path / "p.log", clock=clock)

        original = job.run_tick

        def slow_run_tick(as_of, skipped_boundaries=0):
            tick = original(as_of, skipped_boundaries=skipped_boundaries)
            if as_of == utc(hour=0):
                clock.advance(7 * 3600)
            return tick

        job.run_tick = slow_run_tick
        ticks = scheduler_loop(job, clock, until=utc(hour=13))
        assert [t.tick_at for t in ticks] == [utc(hour=0), utc(hour=12)]
        assert ticks[1].skipped_boundaries == 1

    def test_restart_resumes_from_persisted_tick(self, tmp_path):
        clock = SimClock(utc(hour=0))
        job = make_job(admitted_fixture(1), tmp_path / "p.log", clock=clock)
        scheduler_loop(job, clock, until=utc(hour=6))
        job.store.close()

        restarted = SimClock(utc(hour=8))
        job2 = make_job(admitted_fixture(1), tmp_path / "p.log", clock=restarted)
        ticks = scheduler_loop(job2, clock=restarted, max_ticks=1)
        assert ticks[0].tick_at == utc(hour=12)
        assert restarted.now() == utc(hour=12)

    def test_max_ticks_bound(self, tmp_path):
        clock = SimClock(utc(hour=0))
        job = make_job(admitted_fixture(1), tmp_path / "p.log", clock=clock)
        assert len(scheduler_loop(job, clock, max_ticks=3)) == 3

    @settings(max_examples=15, deadline=None)
    @given(admission_hours=st.lists(st.integers(min_value=0, max_value=20), min_size=1,
                                    max_size=6, unique=True))
    def test_freshness_bound(self, tmp_path_factory, admission_hours):
        """Steady state: every encounter admitted by the last tick has a
        prediction no staler than one interval plus that tick's duration."""
        tmp_path = tmp_path_factory.mktemp("freshness")
        fixture = FixtureStore()
        for i, h in enumerate(sorted(admission_hours)):
            fixture.create(patient(f"pat-{i}"))
            fixture.create(encounter(f"enc-{i}", f"pat-{i}", utc(hour=h)))
        clock = SimClock(utc(hour=0))
        job = make_job(fixture, tmp_path / "p.log", clock=clock)
        ticks = scheduler_loop(job, clock, until=utc(hour=0) + timedelta(hours=30))
        for tick in ticks:
            probe = tick.tick_at + SIX_HOURS - timedelta(seconds=1)
            for encounter_id in fixture.encounters_active_at(tick.tick_at):
                found = job.store.latest(encounter_id, probe)
                assert found is not None
                assert found.staleness <= SIX_HOURS + timedelta(seconds=tick.duration_s)
