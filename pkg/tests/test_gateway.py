"""Gateway normalization, the fixture store, and both client transports."""

import json
import time
from dataclasses import replace
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import utc
from labsentry.domain import ResultStatus
from labsentry.fixture import DatasetError, FixtureStore, ThreadedServer, build_fixture_app
from labsentry.gateway import (
    DirectGateway,
    EncounterNotFoundError,
    GatewayError,
    HttpGateway,
    OrderFrequency,
    OrderStatus,
    StandingOrder,
    TransportError,
    default_code_config,
    format_ts,
    order_from_resource,
    order_to_resource,
    snapshot_from_bundle,
)

CBC_CODES = {"WBC": "6690-2", "HGB": "718-7", "PLT": "777-3"}


def patient(pid="patient-1", birth="1955-01-06", gender="female", race="white"):
    return {
        "resourceType": "Patient",
        "id": pid,
        "birthDate": birth,
        "gender": gender,
        "extension": [{"url": "race", "valueString": race}],
    }


def encounter(eid="enc-1", pid="patient-1", start=None, end=None, unit="MED-1"):
    period = {"start": format_ts(start or utc(hour=0))}
    if end is not None:
        period["end"] = format_ts(end)
    return {
        "resourceType": "Encounter",
        "id": eid,
        "subject": {"reference": f"Patient/{pid}"},
        "period": period,
        "location": [{"location": {"display": unit}}],
    }


def observation(code, value, observed_at, eid="enc-1", status="final", category="laboratory"):
    return {
        "resourceType": "Observation",
        "status": status,
        "category": [{"text": category}],
        "code": {"coding": [{"code": code}]},
        "valueQuantity": {"value": value},
        "effectiveDateTime": format_ts(observed_at),
        "encounter": {"reference": f"Encounter/{eid}"},
    }


def medication_request(code, authored_at, eid="enc-1", status="active", route="intravenous",
                       therapeutic=False):
    resource = {
        "resourceType": "MedicationRequest",
        "status": status,
        "medicationCodeableConcept": {"coding": [{"code": code}]},
        "authoredOn": format_ts(authored_at),
        "dosageInstruction": [{"route": {"text": route}}],
        "encounter": {"reference": f"Encounter/{eid}"},
    }
    if therapeutic:
        resource["extension"] = [{"url": "therapeutic", "valueBoolean": True}]
    return resource


def condition(code, onset_at, eid="enc-1"):
    return {
        "resourceType": "Condition",
        "code": {"coding": [{"code": code}]},
        "onsetDateTime": format_ts(onset_at),
        "encounter": {"reference": f"Encounter/{eid}"},
    }


def procedure(code, performed_at, eid="enc-1"):
    return {
        "resourceType": "Procedure",
        "code": {"coding": [{"code": code}]},
        "performedDateTime": format_ts(performed_at),
        "encounter": {"reference": f"Encounter/{eid}"},
    }


def cbc_draw(hour, wbc=8.0, hgb=12.0, plt=250.0, eid="enc-1", day=6):
    at = utc(day=day, hour=hour)
    return [
        observation(CBC_CODES["WBC"], wbc, at, eid=eid),
        observation(CBC_CODES["HGB"], hgb, at, eid=eid),
        observation(CBC_CODES["PLT"], plt, at, eid=eid),
    ]


def cbc_resources():
    """One encounter with three full CBC draws at 06:00, 12:00, 18:00."""
    resources = [patient(), encounter(start=utc(hour=0))]
    resources += cbc_draw(6, wbc=8.0, hgb=12.0, plt=250.0)
    resources += cbc_draw(12, wbc=8.4, hgb=11.8, plt=240.0)
    resources += cbc_draw(18, wbc=9.0, hgb=11.5, plt=230.0)
    return resources


def bundle_of(resources):
    return {"resourceType": "Bundle", "type": "searchset", "entry": [{"resource": r} for r in resources]}


def sample_order(order_id="order-1", status=OrderStatus.ACTIVE):
    return StandingOrder(
        order_id=order_id,
        encounter_id="enc-1",
        panel="CBC",
        frequency=OrderFrequency.DAILY_OR_HIGHER,
        start_at=utc(hour=0),
        end_at=utc(day=9, hour=0),
        status=status,
    )


class TestSnapshotNormalization:
    def test_three_cbc_draws_yield_nine_results(self, codes):
        snap = snapshot_from_bundle(bundle_of(cbc_resources()), "enc-1", utc(hour=23), codes)
        assert len(snap.labs) == 9
        for component in ("WBC", "HGB", "PLT"):
            assert len(snap.labs.for_component(component)) == 3
        assert snap.unmapped_observations == 0
        assert snap.parse_errors == 0

    def test_as_of_before_any_draw_gives_empty_series(self, codes):
        snap = snapshot_from_bundle(bundle_of(cbc_resources()), "enc-1", utc(hour=3), codes)
        assert len(snap.labs) == 0
        assert snap.encounter_id == "enc-1"

    def test_time_filter_applies_to_every_record_kind(self, codes):
        as_of = utc(hour=12)
        resources = cbc_resources() + [
            medication_request("heparin-iv", utc(hour=20)),
            condition("sepsis", utc(hour=15)),
            procedure("116859006", utc(hour=13)),
            procedure("endoscopy", utc(hour=14)),
            observation("8867-4", 72.0, utc(hour=16), category="vital-signs"),
        ]
        snap = snapshot_from_bundle(bundle_of(resources), "enc-1", as_of, codes)
        assert len(snap.labs) == 6
        assert snap.medications == ()
        assert snap.conditions == ()
        assert snap.procedures == ()
        assert snap.transfusions == ()
        assert snap.vitals == ()

    def test_unmapped_code_dropped_and_counted(self, codes):
        resources = cbc_resources() + [observation("9999-9", 1.0, utc(hour=7))]
        snap = snapshot_from_bundle(bundle_of(resources), "enc-1", utc(hour=23), codes)
        assert len(snap.labs) == 9
        assert snap.unmapped_observations == 1

    def test_malformed_resource_is_isolated(self, codes):
        broken = observation(CBC_CODES["WBC"], 8.0, utc(hour=7))
        del broken["valueQuantity"]
        resources = cbc_resources() + [broken]
        snap = snapshot_from_bundle(bundle_of(resources), "enc-1", utc(hour=23), codes)
        assert snap.parse_errors == 1
        assert len(snap.labs) == 9

    def test_vitals_and_transfusions_routed_separately(self, codes):
        resources = cbc_resources() + [
            observation("8867-4", 72.0, utc(hour=7), category="vital-signs"),
            procedure("116859006", utc(hour=8)),
            procedure("endoscopy", utc(hour=9)),
        ]
        snap = snapshot_from_bundle(bundle_of(resources), "enc-1", utc(hour=23), codes)
        assert [v.code for v in snap.vitals] == ["8867-4"]
        assert snap.transfusions == (utc(hour=8),)
        assert [p.code for p in snap.procedures] == ["endoscopy"]

    def test_medication_fields(self, codes):
        resources = cbc_resources() + [
            medication_request("heparin-iv", utc(hour=2), therapeutic=True),
            medication_request("warfarin", utc(hour=3), status="stopped", route="oral"),
        ]
        snap = snapshot_from_bundle(bundle_of(resources), "enc-1", utc(hour=23), codes)
        heparin, warfarin = snap.medications
        assert heparin.code == "heparin-iv" and heparin.therapeutic and heparin.active
        assert heparin.route == "intravenous"
        assert warfarin.code == "warfarin" and not warfarin.active and warfarin.route == "oral"

    def test_demographics_extracted(self, codes):
        snap = snapshot_from_bundle(bundle_of(cbc_resources()), "enc-1", utc(hour=23), codes)
        assert snap.sex == "female"
        assert snap.race == "white"
        assert snap.unit == "MED-1"
        assert snap.admission_at == utc(hour=0)
        # born 1955-01-06, as_of 2025-01-06
        assert snap.age == pytest.approx(70.0, abs=0.05)

    def test_corrected_status_mapped(self, codes):
        resources = [patient(), encounter()]
        resources.append(observation(CBC_CODES["WBC"], 8.0, utc(hour=6), status="corrected"))
        snap = snapshot_from_bundle(bundle_of(resources), "enc-1", utc(hour=23), codes)
        assert snap.labs.for_component("WBC")[0].status == ResultStatus.CORRECTED

    def test_missing_encounter_raises_not_found(self, codes):
        with pytest.raises(EncounterNotFoundError):
            snapshot_from_bundle(bundle_of([patient()]), "enc-1", utc(hour=23), codes)

    def test_determinism_same_as_of(self, codes):
        a = snapshot_from_bundle(bundle_of(cbc_resources()), "enc-1", utc(hour=23), codes)
        b = snapshot_from_bundle(bundle_of(cbc_resources()), "enc-1", utc(hour=23), codes)
        assert a.to_dict() == b.to_dict()
        assert a.content_hash() == b.content_hash()

    @settings(max_examples=40, deadline=None)
    @given(
        lab_hours=st.lists(st.integers(min_value=0, max_value=72), max_size=12, unique=True),
        procedure_hours=st.lists(st.integers(min_value=0, max_value=72), max_size=4),
        med_hours=st.lists(st.integers(min_value=0, max_value=72), max_size=4),
        as_of_hour=st.integers(min_value=0, max_value=72),
    )
    def test_time_filter_soundness(self, lab_hours, procedure_hours, med_hours, as_of_hour):
        codes = default_code_config()
        as_of = utc(hour=0) + timedelta(hours=as_of_hour)
        resources = [patient(), encounter(start=utc(hour=0))]
        for h in lab_hours:
            resources.append(observation(CBC_CODES["WBC"], 8.0, utc(hour=0) + timedelta(hours=h)))
        for h in procedure_hours:
            resources.append(procedure("endoscopy", utc(hour=0) + timedelta(hours=h)))
        for h in med_hours:
            resources.append(medication_request("warfarin", utc(hour=0) + timedelta(hours=h)))
        snap = snapshot_from_bundle(bundle_of(resources), "enc-1", as_of, codes)
        stamps = (
            [r.observed_at for r in snap.labs]
            + [p.performed_at for p in snap.procedures]
            + [m.started_at for m in snap.medications]
        )
        assert all(ts <= as_of for ts in stamps)
        kept = sum(1 for h in lab_hours + procedure_hours + med_hours if h <= as_of_hour)
        assert len(stamps) == kept


class TestOrderResources:
    def test_active_round_trip(self):
        order = sample_order()
        assert order_from_resource(order_to_resource(order)) == order

    def test_discontinued_round_trip(self):
        order = sample_order(status=OrderStatus.DISCONTINUED)
        resource = order_to_resource(order)
        assert resource["status"] == "revoked"
        assert order_from_resource(resource) == order

    def test_modified_needs_replacement_pointer(self):
        order = sample_order(status=OrderStatus.MODIFIED)
        resource = order_to_resource(order, replaced_by="order-2")
        parsed = order_from_resource(resource)
        assert parsed.status == OrderStatus.MODIFIED
        # without the pointer the revoked order reads back as plain discontinued
        bare = order_to_resource(order)
        assert order_from_resource(bare).status == OrderStatus.DISCONTINUED

    def test_unsupported_status_rejected(self):
        resource = order_to_resource(sample_order())
        resource["status"] = "entered-in-error"
        with pytest.raises(ValueError):
            order_from_resource(resource)

    def test_active_window_half_open(self):
        order = sample_order()
        assert order.active_at(order.start_at)
        assert not order.active_at(order.end_at)
        assert not order.active_at(order.start_at - timedelta(seconds=1))

    def test_start_must_precede_end(self):
        with pytest.raises(ValueError):
            StandingOrder(
                order_id="o",
                encounter_id="e",
                panel="CBC",
                frequency=OrderFrequency.WEEKLY,
                start_at=utc(hour=5),
                end_at=utc(hour=5),
            )


class TestFixtureStore:
    def test_autogenerated_ids_and_duplicates(self):
        store = FixtureStore()
        created = store.create(observation(CBC_CODES["WBC"], 8.0, utc(hour=6)))
        assert created["id"].startswith("observation-")
        with pytest.raises(DatasetError):
            store.create(created)

    def test_unsupported_type_rejected(self):
        with pytest.raises(DatasetError):
            FixtureStore().create({"resourceType": "DiagnosticReport", "id": "x"})

    def test_update_unknown_raises(self):
        with pytest.raises(KeyError):
            FixtureStore().update({"resourceType": "ServiceRequest", "id": "missing"})

    def test_everything_assembles_linked_resources(self):
        store = FixtureStore(cbc_resources())
        everything = store.everything("enc-1")
        types = sorted(e["resource"]["resourceType"] for e in everything["entry"])
        assert types.count("Observation") == 9
        assert "Patient" in types and "Encounter" in types
        assert everything["total"] == 11
        assert store.everything("nope") is None

    def test_admission_boundary_closed_discharge_boundary_open(self):
        as_of = utc(hour=12)
        store = FixtureStore(
            [
                patient(),
                encounter(eid="enc-at", start=as_of),
                encounter(eid="enc-before", start=utc(hour=1)),
                encounter(eid="enc-discharged", start=utc(hour=1), end=as_of),
                encounter(eid="enc-later", start=utc(hour=13)),
                encounter(eid="enc-open", start=utc(hour=2), end=utc(hour=20)),
            ]
        )
        assert store.encounters_active_at(as_of) == ["enc-at", "enc-before", "enc-open"]

    def test_empty_store_empty_list(self):
        assert FixtureStore().encounters_active_at(utc(hour=12)) == []

    def test_dataset_round_trip(self, tmp_path):
        store = FixtureStore(cbc_resources())
        path = tmp_path / "dataset.json"
        store.dump(path)
        reloaded = FixtureStore.from_file(path)
        assert reloaded.resource_count() == store.resource_count()
        assert reloaded.everything("enc-1")["total"] == 11

    def test_bad_dataset_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(DatasetError):
            FixtureStore.from_file(path)
        ok = tmp_path / "unwrapped.json"
        ok.write_text(json.dumps({"resourceType": "Patient"}))
        with pytest.raises(DatasetError):
            FixtureStore.from_file(ok)


class TestDirectGateway:
    def test_round_trip_matches_dataset(self, codes):
        gateway = DirectGateway(FixtureStore(cbc_resources()), codes)
        snap = gateway.fetch_snapshot("enc-1", utc(hour=23))
        assert len(snap.labs) == 9
        wbc = [r.value for r in snap.labs.for_component("WBC")]
        assert wbc == [8.0, 8.4, 9.0]

    def test_unknown_encounter(self, codes):
        with pytest.raises(EncounterNotFoundError):
            DirectGateway(FixtureStore(), codes).fetch_snapshot("enc-1", utc(hour=23))

    def test_order_read_your_write(self, codes):
        gateway = DirectGateway(FixtureStore(cbc_resources()), codes)
        order = gateway.create_order(sample_order())
        assert gateway.get_order("order-1") == order
        gateway.update_order(replace(order, status=OrderStatus.DISCONTINUED))
        assert gateway.get_order("order-1").status == OrderStatus.DISCONTINUED
        assert [o.order_id for o in gateway.list_orders("enc-1")] == ["order-1"]
        with pytest.raises(GatewayError):
            gateway.get_order("order-404")


@pytest.fixture(scope="module")
def http_stack():
    store = FixtureStore(cbc_resources())
    with ThreadedServer(build_fixture_app(store)) as server:
        yield store, HttpGateway(server.base_url, default_code_config())


class TestHttpGateway:
    def test_snapshot_matches_direct_path(self, http_stack, codes):
        store, gateway = http_stack
        over_http = gateway.fetch_snapshot("enc-1", utc(hour=23))
        direct = DirectGateway(store, codes).fetch_snapshot("enc-1", utc(hour=23))
        assert over_http.content_hash() == direct.content_hash()

    def test_unknown_encounter_404(self, http_stack):
        _, gateway = http_stack
        with pytest.raises(EncounterNotFoundError):
            gateway.fetch_snapshot("enc-404", utc(hour=23))

    def test_list_admitted(self, http_stack):
        _, gateway = http_stack
        assert gateway.list_admitted_encounters(utc(hour=12)) == ["enc-1"]
        assert gateway.list_admitted_encounters(utc(month=2, day=1)) == ["enc-1"]

    def test_order_mutation_read_your_write(self, http_stack):
        _, gateway = http_stack
        created = gateway.create_order(sample_order(order_id="order-http"))
        assert created.status == OrderStatus.ACTIVE
        gateway.update_order(replace(created, status=OrderStatus.DISCONTINUED))
        fetched = gateway.get_order("order-http")
        assert fetched.status == OrderStatus.DISCONTINUED

    def test_unreachable_endpoint_is_transport_error(self):
        gateway = HttpGateway("http://127.0.0.1:9", timeout=0.2)
        with pytest.raises(TransportError):
            gateway.fetch_snapshot("enc-1", utc(hour=23))
        with pytest.raises(TransportError):
            gateway.create_order(sample_order())


class TestLatencyInjection:
    def test_two_hundred_ms_per_resource_forty_resources(self, codes):
        # 1 encounter + 1 patient + 38 observations = 40 resources, 0.2s each
        resources = [patient(), encounter(start=utc(hour=0))]
        for i in range(38):
            resources.append(observation(CBC_CODES["WBC"], 8.0, utc(hour=1) + timedelta(minutes=i)))
        store = FixtureStore(resources)
        assert store.resource_count("enc-1") == 40
        with ThreadedServer(build_fixture_app(store, latency_per_resource=0.2)) as server:
            gateway = HttpGateway(server.base_url, codes)
            started = time.monotonic()
            snap = gateway.fetch_snapshot("enc-1", utc(hour=23))
            elapsed = time.monotonic() - started
        assert len(snap.labs) == 38
        assert elapsed >= 8.0
