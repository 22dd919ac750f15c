"""HTTP service composing the gateway, predictor, gate, and trial log.

Single process: the fixture dataset is loaded into an in-process store and
consumed through the same normalization path as the wire client; a
background thread keeps predictions fresh on the boundary grid. Every
order attempt is gated fail-closed: any internal failure yields a
no-display decision with reasons, never a spurious alert.
"""

from __future__ import annotations

import json
import logging
import random
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from datetime import time as dt_time
from pathlib import Path
from typing import Optional
from zoneinfo import ZoneInfo

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .alerts import (
    AlertConfig,
    AlertOutcome,
    ConflictError,
    GateDecision,
    GateReason,
    OrderAttempt,
    apply_action,
    build_payload,
    evaluate_gate,
)
from .clock import WallClock
from .domain import ThresholdRegistry, default_registry
from .fixture import FixtureStore
from .gateway import (
    DirectGateway,
    EncounterNotFoundError,
    GatewayError,
    OrderFrequency,
    StandingOrder,
    TransportError,
    format_ts,
    parse_ts,
)
from .predictor import ModelArtifact
from .scheduler import PredictionJob, scheduler_loop
from .store import PredictionStore
from .trial import ArmRegistry, EncounterRecord, EventLog

logger = logging.getLogger(__name__)

API_VERSION = "v1"


class ServiceConfigError(ValueError):
    """Startup configuration that cannot produce a running service."""


@dataclass(frozen=True)
class ServiceConfig:
    dataset_path: Path
    artifact_path: Path
    data_dir: Path
    thresholds_path: Optional[Path] = None
    scheduler_interval_h: float = 6.0
    trial_seed: int = 0
    host: str = "127.0.0.1"
    port: int = 8080
    timezone: str = "America/Los_Angeles"
    alert: AlertConfig = field(default_factory=AlertConfig)

    def __post_init__(self):
        for label, path in (("dataset", self.dataset_path),
                            ("model artifact", self.artifact_path)):
            if not Path(path).is_file():
                raise ServiceConfigError(f"{label} file not found: {path}")
        if self.thresholds_path is not None and not Path(self.thresholds_path).is_file():
            raise ServiceConfigError(f"thresholds file not found: {self.thresholds_path}")
        if self.scheduler_interval_h <= 0:
            raise ServiceConfigError("scheduler_interval_h must be positive")
        try:
            ZoneInfo(self.timezone)
        except Exception as exc:
            raise ServiceConfigError(f"invalid timezone {self.timezone!r}") from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "ServiceConfig":
        base = Path(path).parent
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ServiceConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ServiceConfigError(f"config {path} does not parse: {exc}") from exc

        def resolve(key: str) -> Optional[Path]:
            value = raw.get(key)
            return (base / value).resolve() if value is not None else None

        required = [k for k in ("dataset_path", "artifact_path", "data_dir") if k not in raw]
        if required:
            raise ServiceConfigError(f"config missing keys: {', '.join(required)}")

        alert_kwargs = dict(raw.get("alert", {}))
        if "timezone" not in alert_kwargs and "timezone" in raw:
            alert_kwargs["timezone"] = raw["timezone"]
        for key in ("heparin_codes", "excluded_units"):
            if key in alert_kwargs:
                alert_kwargs[key] = frozenset(alert_kwargs[key])
        for key in ("display_start", "display_end"):
            if isinstance(alert_kwargs.get(key), str):
                try:
                    alert_kwargs[key] = dt_time.fromisoformat(alert_kwargs[key])
                except ValueError as exc:
                    raise ServiceConfigError(f"invalid {key}: {exc}") from exc
        try:
            alert = AlertConfig(**alert_kwargs)
        except (TypeError, ValueError) as exc:
            raise ServiceConfigError(f"invalid alert config: {exc}") from exc

        return cls(
            dataset_path=resolve("dataset_path"),
            artifact_path=resolve("artifact_path"),
            data_dir=(base / raw["data_dir"]).resolve(),
            thresholds_path=resolve("thresholds_path"),
            scheduler_interval_h=float(raw.get("scheduler_interval_h", 6.0)),
            trial_seed=int(raw.get("trial_seed", 0)),
            host=str(raw.get("host", "127.0.0.1")),
            port=int(raw.get("port", 8080)),
            timezone=str(raw.get("timezone", "America/Los_Angeles")),
            alert=alert,
        )


class ServiceState:
    """Wired runtime components behind the API."""

    def __init__(self, config: ServiceConfig, gateway=None, clock=None):
        self.config = config
        self.clock = clock or WallClock()
        self.registry: ThresholdRegistry = (
            ThresholdRegistry.from_file(config.thresholds_path)
            if config.thresholds_path else default_registry()
        )
        self.artifact = ModelArtifact.load(config.artifact_path)
        if gateway is None:
            store = FixtureStore.from_file(config.dataset_path)
            gateway = DirectGateway(store)
        self.gateway = gateway
        config.data_dir.mkdir(parents=True, exist_ok=True)
        self.prediction_store = PredictionStore(config.data_dir / "predictions.log")
        self.job = PredictionJob(
            gateway=self.gateway, artifact=self.artifact, store=self.prediction_store,
            components=self.registry.panel(), clock=self.clock,
        )
        self.event_log = EventLog(config.data_dir / "events.jsonl")
        self.arm_registry = ArmRegistry(config.data_dir / "arms.jsonl")
        self.arm_rng = random.Random(config.trial_seed)
        self._order_seq = 0
        self._order_for_event: dict[str, str] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._scheduler_thread: Optional[threading.Thread] = None

    def start_scheduler(self) -> None:
        interval = timedelta(hours=self.config.scheduler_interval_h)

        def loop():
            scheduler_loop(self.job, self.clock, interval, stop=self._stop)

        self._scheduler_thread = threading.Thread(target=loop, daemon=True,
                                                  name="prediction-scheduler")
        self._scheduler_thread.start()

    def shutdown(self) -> None:
        self._stop.set()
        self.prediction_store.close()
        self.event_log.close()
        self.arm_registry.close()

    def next_order_id(self) -> str:
        with self._lock:
            self._order_seq += 1
            return f"svc-order-{self._order_seq}"


# -- request bodies ----------------------------------------------------------


class OrderAttemptIn(BaseModel):
    encounter_id: str
    frequency: str = "daily_or_higher"
    attempted_at: Optional[str] = None
    order_id: Optional[str] = None
    clinician_id: str = ""


class AlertActionIn(BaseModel):
    action: str
    acknowledge_reason: Optional[str] = None
    acted_at: Optional[str] = None


def _parse_when(raw: Optional[str], fallback: datetime, field_name: str) -> datetime:
    if raw is None:
        return fallback
    try:
        return parse_ts(raw)
    except ValueError as exc:
        raise HTTPException(422, detail=f"invalid {field_name}: {exc}")


def _order_summary(order: StandingOrder) -> dict:
    return {
        "order_id": order.order_id,
        "encounter_id": order.encounter_id,
        "panel": order.panel,
        "frequency": order.frequency.value,
        "status": order.status.value,
        "start_at": format_ts(order.start_at),
        "end_at": format_ts(order.end_at),
    }


def build_app(state: ServiceState) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        state.shutdown()

    app = FastAPI(title="lab-stability service", version=API_VERSION, lifespan=lifespan)
    app.state.service = state
    # local demo console is served from another origin; no auth by design
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(ConflictError)
    async def conflict_handler(request: Request, exc: ConflictError):
        return JSONResponse(status_code=409, content={"error": str(exc)})

    @app.exception_handler(TransportError)
    async def transport_handler(request: Request, exc: TransportError):
        return JSONResponse(status_code=503, content={"error": f"gateway unavailable: {exc}"})

    @app.post(f"/{API_VERSION}/order-attempts")
    def order_attempt(body: OrderAttemptIn):
        now = state.clock.now()
        attempted_at = _parse_when(body.attempted_at, now, "attempted_at")
        try:
            frequency = OrderFrequency(body.frequency)
        except ValueError:
            raise HTTPException(422, detail=f"unknown frequency {body.frequency!r}")

        gateway_error: Optional[str] = None
        snapshot = None
        try:
            snapshot = state.gateway.fetch_snapshot(body.encounter_id, attempted_at)
        except EncounterNotFoundError:
            raise HTTPException(404, detail=f"unknown encounter {body.encounter_id}")
        except TransportError as exc:
            gateway_error = str(exc)

        order = None
        persisted = False
        if body.order_id is not None and gateway_error is None:
            try:
                order = state.gateway.get_order(body.order_id)
                persisted = True
            except TransportError as exc:
                gateway_error = str(exc)
            except GatewayError:
                order = None  # draft not persisted yet; create below
        if order is not None and order.encounter_id != body.encounter_id:
            raise HTTPException(422, detail="order belongs to a different encounter")
        if order is None:
            order = StandingOrder(
                order_id=body.order_id or state.next_order_id(),
                encounter_id=body.encounter_id,
                panel="CBC",
                frequency=frequency,
                start_at=attempted_at,
                end_at=attempted_at + timedelta(hours=72),
            )

        attempt = OrderAttempt(
            encounter_id=body.encounter_id, order=order,
            attempted_at=attempted_at, clinician_id=body.clinician_id,
        )

        if snapshot is None:
            # fail closed: census source down still answers, without display
            gate = GateDecision(show=False, reasons=(GateReason.NO_PREDICTION,),
                                prediction_used=None)
            eligible = True
        else:
            latest = state.prediction_store.latest(body.encounter_id, attempted_at)
            try:
                gate = evaluate_gate(
                    attempt, snapshot, latest, state.config.alert,
                    last_trigger_at=state.event_log.last_trigger_at(body.encounter_id),
                )
            except Exception:
                logger.exception("gate evaluation failed for %s", body.encounter_id)
                gate = GateDecision(show=False, reasons=(GateReason.NO_PREDICTION,),
                                    prediction_used=None)
            eligible = snapshot.unit not in state.config.alert.excluded_units

        assignment = state.arm_registry.assign(
            body.encounter_id, state.arm_rng, attempted_at, eligible=eligible
        )
        if not persisted and gateway_error is None:
            try:
                state.gateway.create_order(order)
            except TransportError as exc:
                gateway_error = str(exc)
        event = state.event_log.record_alert(attempt, gate, assignment.arm)
        with state._lock:
            state._order_for_event[event.event_id] = order.order_id

        response = {
            "alert_event_id": event.event_id,
            "displayed": event.displayed,
            "silently_logged": event.silently_triggered,
            "decision": gate.to_dict(),
            "order": _order_summary(order),
        }
        if gateway_error is not None:
            response["gateway_error"] = gateway_error
        if event.displayed and snapshot is not None and gate.prediction_used is not None:
            payload = build_payload(snapshot, gate.prediction_used,
                                    state.config.alert, state.registry)
            response["payload"] = payload.to_dict()
        return response

    @app.post(f"/{API_VERSION}/alerts/{{event_id}}/action")
    def alert_action(event_id: str, body: AlertActionIn):
        event = state.event_log.get(event_id)
        if event is None:
            raise HTTPException(404, detail=f"unknown alert event {event_id}")
        if not event.displayed:
            raise ConflictError(f"alert event {event_id} was not displayed")
        order_id = state._order_for_event.get(event_id)
        if order_id is None:
            raise ConflictError(f"alert event {event_id} has no associated order")
        try:
            order = state.gateway.get_order(order_id)
        except GatewayError:
            raise HTTPException(404, detail=f"unknown order {order_id}")
        acted_at = _parse_when(body.acted_at, state.clock.now(), "acted_at")
        try:
            outcome = AlertOutcome(
                alert_event_id=event_id, action=body.action,
                acted_at=acted_at, acknowledge_reason=body.acknowledge_reason,
            )
        except ValueError as exc:
            raise HTTPException(422, detail=str(exc))
        surviving = apply_action(outcome, order, state.gateway)
        try:
            state.event_log.attach_outcome(event_id, outcome)
        except ValueError as exc:
            raise ConflictError(str(exc))
        return {
            "alert_event_id": event_id,
            "action": outcome.action.value,
            "order": _order_summary(surviving),
            "replaced_order_id": order.order_id if surviving.order_id != order.order_id else None,
        }

    @app.get(f"/{API_VERSION}/predictions/{{encounter_id}}")
    def latest_prediction(encounter_id: str, as_of: Optional[str] = Query(default=None)):
        when = _parse_when(as_of, state.clock.now(), "as_of")
        latest = state.prediction_store.latest(encounter_id, when)
        if latest is None:
            raise HTTPException(404, detail=f"no prediction for {encounter_id}")
        return {
            "prediction": latest.prediction.to_record(),
            "staleness_h": latest.staleness.total_seconds() / 3600.0,
        }

    @app.get(f"/{API_VERSION}/encounters/{{encounter_id}}/labs")
    def encounter_labs(encounter_id: str, window: float = Query(default=72.0, gt=0),
                       as_of: Optional[str] = Query(default=None)):
        when = _parse_when(as_of, state.clock.now(), "as_of")
        try:
            snapshot = state.gateway.fetch_snapshot(encounter_id, when)
        except EncounterNotFoundError:
            raise HTTPException(404, detail=f"unknown encounter {encounter_id}")
        sliced = snapshot.labs.sliced(start=when - timedelta(hours=window))
        results = []
        for r in sorted(sliced.results, key=lambda x: (x.observed_at, x.component)):
            thresholds = state.registry.thresholds_for(r.component) \
                if r.component in state.registry.panel() else None
            results.append({
                "component": r.component,
                "value": r.value,
                "observed_at": format_ts(r.observed_at),
                "abnormal": (thresholds is not None
                             and not thresholds.in_reference_range(r.value)),
            })
        return {"encounter_id": encounter_id, "as_of": format_ts(when),
                "window_h": window, "results": results}

    @app.get(f"/{API_VERSION}/encounters")
    def list_encounters(as_of: Optional[str] = Query(default=None)):
        when = _parse_when(as_of, state.clock.now(), "as_of")
        rows = []
        for encounter_id in state.gateway.list_admitted_encounters(when):
            row = {"encounter_id": encounter_id}
            try:
                snapshot = state.gateway.fetch_snapshot(encounter_id, when)
                row.update(unit=snapshot.unit, age=snapshot.age, sex=snapshot.sex)
            except (GatewayError, TransportError):
                pass
            latest = state.prediction_store.latest(encounter_id, when)
            if latest is not None:
                row["panel_probability"] = latest.prediction.panel_probability
                row["staleness_h"] = latest.staleness.total_seconds() / 3600.0
            assignment = state.arm_registry.get(encounter_id)
            row["arm"] = assignment.arm.name.lower() if assignment else None
            rows.append(row)
        return {"as_of": format_ts(when), "encounters": rows}

    @app.get(f"/{API_VERSION}/encounters/{{encounter_id}}/orders")
    def encounter_orders(encounter_id: str):
        orders = state.gateway.list_orders(encounter_id)
        return {
            "encounter_id": encounter_id,
            "orders": [_order_summary(o) for o in
                       sorted(orders, key=lambda o: (o.start_at, o.order_id))],
        }

    @app.get(f"/{API_VERSION}/report")
    def report():
        from .report import build_report

        events = state.event_log.events()
        records = _encounter_records(state)
        return json.loads(build_report(events, records).to_json_bytes())

    @app.get(f"/{API_VERSION}/health")
    def health():
        last_tick = state.prediction_store.last_tick_at
        return {
            "status": "ok",
            "model_version": state.artifact.model_version,
            "prediction_count": state.prediction_store.prediction_count(),
            "tick_count": len(state.prediction_store.ticks()),
            "last_tick_at": format_ts(last_tick) if last_tick else None,
            "alert_events": len(state.event_log.events()),
        }

    return app


def _encounter_records(state: ServiceState) -> list[EncounterRecord]:
    """Best-effort trial records for live reporting: demographics from the
    store, outcomes unknown until the trial pipeline writes them."""
    records = []
    now = state.clock.now()
    for assignment in state.arm_registry.all():
        try:
            snapshot = state.gateway.fetch_snapshot(assignment.encounter_id, now)
        except (GatewayError, TransportError):
            continue
        records.append(EncounterRecord(
            encounter_id=assignment.encounter_id,
            arm=assignment.arm,
            admitted_at=snapshot.admission_at,
            discharged_at=None,
            icu_on_admission=False,
            icu_transfer_times=(),
            died_in_hospital=False,
            readmitted_within_30d=False,
            age=snapshot.age,
            sex=snapshot.sex,
            race=snapshot.race,
            unit=snapshot.unit,
            patient_id=snapshot.patient_id,
            eligible=assignment.eligible,
            cbc_result_times=tuple(snapshot.labs.draw_times()),
        ))
    return records


def compose(config: ServiceConfig, gateway=None, clock=None,
            run_scheduler: bool = False) -> tuple[FastAPI, ServiceState]:
    state = ServiceState(config, gateway=gateway, clock=clock)
    if run_scheduler:
        state.job.run_tick(state.clock.now())  # warm predictions before serving
        state.start_scheduler()
    return build_app(state), state
