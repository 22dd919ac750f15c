"""FHIR-style patient data access: resource normalization plus two
interchangeable clients (HTTP against a FHIR-shaped endpoint, and direct
in-process access to a fixture store).

Only a seven-resource subset is understood (Patient, Encounter, Observation,
MedicationRequest, Condition, Procedure, ServiceRequest), ids are opaque, and
lab code mapping is configuration. One malformed resource never poisons a
snapshot: it is skipped, logged, and counted.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from enum import Enum
from importlib import resources as importlib_resources
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import httpx

from .domain import LabResult, LabSeries, ResultStatus

logger = logging.getLogger(__name__)

DEFAULT_TRANSFUSION_CODES = frozenset({"116859006", "TRANSFUSION-RBC"})


class GatewayError(Exception):
    """Base class for patient-data access failures."""


class TransportError(GatewayError):
    """Endpoint unreachable or answered with a server error; retryable."""


class EncounterNotFoundError(GatewayError):
    def __init__(self, encounter_id: str):
        self.encounter_id = encounter_id
        super().__init__(f"unknown encounter {encounter_id}")


class OrderFrequency(str, Enum):
    DAILY_OR_HIGHER = "daily_or_higher"
    EVERY_OTHER_DAY = "every_other_day"
    WEEKLY = "weekly"


class OrderStatus(str, Enum):
    ACTIVE = "active"
    DISCONTINUED = "discontinued"
    MODIFIED = "modified"


def parse_ts(raw: str) -> datetime:
    """RFC-3339 timestamp to aware UTC datetime."""
    dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        raise ValueError(f"timestamp {raw!r} lacks a zone offset")
    return dt.astimezone(timezone.utc)


def format_ts(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat()


@dataclass(frozen=True)
class VitalSign:
    code: str
    value: float
    observed_at: datetime


@dataclass(frozen=True)
class MedicationOrder:
    code: str
    route: str
    active: bool
    started_at: datetime
    therapeutic: bool = False


@dataclass(frozen=True)
class ConditionRecord:
    code: str
    onset_at: datetime


@dataclass(frozen=True)
class ProcedureRecord:
    code: str
    performed_at: datetime


@dataclass(frozen=True)
class StandingOrder:
    order_id: str
    encounter_id: str
    panel: str
    frequency: OrderFrequency
    start_at: datetime
    end_at: datetime
    status: OrderStatus = OrderStatus.ACTIVE

    def __post_init__(self):
        if isinstance(self.frequency, str) and not isinstance(self.frequency, OrderFrequency):
            object.__setattr__(self, "frequency", OrderFrequency(self.frequency))
        if isinstance(self.status, str) and not isinstance(self.status, OrderStatus):
            object.__setattr__(self, "status", OrderStatus(self.status))
        if self.start_at >= self.end_at:
            raise ValueError(f"order {self.order_id}: start_at must precede end_at")

    def active_at(self, at: datetime) -> bool:
        return self.status == OrderStatus.ACTIVE and self.start_at <= at < self.end_at


@dataclass(frozen=True)
class PatientSnapshot:
    """Everything known about one encounter at a moment in time.

    Invariant: no nested timestamp exceeds as_of (the normalizer filters).
    """

    patient_id: str
    encounter_id: str
    as_of: datetime
    age: float
    sex: str
    race: str
    admission_at: datetime
    unit: str
    labs: LabSeries
    vitals: tuple[VitalSign, ...] = ()
    medications: tuple[MedicationOrder, ...] = ()
    conditions: tuple[ConditionRecord, ...] = ()
    procedures: tuple[ProcedureRecord, ...] = ()
    transfusions: tuple[datetime, ...] = ()
    unmapped_observations: int = 0
    parse_errors: int = 0

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "encounter_id": self.encounter_id,
            "as_of": format_ts(self.as_of),
            "age": self.age,
            "sex": self.sex,
            "race": self.race,
            "admission_at": format_ts(self.admission_at),
            "unit": self.unit,
            "labs": [
                {
                    "component": r.component,
                    "value": r.value,
                    "observed_at": format_ts(r.observed_at),
                    "status": r.status.value,
                }
                for r in self.labs
            ],
            "vitals": [
                {"code": v.code, "value": v.value, "observed_at": format_ts(v.observed_at)}
                for v in self.vitals
            ],
            "medications": [
                {
                    "code": m.code,
                    "route": m.route,
                    "active": m.active,
                    "started_at": format_ts(m.started_at),
                    "therapeutic": m.therapeutic,
                }
                for m in self.medications
            ],
            "conditions": [
                {"code": c.code, "onset_at": format_ts(c.onset_at)} for c in self.conditions
            ],
            "procedures": [
                {"code": p.code, "performed_at": format_ts(p.performed_at)} for p in self.procedures
            ],
            "transfusions": [format_ts(t) for t in self.transfusions],
        }

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CodeConfig:
    """Lab code-to-component map plus the procedure codes treated as
    transfusions. Shipped defaults are conventional, not authoritative."""

    lab_codes: Mapping[str, str] = field(default_factory=dict)
    transfusion_codes: frozenset[str] = DEFAULT_TRANSFUSION_CODES

    @classmethod
    def from_file(cls, path) -> "CodeConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            lab_codes=dict(raw.get("lab_codes", {})),
            transfusion_codes=frozenset(raw.get("transfusion_codes", DEFAULT_TRANSFUSION_CODES)),
        )


def default_code_config() -> CodeConfig:
    ref = importlib_resources.files("labsentry.data").joinpath("default_code_map.json")
    raw = json.loads(ref.read_text(encoding="utf-8"))
    return CodeConfig(
        lab_codes=dict(raw["lab_codes"]),
        transfusion_codes=frozenset(raw.get("transfusion_codes", DEFAULT_TRANSFUSION_CODES)),
    )


def _primary_code(resource: dict) -> Optional[str]:
    concept = resource.get("code") or resource.get("medicationCodeableConcept") or {}
    for coding in concept.get("coding", []):
        if coding.get("code"):
            return str(coding["code"])
    return concept.get("text")


def _extension(resource: dict, url: str):
    for ext in resource.get("extension", []):
        if ext.get("url") == url:
            for key, value in ext.items():
                if key.startswith("value"):
                    return value
    return None


def _reference_id(ref: Optional[dict]) -> Optional[str]:
    if not ref or "reference" not in ref:
        return None
    return str(ref["reference"]).split("/")[-1]


def order_from_resource(resource: dict) -> StandingOrder:
    status_raw = resource.get("status", "active")
    if status_raw == "active":
        status = OrderStatus.ACTIVE
    elif status_raw == "revoked":
        status = OrderStatus.MODIFIED if _extension(resource, "replacedBy") else OrderStatus.DISCONTINUED
    else:
        raise ValueError(f"unsupported ServiceRequest status {status_raw!r}")
    period = resource.get("occurrencePeriod", {})
    return StandingOrder(
        order_id=str(resource["id"]),
        encounter_id=_reference_id(resource.get("encounter")) or "",
        panel=(resource.get("code", {}) or {}).get("text", "CBC"),
        frequency=OrderFrequency(_extension(resource, "frequency") or "daily_or_higher"),
        start_at=parse_ts(period["start"]),
        end_at=parse_ts(period["end"]),
        status=status,
    )


def order_to_resource(order: StandingOrder, replaced_by: Optional[str] = None) -> dict:
    extensions = [{"url": "frequency", "valueString": order.frequency.value}]
    if order.status == OrderStatus.ACTIVE:
        status = "active"
    else:
        status = "revoked"
        if order.status == OrderStatus.MODIFIED and replaced_by:
            extensions.append({"url": "replacedBy", "valueString": replaced_by})
    return {
        "resourceType": "ServiceRequest",
        "id": order.order_id,
        "status": status,
        "intent": "order",
        "code": {"text": order.panel},
        "encounter": {"reference": f"Encounter/{order.encounter_id}"},
        "occurrencePeriod": {"start": format_ts(order.start_at), "end": format_ts(order.end_at)},
        "extension": extensions,
    }


def _parse_observation(resource: dict, codes: CodeConfig) -> Optional[LabResult]:
    code = _primary_code(resource)
    component = codes.lab_codes.get(code or "")
    if component is None:
        return None
    status_raw = resource.get("status", "final")
    if status_raw == "final":
        status = ResultStatus.FINAL
    elif status_raw in ("corrected", "amended"):
        status = ResultStatus.CORRECTED
    else:
        raise ValueError(f"unsupported Observation status {status_raw!r}")
    return LabResult(
        component=component,
        value=float(resource["valueQuantity"]["value"]),
        observed_at=parse_ts(resource["effectiveDateTime"]),
        status=status,
    )


def snapshot_from_bundle(
    bundle: dict, encounter_id: str, as_of: datetime, codes: CodeConfig
) -> PatientSnapshot:
    """Normalize a resource bundle into a PatientSnapshot at as_of.

    Records stamped after as_of are filtered out; unmapped lab codes are
    dropped and counted; a malformed resource is skipped, logged, counted.
    """
    resources = [entry["resource"] for entry in bundle.get("entry", [])]
    patient: Optional[dict] = None
    encounter: Optional[dict] = None
    labs: list[LabResult] = []
    vitals: list[VitalSign] = []
    medications: list[MedicationOrder] = []
    conditions: list[ConditionRecord] = []
    procedures: list[ProcedureRecord] = []
    transfusions: list[datetime] = []
    unmapped = 0
    parse_errors = 0

    for resource in resources:
        rtype = resource.get("resourceType")
        try:
            if rtype == "Patient":
                patient = resource
            elif rtype == "Encounter" and str(resource.get("id")) == encounter_id:
                encounter = resource
            elif rtype == "Observation":
                observed = parse_ts(resource["effectiveDateTime"])
                if observed > as_of:
                    continue
                category = (resource.get("category") or [{}])[0].get("text", "laboratory")
                if category == "vital-signs":
                    vitals.append(
                        VitalSign(
                            code=_primary_code(resource) or "",
                            value=float(resource["valueQuantity"]["value"]),
                            observed_at=observed,
                        )
                    )
                    continue
                lab = _parse_observation(resource, codes)
                if lab is None:
                    unmapped += 1
                else:
                    labs.append(lab)
            elif rtype == "MedicationRequest":
                started = parse_ts(resource["authoredOn"])
                if started > as_of:
                    continue
                route = ""
                for dosage in resource.get("dosageInstruction", []):
                    route = (dosage.get("route") or {}).get("text", "") or route
                medications.append(
                    MedicationOrder(
                        code=_primary_code(resource) or "",
                        route=route,
                        active=resource.get("status") == "active",
                        started_at=started,
                        therapeutic=bool(_extension(resource, "therapeutic")),
                    )
                )
            elif rtype == "Condition":
                onset = parse_ts(resource["onsetDateTime"])
                if onset > as_of:
                    continue
                conditions.append(ConditionRecord(code=_primary_code(resource) or "", onset_at=onset))
            elif rtype == "Procedure":
                performed = parse_ts(resource["performedDateTime"])
                if performed > as_of:
                    continue
                code = _primary_code(resource) or ""
                if code in codes.transfusion_codes:
                    transfusions.append(performed)
                else:
                    procedures.append(ProcedureRecord(code=code, performed_at=performed))
            # ServiceRequest resources travel through order endpoints, not snapshots.
        except (KeyError, TypeError, ValueError) as exc:
            parse_errors += 1
            logger.warning("skipping malformed %s resource: %s", rtype, exc)

    if encounter is None:
        raise EncounterNotFoundError(encounter_id)
    if patient is None:
        raise EncounterNotFoundError(encounter_id)

    admission_at = parse_ts(encounter["period"]["start"])
    unit = ""
    for loc in encounter.get("location", []):
        unit = (loc.get("location") or {}).get("display", "") or unit

    birth = date.fromisoformat(patient["birthDate"])
    age = (as_of.date() - birth).days / 365.25
    sex = patient.get("gender", "unknown")
    race = _extension(patient, "race") or "unknown"

    return PatientSnapshot(
        patient_id=str(patient["id"]),
        encounter_id=encounter_id,
        as_of=as_of,
        age=round(age, 2),
        sex=sex,
        race=race,
        admission_at=admission_at,
        unit=unit,
        labs=LabSeries(encounter_id, labs),
        vitals=tuple(sorted(vitals, key=lambda v: (v.observed_at, v.code))),
        medications=tuple(sorted(medications, key=lambda m: (m.started_at, m.code))),
        conditions=tuple(sorted(conditions, key=lambda c: (c.onset_at, c.code))),
        procedures=tuple(sorted(procedures, key=lambda p: (p.performed_at, p.code))),
        transfusions=tuple(sorted(transfusions)),
        unmapped_observations=unmapped,
        parse_errors=parse_errors,
    )


class GatewayClient(Protocol):
    """The surface every patient-data backend exposes to the pipeline."""

    def fetch_snapshot(self, encounter_id: str, as_of: datetime) -> PatientSnapshot: ...

    def list_admitted_encounters(self, as_of: datetime) -> list[str]: ...

    def list_orders(self, encounter_id: str) -> list[StandingOrder]: ...

    def get_order(self, order_id: str) -> StandingOrder: ...

    def create_order(self, order: StandingOrder) -> StandingOrder: ...

    def update_order(self, order: StandingOrder, replaced_by: Optional[str] = None) -> StandingOrder: ...


class HttpGateway:
    """GatewayClient over a FHIR-shaped HTTP endpoint."""

    def __init__(self, base_url: str, codes: Optional[CodeConfig] = None,
                 client: Optional[httpx.Client] = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.codes = codes or default_code_config()
        self._client = client or httpx.Client(timeout=timeout)

    def _get(self, path: str, params: Optional[dict] = None) -> httpx.Response:
        try:
            response = self._client.get(f"{self.base_url}{path}", params=params)
        except httpx.HTTPError as exc:
            raise TransportError(f"GET {path}: {exc}") from exc
        if response.status_code >= 500:
            raise TransportError(f"GET {path}: status {response.status_code}")
        return response

    def fetch_snapshot(self, encounter_id: str, as_of: datetime) -> PatientSnapshot:
        response = self._get(f"/Encounter/{encounter_id}/$everything")
        if response.status_code == 404:
            raise EncounterNotFoundError(encounter_id)
        response.raise_for_status()
        return snapshot_from_bundle(response.json(), encounter_id, as_of, self.codes)

    def list_admitted_encounters(self, as_of: datetime) -> list[str]:
        response = self._get("/Encounter", params={"active_at": format_ts(as_of)})
        response.raise_for_status()
        return [str(e["resource"]["id"]) for e in response.json().get("entry", [])]

    def list_orders(self, encounter_id: str) -> list[StandingOrder]:
        response = self._get("/ServiceRequest", params={"encounter": encounter_id})
        response.raise_for_status()
        return [order_from_resource(e["resource"]) for e in response.json().get("entry", [])]

    def get_order(self, order_id: str) -> StandingOrder:
        response = self._get(f"/ServiceRequest/{order_id}")
        if response.status_code == 404:
            raise GatewayError(f"unknown order {order_id}")
        response.raise_for_status()
        return order_from_resource(response.json())

    def create_order(self, order: StandingOrder) -> StandingOrder:
        try:
            response = self._client.post(
                f"{self.base_url}/ServiceRequest", json=order_to_resource(order)
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"POST /ServiceRequest: {exc}") from exc
        response.raise_for_status()
        return order_from_resource(response.json())

    def update_order(self, order: StandingOrder, replaced_by: Optional[str] = None) -> StandingOrder:
        try:
            response = self._client.put(
                f"{self.base_url}/ServiceRequest/{order.order_id}",
                json=order_to_resource(order, replaced_by=replaced_by),
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"PUT /ServiceRequest/{order.order_id}: {exc}") from exc
        response.raise_for_status()
        return order_from_resource(response.json())


class DirectGateway:
    """GatewayClient bound in-process to a fixture store.

    Same normalization path as HttpGateway, minus the wire (and minus any
    injected latency); this is what the simulation and the default service
    composition use.
    """

    def __init__(self, store, codes: Optional[CodeConfig] = None):
        self.store = store
        self.codes = codes or default_code_config()

    def fetch_snapshot(self, encounter_id: str, as_of: datetime) -> PatientSnapshot:
        bundle = self.store.everything(encounter_id)
        if bundle is None:
            raise EncounterNotFoundError(encounter_id)
        return snapshot_from_bundle(bundle, encounter_id, as_of, self.codes)

    def list_admitted_encounters(self, as_of: datetime) -> list[str]:
        return self.store.encounters_active_at(as_of)

    def list_orders(self, encounter_id: str) -> list[StandingOrder]:
        return [order_from_resource(r) for r in self.store.orders_for_encounter(encounter_id)]

    def get_order(self, order_id: str) -> StandingOrder:
        resource = self.store.get("ServiceRequest", order_id)
        if resource is None:
            raise GatewayError(f"unknown order {order_id}")
        return order_from_resource(resource)

    def create_order(self, order: StandingOrder) -> StandingOrder:
        self.store.create(order_to_resource(order))
        return order

    def update_order(self, order: StandingOrder, replaced_by: Optional[str] = None) -> StandingOrder:
        self.store.update(order_to_resource(order, replaced_by=replaced_by))
        return order
