"""Self-contained FHIR-shaped fixture: an in-memory resource store, the HTTP
app that serves it, and helpers to run that app in a background thread.

The store is the single source of truth during simulations and demos. Reads
are snapshot-consistent (deep copies under a lock) and mutations are
serialized. Optional per-resource latency injection reproduces the slow-EHR
condition the batch scheduler exists to avoid: every resource returned by any
endpoint charges the configured delay, so a 40-resource encounter at 200 ms
costs at least 8 s however it is fetched.
"""

from __future__ import annotations

import copy
import json
import threading
import time
from datetime import datetime
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .gateway import parse_ts

RESOURCE_TYPES = (
    "Patient",
    "Encounter",
    "Observation",
    "MedicationRequest",
    "Condition",
    "Procedure",
    "ServiceRequest",
)


class DatasetError(ValueError):
    pass


def _bundle(resources: list[dict], bundle_type: str = "searchset") -> dict:
    return {
        "resourceType": "Bundle",
        "type": bundle_type,
        "total": len(resources),
        "entry": [{"resource": r} for r in resources],
    }


class FixtureStore:
    """Keyed storage of FHIR-shaped resource dicts with encounter indexing."""

    def __init__(self, resources: Optional[list[dict]] = None):
        self._lock = threading.RLock()
        self._by_key: dict[tuple[str, str], dict] = {}
        self._encounter_index: dict[str, list[tuple[str, str]]] = {}
        self._seq = 0
        for resource in resources or []:
            self.create(resource)

    @classmethod
    def from_dataset(cls, dataset: dict) -> "FixtureStore":
        if dataset.get("resourceType") != "Bundle":
            raise DatasetError("dataset must be a Bundle document")
        return cls([entry["resource"] for entry in dataset.get("entry", [])])

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureStore":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                dataset = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"dataset {path} does not parse: {exc}") from exc
        return cls.from_dataset(dataset)

    def to_dataset(self) -> dict:
        with self._lock:
            resources = [copy.deepcopy(r) for r in self._by_key.values()]
        return _bundle(resources, bundle_type="collection")

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dataset(), fh, indent=1, sort_keys=True)

    @staticmethod
    def _encounter_ref(resource: dict) -> Optional[str]:
        if resource.get("resourceType") == "Encounter":
            return str(resource["id"])
        ref = resource.get("encounter", {}).get("reference")
        if ref:
            return str(ref).split("/")[-1]
        return None

    def create(self, resource: dict) -> dict:
        rtype = resource.get("resourceType")
        if rtype not in RESOURCE_TYPES:
            raise DatasetError(f"unsupported resourceType {rtype!r}")
        with self._lock:
            if "id" not in resource:
                self._seq += 1
                resource = {**resource, "id": f"{rtype.lower()}-{self._seq}"}
            key = (rtype, str(resource["id"]))
            if key in self._by_key:
                raise DatasetError(f"duplicate resource {key}")
            stored = copy.deepcopy(resource)
            self._by_key[key] = stored
            enc = self._encounter_ref(stored)
            if enc is not None:
                self._encounter_index.setdefault(enc, []).append(key)
            return copy.deepcopy(stored)

    def update(self, resource: dict) -> dict:
        key = (resource.get("resourceType"), str(resource.get("id")))
        with self._lock:
            if key not in self._by_key:
                raise KeyError(f"unknown resource {key}")
            self._by_key[key] = copy.deepcopy(resource)
            return copy.deepcopy(resource)

    def get(self, rtype: str, rid: str) -> Optional[dict]:
        with self._lock:
            found = self._by_key.get((rtype, str(rid)))
            return copy.deepcopy(found) if found else None

    def everything(self, encounter_id: str) -> Optional[dict]:
        """Bundle of the encounter, its patient, and every linked resource."""
        with self._lock:
            encounter = self._by_key.get(("Encounter", encounter_id))
            if encounter is None:
                return None
            resources = [copy.deepcopy(encounter)]
            patient_id = str(encounter.get("subject", {}).get("reference", "")).split("/")[-1]
            patient = self._by_key.get(("Patient", patient_id))
            if patient is not None:
                resources.append(copy.deepcopy(patient))
            for key in self._encounter_index.get(encounter_id, []):
                if key[0] != "Encounter":
                    resources.append(copy.deepcopy(self._by_key[key]))
        return _bundle(resources)

    def encounters_active_at(self, as_of: datetime) -> list[str]:
        """Encounters admitted at or before as_of and not yet discharged.

        Admission exactly at as_of counts; discharge at or before as_of
        excludes.
        """
        out = []
        with self._lock:
            for (rtype, rid), resource in self._by_key.items():
                if rtype != "Encounter":
                    continue
                period = resource.get("period", {})
                start = parse_ts(period["start"])
                end = parse_ts(period["end"]) if period.get("end") else None
                if start <= as_of and (end is None or end > as_of):
                    out.append(rid)
        return sorted(out)

    def orders_for_encounter(self, encounter_id: str) -> list[dict]:
        with self._lock:
            keys = self._encounter_index.get(encounter_id, [])
            return [copy.deepcopy(self._by_key[k]) for k in keys if k[0] == "ServiceRequest"]

    def resource_count(self, encounter_id: Optional[str] = None) -> int:
        with self._lock:
            if encounter_id is None:
                return len(self._by_key)
            bundle = self.everything(encounter_id)
            return bundle["total"] if bundle else 0


def build_fixture_app(store: FixtureStore, latency_per_resource: float = 0.0) -> FastAPI:
    """FHIR-shaped read endpoints plus ServiceRequest mutation endpoints."""
    app = FastAPI(title="fixture-ehr", docs_url=None, redoc_url=None)

    def charge(n_resources: int) -> None:
        if latency_per_resource > 0 and n_resources > 0:
            time.sleep(latency_per_resource * n_resources)

    @app.get("/health")
    def health():
        return {"status": "ok", "resources": store.resource_count()}

    @app.get("/Encounter/{encounter_id}/$everything")
    def everything(encounter_id: str):
        bundle = store.everything(encounter_id)
        if bundle is None:
            raise HTTPException(status_code=404, detail=f"unknown encounter {encounter_id}")
        charge(bundle["total"])
        return bundle

    @app.get("/Encounter")
    def search_encounters(active_at: str):
        try:
            as_of = parse_ts(active_at)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        ids = store.encounters_active_at(as_of)
        resources = [store.get("Encounter", i) for i in ids]
        charge(len(resources))
        return _bundle(resources)

    @app.get("/ServiceRequest")
    def search_orders(encounter: str):
        resources = store.orders_for_encounter(encounter)
        charge(len(resources))
        return _bundle(resources)

    @app.post("/ServiceRequest", status_code=201)
    async def create_order(request: Request):
        body = await request.json()
        if body.get("resourceType") != "ServiceRequest":
            raise HTTPException(status_code=422, detail="resourceType must be ServiceRequest")
        try:
            return store.create(body)
        except DatasetError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    @app.put("/ServiceRequest/{order_id}")
    async def update_order(order_id: str, request: Request):
        body = await request.json()
        if str(body.get("id")) != order_id:
            raise HTTPException(status_code=422, detail="body id must match path id")
        try:
            return store.update(body)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown order {order_id}")

    for rtype in RESOURCE_TYPES:

        def read_one(rid: str, rtype: str = rtype):
            resource = store.get(rtype, rid)
            if resource is None:
                raise HTTPException(status_code=404, detail=f"unknown {rtype} {rid}")
            charge(1)
            return resource

        app.get(f"/{rtype}/{{rid}}")(read_one)

    return app


class ThreadedServer:
    """uvicorn in a daemon thread, for integration tests and `serve`."""

    def __init__(self, app, host: str = "127.0.0.1", port: int = 0):
        import uvicorn

        self._config = uvicorn.Config(app, host=host, port=port, log_level="warning")
        self._server = uvicorn.Server(self._config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)

    @property
    def base_url(self) -> str:
        sock = self._server.servers[0].sockets[0]
        host, port = sock.getsockname()[:2]
        return f"http://{host}:{port}"

    def start(self, timeout: float = 10.0) -> "ThreadedServer":
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("fixture server failed to start")
            time.sleep(0.01)
        return self

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10.0)

    def __enter__(self) -> "ThreadedServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
