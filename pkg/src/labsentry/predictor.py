"""Per-component stability model: training, precision-targeted threshold
calibration, prediction with conservative panel aggregation, and silent
prospective evaluation.

The reference model is one L2-regularized logistic regression per CBC
component over the documented feature layout. The artifact -- coefficients,
per-component decision thresholds, metadata, content hash -- is a versioned
JSON file and is immutable once loaded. Panel probability is the minimum over
component probabilities, and a component with no usable history or no
trained model forces it to zero: an alert must never fire on fabricated
history.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .domain import LabSeries, ThresholdRegistry, label_stability
from .features import NUMERIC_COLUMNS, FeatureConfig, FeatureVector
from .logistic import LogisticModel, predict_proba_linear

DATASET_SCHEMA = "training-row/1"
ARTIFACT_SCHEMA = "stability-model/1"


class ConfigurationError(RuntimeError):
    """Pipeline asked to predict without a loaded model artifact."""


@dataclass(frozen=True)
class TrainingRow:
    features: FeatureVector
    labels: Mapping[str, bool]  # component -> next result labeled stable


@dataclass(frozen=True)
class TrainConfig:
    l2: float = 1e-2
    min_class_count: int = 5


@dataclass(frozen=True)
class ComponentModel:
    trained: bool
    intercept: float = 0.0
    weights: tuple[float, ...] = ()
    threshold: float = 0.5
    threshold_flags: tuple[str, ...] = ()
    untrainable_reason: Optional[str] = None

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")
        if self.threshold == 1.0 and self.trained and "unattainable" not in self.threshold_flags:
            raise ValueError("threshold 1.0 requires the unattainable flag")


@dataclass(frozen=True)
class ModelArtifact:
    model_version: str
    version_seq: int
    components: Mapping[str, ComponentModel]
    feature_columns: tuple[str, ...]
    k: int
    dataset_hash: str
    trained_at: str

    def to_dict(self) -> dict:
        body = {
            "schema": ARTIFACT_SCHEMA,
            "model_version": self.model_version,
            "version_seq": self.version_seq,
            "feature_columns": list(self.feature_columns),
            "k": self.k,
            "dataset_hash": self.dataset_hash,
            "trained_at": self.trained_at,
            "components": {
                code: {
                    "trained": cm.trained,
                    "intercept": cm.intercept,
                    "weights": list(cm.weights),
                    "threshold": cm.threshold,
                    "threshold_flags": list(cm.threshold_flags),
                    "untrainable_reason": cm.untrainable_reason,
                }
                for code, cm in sorted(self.components.items())
            },
        }
        body["content_hash"] = _content_hash(body)
        return body

    def content_hash(self) -> str:
        return self.to_dict()["content_hash"]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelArtifact":
        components = {
            code: ComponentModel(
                trained=entry["trained"],
                intercept=entry["intercept"],
                weights=tuple(entry["weights"]),
                threshold=entry["threshold"],
                threshold_flags=tuple(entry["threshold_flags"]),
                untrainable_reason=entry.get("untrainable_reason"),
            )
            for code, entry in raw["components"].items()
        }
        return cls(
            model_version=raw["model_version"],
            version_seq=int(raw["version_seq"]),
            components=components,
            feature_columns=tuple(raw["feature_columns"]),
            k=int(raw["k"]),
            dataset_hash=raw["dataset_hash"],
            trained_at=raw["trained_at"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "ModelArtifact":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def with_calibration(self, result: "CalibrationResult") -> "ModelArtifact":
        components = dict(self.components)
        for code, tau in result.thresholds.items():
            components[code] = replace(
                components[code], threshold=tau, threshold_flags=result.flags.get(code, ())
            )
        return replace(self, components=components)


def _content_hash(body: dict) -> str:
    # trained_at is wall time; determinism over identical data requires
    # hashing everything except it (and the hash field itself).
    hashable = {k: v for k, v in body.items() if k not in ("trained_at", "content_hash")}
    canonical = json.dumps(hashable, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def dataset_hash(rows: Sequence[TrainingRow]) -> str:
    canonical = json.dumps(
        [
            {"features": row.features.to_dict(), "labels": dict(sorted(row.labels.items()))}
            for row in rows
        ],
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_dataset(rows: Sequence[TrainingRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": DATASET_SCHEMA, "columns": list(NUMERIC_COLUMNS)}) + "\n")
        for row in rows:
            fh.write(
                json.dumps(
                    {"features": row.features.to_dict(), "labels": dict(sorted(row.labels.items()))},
                    sort_keys=True,
                )
                + "\n"
            )


def load_dataset(path: str | Path) -> list[TrainingRow]:
    rows: list[TrainingRow] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != DATASET_SCHEMA:
            raise ValueError(f"unsupported dataset schema {header.get('schema')!r}")
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            rows.append(
                TrainingRow(
                    features=FeatureVector.from_dict(raw["features"]),
                    labels={k: bool(v) for k, v in raw["labels"].items()},
                )
            )
    return rows


def train(
    rows: Sequence[TrainingRow],
    components: Sequence[str],
    config: TrainConfig = TrainConfig(),
    previous: Optional[ModelArtifact] = None,
) -> ModelArtifact:
    """Fit one logistic model per component; single-class or too-sparse
    components are flagged untrainable and excluded rather than guessed at."""
    if not rows:
        raise ValueError("training dataset is empty")
    trained: dict[str, ComponentModel] = {}
    for code in components:
        X_rows, y_rows = [], []
        for row in rows:
            if code in row.labels and row.features.predictable(code):
                X_rows.append(row.features.numeric(code))
                y_rows.append(1.0 if row.labels[code] else 0.0)
        n_pos = sum(1 for y in y_rows if y == 1.0)
        n_neg = len(y_rows) - n_pos
        if min(n_pos, n_neg) < config.min_class_count:
            reason = (
                f"needs >= {config.min_class_count} rows per class, "
                f"got {n_pos} stable / {n_neg} unstable"
            )
            trained[code] = ComponentModel(trained=False, untrainable_reason=reason)
            continue
        model = LogisticModel(l2=config.l2).fit(np.asarray(X_rows), np.asarray(y_rows))
        params = model.to_params()
        trained[code] = ComponentModel(
            trained=True,
            intercept=params["intercept"],
            weights=tuple(params["weights"]),
        )

    seq = previous.version_seq + 1 if previous else 1
    return ModelArtifact(
        model_version=f"logistic-{seq}",
        version_seq=seq,
        components=trained,
        feature_columns=NUMERIC_COLUMNS,
        k=FeatureConfig().k,
        dataset_hash=dataset_hash(rows),
        trained_at=datetime.now(timezone.utc).isoformat(),
    )


@dataclass(frozen=True)
class PredictionResult:
    p: Mapping[str, float]
    panel_probability: float
    not_predictable: tuple[str, ...]


def predict(artifact: Optional[ModelArtifact], features: FeatureVector,
            panel: Sequence[str]) -> PredictionResult:
    """Per-component stability probabilities and their conservative (min)
    panel aggregate; any unpredictable or untrained component zeroes the
    panel."""
    if artifact is None:
        raise ConfigurationError("no model artifact loaded")
    p: dict[str, float] = {}
    missing: list[str] = []
    for code in panel:
        cm = artifact.components.get(code)
        if cm is None or not cm.trained or not features.predictable(code):
            missing.append(code)
            continue
        prob = predict_proba_linear(cm.intercept, cm.weights, features.numeric(code))
        p[code] = min(1.0, max(0.0, prob))
    panel_probability = 0.0 if missing or not p else min(p.values())
    return PredictionResult(p=p, panel_probability=panel_probability, not_predictable=tuple(missing))


@dataclass(frozen=True)
class CalibrationResult:
    thresholds: Mapping[str, float]
    flags: Mapping[str, tuple[str, ...]]
    ppv: Mapping[str, Optional[float]]
    recall: Mapping[str, Optional[float]]


def _ppv_recall_at(scored: list[tuple[float, bool]], tau: float) -> tuple[Optional[float], Optional[float]]:
    tp = sum(1 for s, stable in scored if s > tau and stable)
    fp = sum(1 for s, stable in scored if s > tau and not stable)
    fn = sum(1 for s, stable in scored if s <= tau and stable)
    ppv = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None
    return ppv, recall


def calibrate_threshold(
    artifact: ModelArtifact,
    validation: Sequence[TrainingRow],
    target_ppv: float = 0.90,
) -> CalibrationResult:
    """Smallest per-component threshold whose validation PPV meets the target.

    Candidate cut-points are the midpoints between adjacent distinct scores
    plus half the lowest score; a call is score strictly above the threshold.
    Components where no cut-point reaches the target get threshold 1.0 and
    the unattainable flag, meaning they can never alert.
    """
    if not validation:
        raise ValueError("validation set is empty")
    if not 0.0 < target_ppv <= 1.0:
        raise ValueError("target_ppv must lie in (0, 1]")

    thresholds: dict[str, float] = {}
    flags: dict[str, tuple[str, ...]] = {}
    ppvs: dict[str, Optional[float]] = {}
    recalls: dict[str, Optional[float]] = {}
    for code, cm in artifact.components.items():
        if not cm.trained:
            thresholds[code] = 1.0
            flags[code] = ("unattainable", "untrained")
            ppvs[code] = recalls[code] = None
            continue
        scored: list[tuple[float, bool]] = []
        for row in validation:
            if code in row.labels and row.features.predictable(code):
                prob = predict_proba_linear(cm.intercept, cm.weights, row.features.numeric(code))
                scored.append((prob, bool(row.labels[code])))
        if not scored:
            thresholds[code] = 1.0
            flags[code] = ("unattainable", "no_validation_rows")
            ppvs[code] = recalls[code] = None
            continue
        distinct = sorted({s for s, _ in scored})
        candidates = [distinct[0] / 2.0] + [
            (a + b) / 2.0 for a, b in zip(distinct, distinct[1:])
        ]
        chosen = None
        for tau in candidates:  # ascending, so first hit is the smallest
            ppv, _ = _ppv_recall_at(scored, tau)
            if ppv is not None and ppv >= target_ppv:
                chosen = tau
                break
        if chosen is None:
            thresholds[code] = 1.0
            flags[code] = ("unattainable",)
            ppvs[code], recalls[code] = _ppv_recall_at(scored, 1.0)
        else:
            thresholds[code] = chosen
            flags[code] = ()
            ppvs[code], recalls[code] = _ppv_recall_at(scored, chosen)
    return CalibrationResult(thresholds=thresholds, flags=flags, ppv=ppvs, recall=recalls)


class EvalMode(str, Enum):
    RETROSPECTIVE = "retrospective"
    SILENT_PROSPECTIVE = "silent_prospective"


@dataclass(frozen=True)
class ComponentEval:
    tp: int
    fp: int
    fn: int
    tn: int
    censored: int
    flags: tuple[str, ...] = ()

    @property
    def ppv(self) -> Optional[float]:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp > 0 else None

    @property
    def recall(self) -> Optional[float]:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn > 0 else None


@dataclass(frozen=True)
class EvalReport:
    components: Mapping[str, ComponentEval]
    window_start: datetime
    window_end: datetime
    mode: EvalMode

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "window": [self.window_start.isoformat(), self.window_end.isoformat()],
            "components": {
                code: {
                    "tp": ce.tp,
                    "fp": ce.fp,
                    "fn": ce.fn,
                    "tn": ce.tn,
                    "censored": ce.censored,
                    "ppv": ce.ppv,
                    "recall": ce.recall,
                    "flags": list(ce.flags),
                }
                for code, ce in sorted(self.components.items())
            },
        }


def silent_eval(
    predictions: Iterable,
    series_by_encounter: Mapping[str, LabSeries],
    artifact: ModelArtifact,
    registry: ThresholdRegistry,
    mode: EvalMode = EvalMode.SILENT_PROSPECTIVE,
) -> EvalReport:
    """Score logged predictions against the realized next results.

    A prediction with p_c above the component threshold is a positive call;
    ground truth is the stability label of the next observed result after
    computed_at versus the last one at or before it. Predictions whose next
    result never arrives are censored and counted, not guessed.
    """
    counts = {code: {"tp": 0, "fp": 0, "fn": 0, "tn": 0, "censored": 0} for code in artifact.components}
    times: list[datetime] = []
    for pred in predictions:
        times.append(pred.computed_at)
        series = series_by_encounter.get(pred.encounter_id)
        for code, prob in pred.p.items():
            if code not in counts:
                continue
            c = counts[code]
            prev = series.last_before(code, pred.computed_at) if series else None
            nxt = series.first_after(code, pred.computed_at) if series else None
            if prev is None or nxt is None:
                c["censored"] += 1
                continue
            stable = label_stability(prev, nxt, registry.thresholds_for(code)).stable
            called = prob > artifact.components[code].threshold
            if called and stable:
                c["tp"] += 1
            elif called:
                c["fp"] += 1
            elif stable:
                c["fn"] += 1
            else:
                c["tn"] += 1

    components = {}
    for code, c in counts.items():
        flags = ("ppv_undefined",) if c["tp"] + c["fp"] == 0 else ()
        components[code] = ComponentEval(
            tp=c["tp"], fp=c["fp"], fn=c["fn"], tn=c["tn"], censored=c["censored"], flags=flags
        )
    if not times:
        start = end = datetime.now(timezone.utc)
    else:
        start, end = min(times), max(times)
    return EvalReport(components=components, window_start=start, window_end=end, mode=mode)
