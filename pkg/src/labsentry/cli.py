"""Command line entry points.

Subcommands map one-to-one onto the package's operating modes: serve the
gated order-entry API, run a simulated pilot, score silent predictions,
analyze exported trial logs, fit and calibrate a model, and project test
volume savings. Every failure exits non-zero with a one-line message on
stderr rather than a traceback.
"""

from __future__ import annotations

import functools
import json
from dataclasses import replace
from pathlib import Path

import click

from .cohort import CohortConfig, ConfigError, run_pilot
from .domain import ThresholdRegistry, default_registry
from .gateway import GatewayError, parse_ts
from .predictor import (
    ConfigurationError,
    calibrate_threshold,
    load_dataset,
    silent_eval,
    train,
)
from .report import build_report, render_text
from .stats import savings
from .trial import EncounterRecord, EventLog

_FAILURES = (ConfigError, ConfigurationError, GatewayError, ValueError, OSError)


def _structured_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except _FAILURES as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}")

    return wrapper


def _load_cohort_config(path: str | None, seed: int | None) -> CohortConfig:
    if path is None:
        config = CohortConfig()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            config = CohortConfig.from_dict(json.load(fh))
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def _echo_json(payload: dict) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@click.group()
def main():
    """CBC lab-stability prediction, alert gating, and pilot analysis."""


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Service config JSON (dataset, artifact, data dir, bind address).")
@_structured_errors
def serve(config_path: str):
    """Run the HTTP service with the background prediction scheduler."""
    import uvicorn

    from .service import ServiceConfig, compose

    config = ServiceConfig.from_file(config_path)
    app, state = compose(config, run_scheduler=True)
    click.echo(f"model {state.artifact.model_version}; "
               f"serving on http://{config.host}:{config.port}", err=True)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Cohort config JSON; defaults are used if omitted.")
@click.option("--duration", type=float, default=60.0, show_default=True,
              help="Pilot length in days.")
@click.option("--seed", type=int, default=None, help="Override the cohort seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Directory for events.jsonl, encounters.jsonl, report.json/.txt.")
@click.option("--silent", is_flag=True,
              help="Log triggers without displaying alerts (pre-pilot mode).")
@_structured_errors
def simulate(config_path, duration, seed, out_dir, silent):
    """Run an encounter-randomized pilot over a simulated cohort."""
    config = _load_cohort_config(config_path, seed)
    result = run_pilot(config, duration_days=duration, display_enabled=not silent)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.event_log.export(out / "events.jsonl")
    with open(out / "encounters.jsonl", "w", encoding="utf-8") as fh:
        for record in result.encounter_records:
            fh.write(json.dumps(record.to_record(), sort_keys=True) + "\n")
    report = result.build_report()
    (out / "report.json").write_bytes(report.to_json_bytes())
    (out / "report.txt").write_text(render_text(report), encoding="utf-8")
    events = result.event_log.events()
    click.echo(f"{len(result.encounter_records)} encounters, {len(events)} alert events "
               f"({report.alerts_displayed} displayed, {report.alerts_silent} silent) "
               f"-> {out}")


@main.command("silent-eval")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Cohort config JSON; defaults are used if omitted.")
@click.option("--duration", type=float, default=14.0, show_default=True,
              help="Silent phase length in days.")
@click.option("--seed", type=int, default=None, help="Override the cohort seed.")
@click.option("--from", "window_from", default=None,
              help="Only score predictions computed at or after this ISO time.")
@click.option("--to", "window_to", default=None,
              help="Only score predictions computed before this ISO time.")
@_structured_errors
def silent_eval_cmd(config_path, duration, seed, window_from, window_to):
    """Score silent-phase predictions against realized next results."""
    config = _load_cohort_config(config_path, seed)
    result = run_pilot(config, duration_days=duration, display_enabled=False)
    lo = parse_ts(window_from) if window_from else None
    hi = parse_ts(window_to) if window_to else None
    predictions = [
        p
        for preds in result.predictions.values()
        for p in preds
        if (lo is None or p.computed_at >= lo) and (hi is None or p.computed_at < hi)
    ]
    if not predictions:
        raise click.ClickException("no predictions fall inside the requested window")
    report = silent_eval(predictions, result.lab_series(), result.artifact,
                         default_registry())
    _echo_json(report.to_dict())


@main.command()
@click.option("--events", "events_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--encounters", "encounters_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Emit report JSON instead of text.")
@_structured_errors
def analyze(events_path, encounters_path, as_json):
    """Build the trial outcome report from exported event and encounter logs."""
    log = EventLog.load(events_path)
    records = []
    with open(encounters_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(EncounterRecord.from_record(json.loads(line)))
    report = build_report(log.events(), records)
    if as_json:
        click.echo(report.to_json_bytes().decode("utf-8"))
    else:
        click.echo(render_text(report))


@main.command()
@click.option("--train", "train_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--validate", "validate_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--target-ppv", type=float, default=0.90, show_default=True)
@click.option("--thresholds", "thresholds_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Stability thresholds JSON; package defaults if omitted.")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="Write the calibrated model artifact here.")
@_structured_errors
def calibrate(train_path, validate_path, target_ppv, thresholds_path, out_path):
    """Fit per-component models and pick display thresholds at a target PPV."""
    registry = (ThresholdRegistry.from_file(thresholds_path)
                if thresholds_path else default_registry())
    train_rows = load_dataset(train_path)
    validate_rows = load_dataset(validate_path)
    components = [c for c in registry.panel()
                  if any(c in row.labels for row in train_rows)]
    if not components:
        raise click.ClickException("training data has no labels for any panel component")
    artifact = train(train_rows, components=components)
    calibration = calibrate_threshold(artifact, validate_rows, target_ppv=target_ppv)
    artifact = artifact.with_calibration(calibration)
    if out_path:
        artifact.save(out_path)
    _echo_json({
        "model_version": artifact.model_version,
        "target_ppv": target_ppv,
        "components": {
            code: {
                "threshold": artifact.components[code].threshold,
                "validation_ppv": calibration.ppv.get(code),
                "validation_recall": calibration.recall.get(code),
                "flags": list(calibration.flags.get(code, ())),
            }
            for code in components
        },
        "artifact_path": out_path,
    })


@main.command("savings")
@click.option("--annual", type=int, required=True,
              help="Annual CBC volume across the system.")
@click.option("--repetitive", type=float, required=True,
              help="Fraction of volume that is repetitive inpatient testing.")
@click.option("--reduction", type=float, required=True,
              help="Relative reduction achieved on repetitive tests.")
@click.option("--charge", type=float, default=0.0, show_default=True,
              help="Unit charge in dollars; 0 reports volume only.")
@_structured_errors
def savings_cmd(annual, repetitive, reduction, charge):
    """Project avoided tests and dollars from a relative reduction."""
    result = savings(annual, repetitive, reduction, unit_charge=charge)
    _echo_json({"tests_avoided": result.tests_avoided, "dollars": result.dollars})


if __name__ == "__main__":
    main()
