"""
Experiment orchestration: the phase pipeline, the ablation grid and the
flow-crossing fixture experiment.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import orjson
import pandas as pd

from src.config import (
    ABLATION_H_SWEEP,
    ABLATION_PRESETS,
    ABLATION_SELECTIONS,
    CROSSING_DEFAULTS,
    STATUS_MESSAGES,
)
from src.logic.datasets import Coupling, crossing_fixture, segment_intersection
from src.logic.experiment_config import AblationToggles, ExperimentConfig, config_hash, validate_config
from src.logic.flowcore import FlowConfig, acceleration_target, interp_time, velocity_target
from src.logic.handlers import PHASE_HANDLERS, RunContext, flow_checkpoints, phases_for
from src.logic.metrics import append_ledger_rows, read_ledger
from src.logic.sampling import FlowBundle
from src.logic.training import TrainConfig, train_caf, train_rf
from src.ui.main_view import display_status_message
from src.Utilities.utils import write_bytes_atomic

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class PipelineResult:
    root: Path
    config_hash: str
    phases: List[str]
    primary_label: str
    artifacts: Dict[str, List[Path]] = field(default_factory=dict)


def run_pipeline(
    config: ExperimentConfig,
    until: Optional[str] = None,
    force: bool = False,
    show_progress: bool = False,
) -> PipelineResult:
    """
    Run (or reuse from cache) every phase the config needs, in order.

    Args:
        config: Validated experiment config.
        until: Last phase to run; None runs the full pipeline.
        force: Rebuild phases even when the manifest says they are fresh.

    Raises:
        PhaseError: A phase failed; later phases are not attempted.
    """
    ctx = RunContext(config, force=force, show_progress=show_progress)
    plan = phases_for(config, until)
    artifacts = {}
    for phase in plan:
        artifacts[phase] = PHASE_HANDLERS[phase](ctx)
    if until is None:
        display_status_message("success", STATUS_MESSAGES["pipeline_done"], path=ctx.root)
    return PipelineResult(ctx.root, ctx.config_hash, plan, flow_checkpoints(ctx)[0][0], artifacts)


# --- ablation grid ---


def ablation_cells(labels: Optional[Sequence[str]] = None, h_sweep: Optional[Sequence[float]] = None) -> List[tuple]:
    """(cell label, toggles) for the labeled configurations plus full-CAF h-sweep rows."""
    labels = list(ABLATION_PRESETS) if labels is None else list(labels)
    h_sweep = ABLATION_H_SWEEP if h_sweep is None else list(h_sweep)
    cells = [(label, AblationToggles.from_label(label)) for label in labels]
    cells += [(f"h={h:g}", AblationToggles(acceleration_on=True, ivc_on=True, reflow_on=True, h=h)) for h in h_sweep]
    return cells


def cell_config(base: ExperimentConfig, toggles: AblationToggles) -> ExperimentConfig:
    """Base config with the cell's toggles, evaluated at N=1 on the grid metrics."""
    data = base.model_dump()
    data["ablation"] = toggles.model_dump()
    data["flow"]["n_steps"] = 1
    data["metrics"]["selections"] = list(ABLATION_SELECTIONS)
    return validate_config(data)


def _run_cell(config_data: Dict[str, Any], force: bool) -> Dict[str, Any]:
    """Worker entry point; takes plain data so it pickles across processes.

    Rows carry the bare metric name; the grid prefixes them with cell labels.
    """
    config = validate_config(config_data)
    result = run_pipeline(config, until="metrics", force=force)
    ledger = read_ledger(result.root / "metrics.csv")
    prefix = f"{result.primary_label}/"
    rows = ledger[ledger["name"].str.startswith(prefix)]
    return {
        "config_hash": result.config_hash,
        "rows": [[r.name[len(prefix):], r.value, r.ci_halfwidth, r.n_samples, r.config_hash] for r in rows.itertuples()],
    }


def run_ablation_grid(
    base: ExperimentConfig,
    labels: Optional[Sequence[str]] = None,
    h_sweep: Optional[Sequence[float]] = None,
    jobs: int = 1,
    force: bool = False,
    ledger_path: Optional[Path] = None,
) -> Dict[str, Any]:
    """
    Run every ablation cell and append its metrics to one grid ledger.

    Each cell is an ordinary pipeline run with its own out/<hash>/ subtree, so
    its ledger rows resolve back to an exact config. Cells that resolve to the
    same config (D and h=1, for instance) run once and share that run's rows
    under each label. Failed cells are recorded in ablation.json and the grid
    carries on.
    """
    cells = ablation_cells(labels, h_sweep)
    base_hash = config_hash(base)
    grid_root = Path(base.output_dir) / "ablation" / base_hash
    ledger_path = ledger_path or grid_root / "metrics.csv"
    if ledger_path.exists():
        ledger_path.unlink()

    configs = {}
    summary = []
    for label, toggles in cells:
        try:
            configs[label] = cell_config(base, toggles)
        except ValueError as e:
            summary.append({"label": label, "status": f"config error: {e}", "config_hash": None, "same_as": None})
            display_status_message("error", STATUS_MESSAGES["ablation_cell_failed"], label=label, error=e)

    # the first label per config hash runs; later labels with that hash reuse it
    first_by_hash: Dict[str, str] = {}
    runner = {label: first_by_hash.setdefault(config_hash(cfg), label) for label, cfg in configs.items()}
    distinct = [label for label in configs if runner[label] == label]

    outcomes: Dict[str, Any] = {}
    if jobs <= 1:
        for label in distinct:
            try:
                outcomes[label] = _run_cell(configs[label].model_dump(), force)
            except Exception as e:
                outcomes[label] = e
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {label: pool.submit(_run_cell, configs[label].model_dump(), force) for label in distinct}
            for label, future in futures.items():
                try:
                    outcomes[label] = future.result()
                except Exception as e:
                    outcomes[label] = e

    n_rows = 0
    for label, _ in cells:
        if label not in configs:
            continue
        outcome = outcomes[runner[label]]
        same_as = runner[label] if runner[label] != label else None
        if isinstance(outcome, Exception):
            summary.append(
                {"label": label, "status": f"failed: {outcome}", "config_hash": config_hash(configs[label]), "same_as": same_as}
            )
            display_status_message("error", STATUS_MESSAGES["ablation_cell_failed"], label=label, error=outcome)
            continue
        rows = [[f"{label}/{row[0]}", *row[1:]] for row in outcome["rows"]]
        append_ledger_rows(rows, ledger_path)
        n_rows += len(rows)
        summary.append({"label": label, "status": "ok", "config_hash": outcome["config_hash"], "same_as": same_as})

    order = [label for label, _ in cells]
    summary.sort(key=lambda cell: order.index(cell["label"]))
    write_bytes_atomic(grid_root / "ablation.json", orjson.dumps(summary, option=orjson.OPT_INDENT_2))
    display_status_message("success", STATUS_MESSAGES["ablation_done"], count=n_rows, path=ledger_path)
    return {"ledger": ledger_path, "cells": summary}


# --- flow-crossing fixture ---


def replicate_coupling(coupling: Coupling, replicas: int) -> Coupling:
    """Repeat every pair so a full batch draws fresh times for each pair on every iteration."""
    if replicas < 1:
        raise ValueError(f"replicas must be >= 1, got {replicas}")
    return Coupling(
        np.repeat(coupling.x0, replicas, axis=0),
        np.repeat(coupling.x1, replicas, axis=0),
        coupling.mode,
        f"{coupling.provenance}:x{replicas}" if coupling.provenance else "",
    )


def crossing_field_error(bundle: FlowBundle, fixture: Coupling, h: float) -> float:
    """
    Mean error of the trained field where the two fixture paths meet.

    Both paths are at the same point at the same time there, so a field that
    sees only (x_t, t) returns one vector for two different targets. RF is
    compared with x1 - x0 at the straight-line crossing; CAF with the pair's
    acceleration at the crossing time of its own interpolant, conditioned on
    the velocity network's estimate v(x0, 0).
    """
    hit = segment_intersection(fixture.x0[0], fixture.x1[0], fixture.x0[1], fixture.x1[1])
    if hit is None:
        raise ValueError("fixture paths do not cross")
    fraction, point = hit
    points = np.repeat(point[None, :], len(fixture), axis=0)
    if bundle.kind == "rf":
        predicted = bundle.regressed(points, fraction)
        target = fixture.x1 - fixture.x0
    else:
        t_cross = interp_time(fraction, h)
        v0 = bundle.initial_velocity(fixture.x0)
        predicted = bundle.regressed(points, t_cross, v0)
        target = acceleration_target(fixture.x0, fixture.x1, velocity_target(fixture.x0, fixture.x1, h))
    return float(np.linalg.norm(predicted - target, axis=1).mean())


def run_crossing_experiment(
    seed: int = 0,
    h: float = CROSSING_DEFAULTS["h"],
    iterations: int = CROSSING_DEFAULTS["iterations"],
    eval_steps: Sequence[int] = CROSSING_DEFAULTS["eval_steps"],
    show_progress: bool = False,
) -> pd.DataFrame:
    """
    Train RF, CAF without IVC and CAF with IVC on the two crossing pairs.

    Each model reports its mean endpoint error at every N in eval_steps and,
    in crossing_error, the error of its trained field at the crossing point.
    The fixture is replicated so every iteration is a full batch; the step
    size follows the configured schedule.
    """
    fixture = crossing_fixture()
    data = replicate_coupling(fixture, CROSSING_DEFAULTS["replicas"])
    base = {
        "iterations": iterations,
        "batch_size": len(data),
        "lr": CROSSING_DEFAULTS["lr"],
        "lr_schedule": CROSSING_DEFAULTS["lr_schedule"],
        "seed": seed,
        "hidden_layers": CROSSING_DEFAULTS["hidden_layers"],
        "hidden_units": CROSSING_DEFAULTS["hidden_units"],
        "activation": CROSSING_DEFAULTS["activation"],
        "flow": FlowConfig(h=h).model_dump(),
    }
    rf_model, _ = train_rf(data, TrainConfig.model_validate(base), show_progress)
    bundles = [FlowBundle("rf", rf_model, label="rf")]
    for ivc in (False, True):
        models = train_caf(data, TrainConfig.model_validate({**base, "ivc": ivc}), show_progress)
        bundles.append(FlowBundle("caf", models.velocity, models.acceleration, ivc, "caf_ivc" if ivc else "caf_no_ivc"))

    rows = []
    for bundle in bundles:
        at_crossing = crossing_field_error(bundle, fixture, h)
        for n_steps in eval_steps:
            x1_hat = bundle.endpoint(fixture.x0, n_steps)
            error = float(np.linalg.norm(x1_hat - fixture.x1, axis=1).mean())
            rows.append({"model": bundle.label, "n_steps": int(n_steps), "mean_error": error, "crossing_error": at_crossing})
            display_status_message("info", STATUS_MESSAGES["crossing_result"], model=bundle.label, error=error, steps=n_steps)
    return pd.DataFrame(rows, columns=["model", "n_steps", "mean_error", "crossing_error"])
