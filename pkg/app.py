"""
Command-line entry point for the CAF desk application.

    python app.py pipeline --config configs/minimal.yaml
    python app.py ablate --config configs/two_moons.yaml --jobs 4
    python app.py crossing --seed 0
"""

from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import typer
from dotenv import load_dotenv
from pydantic import ValidationError

from src.config import EXIT_CODES, RUNTIME_DEFAULTS, STATUS_MESSAGES
from src.logic.errors import CafError, ConfigError, PhaseError
from src.logic.experiment_config import ExperimentConfig, RuntimeSettings, load_config
from src.logic.metrics import read_ledger
from src.logic.pipeline import run_ablation_grid, run_crossing_experiment, run_pipeline
from src.ui.main_view import display_status_message, render_ablation_summary, render_crossing_results, render_ledger
from src.Utilities.utils import setup_logging

# Load environment variables
load_dotenv()

app = typer.Typer(add_completion=False, no_args_is_help=True, help="Constant Acceleration Flow desk experiments.")

ConfigOption = typer.Option(..., "--config", "-c", exists=True, dir_okay=False, help="Experiment YAML file.")
SeedOption = typer.Option(None, "--seed", help="Override the config seed.")
OutOption = typer.Option(None, "--out", help="Output root (default: config output_dir or CAFLOW_OUT_ROOT).")
ForceOption = typer.Option(False, "--force", help="Rebuild phases even if cached.")
StepsOption = typer.Option(None, "--steps", min=1, help="Sampling steps N.")
HOption = typer.Option(None, "--h", help="Initial-velocity scale h.")


def _settings() -> RuntimeSettings:
    settings = RuntimeSettings()
    setup_logging(settings.log_level)
    return settings


@contextmanager
def _exit_codes():
    """Map config errors to exit 2 and phase failures to exit 3."""
    try:
        yield
    except (ConfigError, ValidationError) as e:
        display_status_message("error", STATUS_MESSAGES["config_error"], error=e)
        raise typer.Exit(EXIT_CODES["config_error"])
    except PhaseError as e:
        display_status_message("error", STATUS_MESSAGES["phase_failed"], phase=e.phase, path=e.artifact_path, error=e.cause)
        raise typer.Exit(EXIT_CODES["phase_failure"])
    except CafError as e:
        display_status_message("error", str(e))
        raise typer.Exit(EXIT_CODES["phase_failure"])


def _load(
    settings: RuntimeSettings,
    config_path: Path,
    seed: Optional[int],
    out: Optional[Path],
    steps: Optional[int],
    h: Optional[float],
) -> ExperimentConfig:
    config = load_config(config_path)
    if out is None and config.output_dir == RUNTIME_DEFAULTS["out_root"]:
        out = Path(settings.out_root)
    return config.with_overrides(
        **{"seed": seed, "output_dir": str(out) if out is not None else None, "flow.n_steps": steps, "ablation.h": h}
    )


def _run(until: Optional[str], config_path, seed, out, force, steps, h) -> None:
    settings = _settings()
    with _exit_codes():
        config = _load(settings, config_path, seed, out, steps, h)
        if until == "plot" and config.source_spec().dim != 2:
            raise ConfigError(f"plots are 2-D only; this config has dim={config.source_spec().dim}")
        result = run_pipeline(config, until=until, force=force, show_progress=settings.show_progress)
        if until in (None, "metrics"):
            render_ledger(read_ledger(result.root / "metrics.csv"), title=f"metrics {result.config_hash[:12]}")


@app.command("train-rf")
def train_rf_command(config: Path = ConfigOption, seed: Optional[int] = SeedOption, out: Optional[Path] = OutOption, force: bool = ForceOption):
    """Train the 1-rectified-flow velocity network."""
    _run("train-rf", config, seed, out, force, None, None)


@app.command("reflow")
def reflow_command(config: Path = ConfigOption, seed: Optional[int] = SeedOption, out: Optional[Path] = OutOption, force: bool = ForceOption):
    """Simulate the trained RF to build the deterministic coupling."""
    _run("reflow", config, seed, out, force, None, None)


@app.command("train-caf")
def train_caf_command(
    config: Path = ConfigOption, seed: Optional[int] = SeedOption, out: Optional[Path] = OutOption, force: bool = ForceOption, h: Optional[float] = HOption
):
    """Train the CAF velocity and acceleration networks."""
    _run("train-caf", config, seed, out, force, None, h)


@app.command("sample")
def sample_command(
    config: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    force: bool = ForceOption,
    steps: Optional[int] = StepsOption,
    h: Optional[float] = HOption,
):
    """Write forward sampling trajectories."""
    _run("sample", config, seed, out, force, steps, h)


@app.command("invert")
def invert_command(
    config: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    force: bool = ForceOption,
    steps: Optional[int] = StepsOption,
    h: Optional[float] = HOption,
):
    """Write inversion trajectories (data back to noise)."""
    _run("invert", config, seed, out, force, steps, h)


@app.command("metrics")
def metrics_command(
    config: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    force: bool = ForceOption,
    steps: Optional[int] = StepsOption,
    h: Optional[float] = HOption,
):
    """Compute the metrics ledger and print it."""
    _run("metrics", config, seed, out, force, steps, h)


@app.command("plot")
def plot_command(
    config: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    force: bool = ForceOption,
    steps: Optional[int] = StepsOption,
    h: Optional[float] = HOption,
):
    """Render the trajectory SVG (2-D data only)."""
    _run("plot", config, seed, out, force, steps, h)


@app.command("pipeline")
def pipeline_command(
    config: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    force: bool = ForceOption,
    steps: Optional[int] = StepsOption,
    h: Optional[float] = HOption,
):
    """Run every phase: train-rf, reflow, train-caf, sample, invert, metrics, plot."""
    _run(None, config, seed, out, force, steps, h)


@app.command("ablate")
def ablate_command(
    config: Path = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    force: bool = ForceOption,
    jobs: Optional[int] = typer.Option(None, "--jobs", "-j", min=1, help="Parallel cells (default CAFLOW_JOBS)."),
    labels: Optional[str] = typer.Option(None, "--labels", help="Comma-separated cell labels, e.g. A,B,E."),
    no_sweep: bool = typer.Option(False, "--no-sweep", help="Skip the h-sweep rows."),
):
    """Run the ablation grid (cells A-F plus the h sweep) into one ledger."""
    settings = _settings()
    with _exit_codes():
        base = _load(settings, config, seed, out, None, None)
        label_list = [s.strip() for s in labels.split(",")] if labels else None
        result = run_ablation_grid(
            base, label_list, [] if no_sweep else None, jobs=jobs or settings.jobs, force=force
        )
        render_ablation_summary(result["cells"])
        if result["ledger"].exists():
            render_ledger(read_ledger(result["ledger"]), title="ablation ledger")


@app.command("crossing")
def crossing_command(
    seed: int = typer.Option(0, "--seed"),
    h: Optional[float] = HOption,
    iterations: Optional[int] = typer.Option(None, "--iterations", min=1),
    out: Optional[Path] = typer.Option(None, "--out", help="Optional CSV for the results table."),
):
    """Train RF and CAF (with and without IVC) on the crossing fixture and report endpoint errors."""
    settings = _settings()
    kwargs = {k: v for k, v in {"h": h, "iterations": iterations}.items() if v is not None}
    with _exit_codes():
        results = run_crossing_experiment(seed=seed, show_progress=settings.show_progress, **kwargs)
    render_crossing_results(results)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        results.to_csv(out, index=False)


def main():
    """Main application entry point."""
    app()


if __name__ == "__main__":
    main()
