"""
Pipeline phase handlers for the CAF desk application.
Each handler builds one phase's artifacts under out/<config-hash>/ and is
skipped when the phase manifest shows its inputs and outputs unchanged.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import orjson

from src.config import OUTPUT_LAYOUT, STATUS_MESSAGES
from src.logic.datasets import (
    Coupling,
    export_coupling_csv,
    load_coupling,
    make_stochastic_coupling,
    sample_distribution,
    save_coupling,
    split_coupling,
)
from src.logic.errors import CafError, PhaseError
from src.logic.experiment_config import ExperimentConfig, config_hash, dump_config
from src.logic.metrics import (
    MetricReport,
    append_ledger,
    coupling_preservation,
    nfss,
    reconstruction_error,
    sliced_wasserstein,
    write_straightness_csv,
)
from src.logic.nnsub import MlpModel, load_checkpoint, save_checkpoint
from src.logic.sampling import FlowBundle, export_trajectories_csv, load_trajectories_csv
from src.logic.training import TrainReport, reflow, train_caf, train_rf, write_loss_log
from src.ui.main_view import display_status_message
from src.ui.plot_view import plot_trajectories
from src.Utilities.utils import derive_seed, sha256_file, write_bytes_atomic

logger = logging.getLogger(__name__)

PHASE_ORDER = [
    "coupling",
    "train-rf",
    "reflow",
    "train-rf-reflow",
    "train-caf",
    "sample",
    "invert",
    "metrics",
    "plot",
]


class PhaseManifest:
    """
    manifest.json bookkeeping: per phase, the config hash and the SHA-256 of
    every input and output artifact (paths relative to the run root).
    """

    def __init__(self, root: Path):
        self.root = root
        self.path = root / OUTPUT_LAYOUT["manifest"]
        self.entries: Dict[str, dict] = {}
        if self.path.exists():
            self.entries = orjson.loads(self.path.read_bytes())

    def _hashes(self, paths: Sequence[Path]) -> Dict[str, str]:
        return {str(p.relative_to(self.root)): sha256_file(p) for p in paths}

    def is_fresh(self, phase: str, cfg_hash: str, inputs: Sequence[Path]) -> bool:
        entry = self.entries.get(phase)
        if entry is None or entry.get("config_hash") != cfg_hash:
            return False
        if any(not p.exists() for p in inputs) or entry.get("inputs") != self._hashes(inputs):
            return False
        outputs = [self.root / rel for rel in entry.get("outputs", {})]
        if any(not p.exists() for p in outputs):
            return False
        return entry["outputs"] == self._hashes(outputs)

    def outputs(self, phase: str) -> List[Path]:
        return [self.root / rel for rel in self.entries[phase]["outputs"]]

    def record(self, phase: str, cfg_hash: str, inputs: Sequence[Path], outputs: Sequence[Path]) -> None:
        self.entries[phase] = {
            "config_hash": cfg_hash,
            "inputs": self._hashes(inputs),
            "outputs": self._hashes(outputs),
        }
        write_bytes_atomic(self.path, orjson.dumps(self.entries, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))


@dataclass(eq=False)
class RunContext:
    """Everything a phase needs: the validated config and its output subtree."""

    config: ExperimentConfig
    force: bool = False
    show_progress: bool = False
    config_hash: str = ""
    root: Path = field(default=None)
    manifest: PhaseManifest = field(default=None)

    def __post_init__(self):
        self.config_hash = config_hash(self.config)
        self.root = Path(self.config.output_dir) / self.config_hash
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = PhaseManifest(self.root)
        dump_config(self.config, self.root / "config.yaml")

    def path(self, layout_key: str, name: str = "") -> Path:
        base = self.root / OUTPUT_LAYOUT[layout_key]
        return base / name if name else base

    @property
    def ledger_path(self) -> Path:
        return self.root / OUTPUT_LAYOUT["ledger"]

    @property
    def training_coupling_path(self) -> Path:
        name = "reflow.cplg" if self.config.ablation.reflow_on else "stochastic.cplg"
        return self.path("couplings", name)

    def split(self, coupling: Coupling) -> Tuple[Coupling, Coupling]:
        """(train, held_out) split shared by every phase of the run."""
        return split_coupling(coupling, self.config.metrics.n_heldout, derive_seed(self.config.seed, "split"))


def run_phase(
    ctx: RunContext,
    phase: str,
    inputs: Sequence[Path],
    artifact: Path,
    build: Callable[[], Sequence[Path]],
) -> List[Path]:
    """
    Run one phase through the manifest cache.

    Raises:
        PhaseError: the phase raised; the message names the phase and its artifact.
    """
    if not ctx.force and ctx.manifest.is_fresh(phase, ctx.config_hash, inputs):
        display_status_message("info", STATUS_MESSAGES["phase_cached"], phase=phase, path=artifact)
        return ctx.manifest.outputs(phase)

    display_status_message("info", STATUS_MESSAGES["phase_started"], phase=phase)
    try:
        outputs = list(build())
    except (CafError, ValueError, OSError) as e:
        logger.debug("phase %s failed", phase, exc_info=True)
        raise PhaseError(phase, str(artifact), e) from e
    ctx.manifest.record(phase, ctx.config_hash, inputs, outputs)
    display_status_message("success", STATUS_MESSAGES["phase_done"], phase=phase, path=artifact)
    return outputs


def _save_model(model: MlpModel, path: Path) -> Path:
    return write_bytes_atomic(path, save_checkpoint(model))


def _load_model(path: Path) -> MlpModel:
    return load_checkpoint(path.read_bytes())


def _save_run(ctx: RunContext, name: str, model: MlpModel, report: TrainReport) -> List[Path]:
    display_status_message(
        "success", STATUS_MESSAGES["training_done"], loss=report.final_loss, iterations=len(report.loss_curve)
    )
    return [
        _save_model(model, ctx.path("checkpoints", f"{name}.caf1")),
        write_loss_log(report, ctx.path("loss_logs", f"{name}.csv")),
    ]


# --- phases ---


def handle_coupling(ctx: RunContext) -> List[Path]:
    """Stochastic (independent) coupling of source and target draws."""
    cfg = ctx.config
    out = ctx.path("couplings", "stochastic.cplg")

    def build():
        coupling = make_stochastic_coupling(cfg.source_spec(), cfg.target_spec(), cfg.n_pairs, cfg.seed)
        return [save_coupling(coupling, out), export_coupling_csv(coupling, out.with_suffix(".csv"))]

    return run_phase(ctx, "coupling", [], out, build)


def handle_train_rf(ctx: RunContext) -> List[Path]:
    """1-rectified flow on the stochastic coupling."""
    src = ctx.path("couplings", "stochastic.cplg")
    out = ctx.path("checkpoints", "rf1.caf1")

    def build():
        train_split, _ = ctx.split(load_coupling(src))
        model, report = train_rf(train_split, ctx.config.effective_rf_train(), ctx.show_progress)
        return _save_run(ctx, "rf1", model, report)

    return run_phase(ctx, "train-rf", [src], out, build)


def handle_reflow(ctx: RunContext) -> List[Path]:
    """
    Reflow rounds: round k simulates rf_k to build a deterministic coupling;
    every round but the last trains rf_{k+1} on it.
    """
    cfg = ctx.config
    rf1 = ctx.path("checkpoints", "rf1.caf1")
    out = ctx.path("couplings", "reflow.cplg")

    def build():
        outputs = []
        model = _load_model(rf1)
        for k in range(1, cfg.reflow.rounds + 1):
            coupling = reflow(
                model,
                cfg.source_spec(),
                cfg.reflow.n_pairs,
                cfg.reflow.sim_steps,
                derive_seed(cfg.seed, "reflow", k),
                cfg.reflow.max_drop_fraction,
            )
            display_status_message(
                "info", STATUS_MESSAGES["reflow_done"], count=len(coupling), dropped=cfg.reflow.n_pairs - len(coupling)
            )
            if k == cfg.reflow.rounds:
                outputs += [save_coupling(coupling, out), export_coupling_csv(coupling, out.with_suffix(".csv"))]
            else:
                train_split, _ = ctx.split(coupling)
                model, report = train_rf(train_split, cfg.effective_rf_train(), ctx.show_progress)
                outputs += _save_run(ctx, f"rf{k + 1}", model, report)
        return outputs

    return run_phase(ctx, "reflow", [rf1], out, build)


def handle_train_rf_reflow(ctx: RunContext) -> List[Path]:
    """The reflowed rectified flow (2-RF for one round), the CAF baseline."""
    src = ctx.path("couplings", "reflow.cplg")
    out = ctx.path("checkpoints", "rf_reflow.caf1")

    def build():
        train_split, _ = ctx.split(load_coupling(src))
        model, report = train_rf(train_split, ctx.config.effective_rf_train(), ctx.show_progress)
        return _save_run(ctx, "rf_reflow", model, report)

    return run_phase(ctx, "train-rf-reflow", [src], out, build)


def handle_train_caf(ctx: RunContext) -> List[Path]:
    src = ctx.training_coupling_path
    out = ctx.path("checkpoints", "caf_velocity.caf1")

    def build():
        train_split, _ = ctx.split(load_coupling(src))
        models = train_caf(train_split, ctx.config.effective_caf_train(), ctx.show_progress)
        return _save_run(ctx, "caf_velocity", models.velocity, models.velocity_report) + _save_run(
            ctx, "caf_acceleration", models.acceleration, models.acceleration_report
        )

    return run_phase(ctx, "train-caf", [src], out, build)


def flow_checkpoints(ctx: RunContext) -> List[Tuple[str, List[Path]]]:
    """(label, checkpoint paths) for every flow the run evaluates; the first is the primary flow."""
    cfg = ctx.config
    rf_label = "rf_reflow" if cfg.ablation.reflow_on else "rf1"
    rf_entry = (rf_label, [ctx.path("checkpoints", f"{rf_label}.caf1")])
    if not cfg.ablation.acceleration_on:
        return [rf_entry]
    caf_paths = [ctx.path("checkpoints", "caf_velocity.caf1"), ctx.path("checkpoints", "caf_acceleration.caf1")]
    return [("caf", caf_paths), rf_entry]


def load_bundles(ctx: RunContext) -> List[Tuple[FlowBundle, float]]:
    """Load (bundle, h) for each evaluated flow; rectified flows plot as h = 1."""
    bundles = []
    for label, paths in flow_checkpoints(ctx):
        if label == "caf":
            v_model, a_model = (_load_model(p) for p in paths)
            bundles.append((FlowBundle("caf", v_model, a_model, ctx.config.ablation.ivc_on, label), ctx.config.h))
        else:
            bundles.append((FlowBundle("rf", _load_model(paths[0]), label=label), 1.0))
    return bundles


def _checkpoint_inputs(ctx: RunContext) -> List[Path]:
    return [p for _, paths in flow_checkpoints(ctx) for p in paths]


def handle_sample(ctx: RunContext) -> List[Path]:
    """
    Forward trajectories from held-out x0 for every evaluated flow.

    Next to each trajectory CSV goes <label>_straightness.csv: per-path
    straightness of the same x0 simulated on the fine NFSS grid.
    """
    cfg = ctx.config
    inputs = [ctx.training_coupling_path] + _checkpoint_inputs(ctx)
    out_dir = ctx.path("trajectories")

    def build():
        _, held_out = ctx.split(load_coupling(ctx.training_coupling_path))
        x0 = held_out.x0[: max(cfg.metrics.n_plot_paths, 1)]
        outputs = []
        for bundle, _ in load_bundles(ctx):
            _, log = bundle.sample(x0, cfg.flow.n_steps)
            outputs.append(export_trajectories_csv(log, out_dir / f"{bundle.label}_forward.csv"))
            _, fine = bundle.sample(x0, max(cfg.metrics.nfss_n_t * cfg.metrics.nfss_sim_factor, 2))
            outputs.append(write_straightness_csv(fine.logs(), out_dir / f"{bundle.label}_straightness.csv"))
        return outputs

    return run_phase(ctx, "sample", inputs, out_dir, build)


def handle_invert(ctx: RunContext) -> List[Path]:
    """Inverse trajectories from held-out x1 back to noise, on the same N as sampling."""
    cfg = ctx.config
    inputs = [ctx.training_coupling_path] + _checkpoint_inputs(ctx)
    out_dir = ctx.path("trajectories")

    def build():
        _, held_out = ctx.split(load_coupling(ctx.training_coupling_path))
        x1 = held_out.x1[: max(cfg.metrics.n_plot_paths, 1)]
        outputs = []
        for bundle, _ in load_bundles(ctx):
            _, log = bundle.invert(x1, cfg.flow.n_steps)
            outputs.append(export_trajectories_csv(log, out_dir / f"{bundle.label}_inverse.csv"))
        return outputs

    return run_phase(ctx, "invert", inputs, out_dir, build)


def evaluate_bundle(ctx: RunContext, bundle: FlowBundle, coupling: Coupling) -> List[MetricReport]:
    """Every selected metric for one flow, in a fixed order."""
    cfg = ctx.config
    m = cfg.metrics
    seed = derive_seed(cfg.seed, "metrics", bundle.label)
    train_split, held_out = ctx.split(coupling)
    train_eval = train_split.subset(range(min(m.n_eval, len(train_split))))
    reports = []

    if "sliced_wasserstein" in m.selections or "nfe" in m.selections:
        x0 = sample_distribution(cfg.source_spec(), m.n_eval, derive_seed(cfg.seed, "eval", "source"))
        x1_hat, log = bundle.sample(x0, cfg.flow.n_steps)
        if "sliced_wasserstein" in m.selections:
            reference = sample_distribution(cfg.target_spec(), m.n_eval, derive_seed(cfg.seed, "eval", "target"))
            reports.append(sliced_wasserstein(x1_hat, reference, m.n_projections, seed, n_boot=m.bootstrap_samples))
        if "nfe" in m.selections:
            reports.append(
                MetricReport(name="nfe", value=float(log.meta["nfe"]), n_samples=m.n_eval, config={"n_steps": cfg.flow.n_steps})
            )
    if "nfss" in m.selections:
        reports.append(
            nfss(bundle, train_eval, m.nfss_n_t, m.nfss_sim_factor, seed, m.max_nfss_skip_fraction, m.bootstrap_samples)
        )
    if "coupling_preservation" in m.selections:
        for split, name in ((train_eval, "coupling_preservation"), (held_out, "coupling_preservation_heldout")):
            reports.append(
                coupling_preservation(
                    split, bundle.endpoint, cfg.flow.n_steps, seed, m.psnr_cap_db, name=name, n_boot=m.bootstrap_samples
                )
            )
    if "reconstruction" in m.selections:
        x1 = sample_distribution(cfg.target_spec(), m.n_eval, derive_seed(cfg.seed, "eval", "target"))
        x1_hat, _ = bundle.reconstruct(x1, m.reconstruction_steps)
        reports.append(reconstruction_error(x1, x1_hat, seed, n_boot=m.bootstrap_samples))
    return reports


def handle_metrics(ctx: RunContext) -> List[Path]:
    """Rewrite the run ledger: '<flow label>/<metric>' rows for every evaluated flow."""
    inputs = [ctx.training_coupling_path] + _checkpoint_inputs(ctx)
    out = ctx.ledger_path

    def build():
        coupling = load_coupling(ctx.training_coupling_path)
        if out.exists():
            out.unlink()
        for bundle, _ in load_bundles(ctx):
            reports = evaluate_bundle(ctx, bundle, coupling)
            append_ledger(reports, out, ctx.config_hash, prefix=f"{bundle.label}/")
        return [out]

    return run_phase(ctx, "metrics", inputs, out, build)


def handle_plot(ctx: RunContext) -> List[Path]:
    """SVG of held-out pairs and forward paths, colored by h."""
    labels = [label for label, _ in flow_checkpoints(ctx)]
    inputs = [ctx.training_coupling_path] + [ctx.path("trajectories", f"{label}_forward.csv") for label in labels]
    out = ctx.path("plots", "trajectories.svg")

    def build():
        _, held_out = ctx.split(load_coupling(ctx.training_coupling_path))
        logs = []
        for bundle_label, csv_path in zip(labels, inputs[1:]):
            h = ctx.config.h if bundle_label == "caf" else 1.0
            logs += load_trajectories_csv(csv_path, {"h": h, "label": bundle_label})
        path = plot_trajectories(logs, held_out, out, title=f"run {ctx.config_hash[:12]}")
        display_status_message("success", STATUS_MESSAGES["plot_written"], path=path)
        return [path]

    return run_phase(ctx, "plot", inputs, out, build)


PHASE_HANDLERS: Dict[str, Callable[[RunContext], List[Path]]] = {
    "coupling": handle_coupling,
    "train-rf": handle_train_rf,
    "reflow": handle_reflow,
    "train-rf-reflow": handle_train_rf_reflow,
    "train-caf": handle_train_caf,
    "sample": handle_sample,
    "invert": handle_invert,
    "metrics": handle_metrics,
    "plot": handle_plot,
}


def phases_for(config: ExperimentConfig, until: Optional[str] = None) -> List[str]:
    """Phases a config needs, in order, up to and including `until`."""
    if until is not None and until not in PHASE_ORDER:
        raise ValueError(f"Unknown phase '{until}'. Available: {PHASE_ORDER}")
    plan = []
    for phase in PHASE_ORDER:
        skip = (
            (phase in ("reflow", "train-rf-reflow") and not config.ablation.reflow_on)
            or (phase == "train-caf" and not config.ablation.acceleration_on)
            or (phase == "plot" and config.source_spec().dim != 2)
        )
        if not skip:
            plan.append(phase)
        if phase == until:
            break
    return plan
