"""
Configuration file for the CAF desk application.
Contains all constants, default hyperparameters, dataset presets and messages.
"""

# Flow defaults (initial-velocity scale, sampling steps, time law, distance)
FLOW_DEFAULTS = {
    "h": 2.0,
    "n_steps": 1,
    "time_dist": "uniform",
    "distance": "l2_squared",
}

# Network architecture: five hidden layers of 128 units
MODEL_DEFAULTS = {
    "hidden_layers": 5,
    "hidden_units": 128,
    "activation": "relu",
}

# Training Configuration
TRAIN_DEFAULTS = {
    "iterations": 2000,
    "batch_size": 256,
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "seed": 0,
    "ivc": True,
    "teacher_forcing": True,
    "log_every": 100,
    "divergence_threshold": 1e6,
    "lr_schedule": "constant",
    "lr_floor": 0.01,
}

# Reflow Configuration
REFLOW_DEFAULTS = {
    "n_pairs": 4096,
    "sim_steps": 100,
    "rounds": 1,
    "max_drop_fraction": 0.01,
}

# Metric Configuration
METRIC_DEFAULTS = {
    "selections": ["sliced_wasserstein", "nfss", "coupling_preservation", "reconstruction", "nfe"],
    "n_eval": 1000,
    "n_heldout": 200,
    "n_plot_paths": 64,
    "n_projections": 128,
    "nfss_n_t": 32,
    "nfss_sim_factor": 4,
    "max_nfss_skip_fraction": 0.05,
    "bootstrap_samples": 200,
    "psnr_cap_db": 300.0,
    "reconstruction_steps": 10,
    "min_sw_samples": 100,
}

# Dataset catalog; kinds map onto datasets.DISTRIBUTION_KINDS
DATASET_PRESETS = {
    "gaussian": {"kind": "standard_gaussian", "params": {}},
    "eight_gaussians": {"kind": "gaussian_mixture", "params": {"radius": 2.0, "n_modes": 8, "scale": 0.1}},
    "two_moons": {"kind": "two_moons", "params": {"noise": 0.05}},
    "checkerboard": {"kind": "checkerboard", "params": {}},
    "swiss_roll": {"kind": "swiss_roll", "params": {"noise": 0.05}},
    "two_points": {"kind": "point_set", "params": {"points": [[-1.0, -1.0], [1.0, 1.0]]}},
}

# Ablation cells: toggles per label (acceleration_on, ivc_on, reflow_on, h)
ABLATION_PRESETS = {
    "A": {"acceleration_on": False, "ivc_on": False, "reflow_on": False, "h": 1.0},
    "B": {"acceleration_on": False, "ivc_on": False, "reflow_on": True, "h": 1.0},
    "C": {"acceleration_on": True, "ivc_on": False, "reflow_on": True, "h": 1.5},
    "D": {"acceleration_on": True, "ivc_on": True, "reflow_on": True, "h": 1.0},
    "E": {"acceleration_on": True, "ivc_on": True, "reflow_on": True, "h": 2.0},
    "F": {"acceleration_on": True, "ivc_on": True, "reflow_on": True, "h": 1.5},
}

ABLATION_H_SWEEP = [0.5, 1.0, 1.5, 2.0]
ABLATION_SELECTIONS = ["sliced_wasserstein", "nfss", "coupling_preservation"]

# Process-level knobs, overridable through CAFLOW_* environment variables
RUNTIME_DEFAULTS = {
    "log_level": "INFO",
    "out_root": "out",
    "jobs": 1,
    "show_progress": True,
}

CONFIG_SCHEMA_VERSION = 1

# Output tree under out/<config-hash>/
OUTPUT_LAYOUT = {
    "checkpoints": "checkpoints",
    "couplings": "couplings",
    "trajectories": "trajectories",
    "plots": "plots",
    "ledger": "metrics.csv",
    "manifest": "manifest.json",
    "loss_logs": "logs",
}

# Metrics ledger columns (fixed order)
LEDGER_COLUMNS = ["name", "value", "ci_halfwidth", "n_samples", "config_hash"]

# Binary format headers
FILE_FORMATS = {
    "checkpoint_magic": b"CAF1",
    "checkpoint_version": 1,
    "coupling_magic": b"CPLG",
    "coupling_version": 1,
}

# Process exit codes
EXIT_CODES = {
    "ok": 0,
    "config_error": 2,
    "phase_failure": 3,
}

# h-value colors for plots
H_COLORS = {
    0.5: "#1f77b4",
    1.0: "#2ca02c",
    1.5: "#ff7f0e",
    2.0: "#d62728",
}

# Status Messages
STATUS_MESSAGES = {
    "phase_started": "Running phase '{phase}'...",
    "phase_cached": "Phase '{phase}' reused from cache ({path})",
    "phase_done": "Phase '{phase}' finished -> {path}",
    "phase_failed": "Phase '{phase}' failed at {path}: {error}",
    "config_error": "Invalid config: {error}",
    "pipeline_done": "Pipeline finished. Artifacts under {path}",
    "ablation_cell_failed": "Ablation cell {label} failed: {error}",
    "ablation_done": "Ablation grid finished: {count} rows appended to {path}",
    "training_done": "Training finished: final loss {loss:.6g} after {iterations} iterations",
    "reflow_done": "Reflow produced {count} pairs ({dropped} dropped)",
    "plot_written": "Plot written to {path}",
    "crossing_result": "{model}: mean endpoint error {error:.4f} (N={steps})",
}

# Flow-crossing fixture experiment
CROSSING_DEFAULTS = {
    "h": 2.0,
    "iterations": 4000,
    "lr": 3e-3,
    "lr_schedule": "cosine",
    "replicas": 128,
    "hidden_layers": 3,
    "hidden_units": 64,
    "activation": "tanh",
    "eval_steps": [1, 2, 10],
}
