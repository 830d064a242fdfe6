import orjson
import pandas as pd
import pytest

from src.logic import pipeline
from src.logic.errors import ConfigError, PhaseError
from src.logic.experiment_config import config_hash, validate_config
from src.logic.handlers import PHASE_ORDER, RunContext, flow_checkpoints, phases_for
from src.logic.metrics import read_ledger
from src.logic.pipeline import ablation_cells, cell_config, run_ablation_grid, run_pipeline


def _with(data, **changes):
    return validate_config({**data, **changes})


def test_phase_plan_follows_toggles(minimal_config):
    assert phases_for(minimal_config) == PHASE_ORDER
    no_reflow = minimal_config.with_overrides(**{"ablation.reflow_on": False})
    assert "reflow" not in phases_for(no_reflow) and "train-rf-reflow" not in phases_for(no_reflow)
    rf_only = minimal_config.with_overrides(**{"ablation.acceleration_on": False})
    assert "train-caf" not in phases_for(rf_only)
    assert phases_for(minimal_config, until="train-caf")[-1] == "train-caf"
    with pytest.raises(ValueError):
        phases_for(minimal_config, until="deploy")


def test_plot_is_skipped_beyond_two_dimensions(minimal_config_data):
    config = _with(minimal_config_data, dim=3, target="gaussian")
    assert "plot" not in phases_for(config)


def test_minimal_pipeline_end_to_end(minimal_config):
    result = run_pipeline(minimal_config)
    root = result.root
    assert root.name == config_hash(minimal_config)
    assert result.primary_label == "caf"
    for rel in (
        "config.yaml",
        "manifest.json",
        "couplings/stochastic.cplg",
        "couplings/reflow.cplg",
        "checkpoints/rf1.caf1",
        "checkpoints/rf_reflow.caf1",
        "checkpoints/caf_velocity.caf1",
        "checkpoints/caf_acceleration.caf1",
        "logs/caf_acceleration.csv",
        "trajectories/caf_forward.csv",
        "trajectories/caf_inverse.csv",
        "trajectories/rf_reflow_forward.csv",
        "trajectories/caf_straightness.csv",
        "trajectories/rf_reflow_straightness.csv",
        "metrics.csv",
        "plots/trajectories.svg",
    ):
        assert (root / rel).exists(), rel

    ledger = read_ledger(root / "metrics.csv")
    assert list(ledger.columns) == ["name", "value", "ci_halfwidth", "n_samples", "config_hash"]
    names = set(ledger["name"])
    for label in ("caf", "rf_reflow"):
        for metric in ("sliced_wasserstein", "nfss", "coupling_preservation", "coupling_preservation.psnr",
                       "coupling_preservation_heldout", "reconstruction_error", "nfe"):
            assert f"{label}/{metric}" in names
    nfe = dict(zip(ledger["name"], ledger["value"]))
    assert float(nfe["caf/nfe"]) == 2.0
    assert float(nfe["rf_reflow/nfe"]) == 1.0
    assert set(ledger["config_hash"]) == {result.config_hash}

    manifest = orjson.loads((root / "manifest.json").read_bytes())
    assert set(manifest) == set(PHASE_ORDER)


def test_rerun_reuses_cache_and_force_is_byte_identical(minimal_config):
    first = run_pipeline(minimal_config)
    ledger_bytes = (first.root / "metrics.csv").read_bytes()
    svg_bytes = (first.root / "plots" / "trajectories.svg").read_bytes()
    ckpt = first.root / "checkpoints" / "caf_acceleration.caf1"
    stamp = ckpt.stat().st_mtime_ns

    run_pipeline(minimal_config)
    assert ckpt.stat().st_mtime_ns == stamp

    forced = run_pipeline(minimal_config, force=True)
    assert (forced.root / "metrics.csv").read_bytes() == ledger_bytes
    assert (forced.root / "plots" / "trajectories.svg").read_bytes() == svg_bytes


def test_cache_tracks_artifact_hashes(minimal_config):
    result = run_pipeline(minimal_config, until="train-rf")
    coupling = result.root / "couplings" / "stochastic.cplg"
    ckpt = result.root / "checkpoints" / "rf1.caf1"
    original = coupling.read_bytes()
    stamp = ckpt.stat().st_mtime_ns

    # a damaged coupling is rebuilt; identical content keeps train-rf cached
    coupling.write_bytes(b"garbage")
    ctx = RunContext(minimal_config)
    assert not ctx.manifest.is_fresh("coupling", ctx.config_hash, [])
    run_pipeline(minimal_config, until="train-rf")
    assert coupling.read_bytes() == original
    assert ckpt.stat().st_mtime_ns == stamp

    # a damaged checkpoint is retrained
    good = ckpt.read_bytes()
    ckpt.write_bytes(b"garbage")
    run_pipeline(minimal_config, until="train-rf")
    assert ckpt.read_bytes() == good


def test_rf_only_config_reproduces_the_rf_path(minimal_config):
    full = run_pipeline(minimal_config, until="metrics")
    rf_only_config = minimal_config.with_overrides(
        **{"ablation.acceleration_on": False, "ablation.ivc_on": False, "ablation.h": 1.0}
    )
    rf_only = run_pipeline(rf_only_config, until="metrics")
    assert rf_only.primary_label == "rf_reflow"
    assert rf_only.root != full.root
    for name in ("rf1.caf1", "rf_reflow.caf1"):
        assert (rf_only.root / "checkpoints" / name).read_bytes() == (full.root / "checkpoints" / name).read_bytes()
    assert not (rf_only.root / "checkpoints" / "caf_velocity.caf1").exists()

    full_rows = read_ledger(full.root / "metrics.csv")
    rf_rows = read_ledger(rf_only.root / "metrics.csv")
    full_rf = full_rows[full_rows["name"].str.startswith("rf_reflow/")][["name", "value", "ci_halfwidth"]]
    assert rf_rows[["name", "value", "ci_halfwidth"]].reset_index(drop=True).equals(full_rf.reset_index(drop=True))


def test_flow_checkpoint_labels(minimal_config):
    labels = [label for label, _ in flow_checkpoints(RunContext(minimal_config))]
    assert labels == ["caf", "rf_reflow"]
    no_reflow = minimal_config.with_overrides(**{"ablation.reflow_on": False, "ablation.acceleration_on": False})
    assert [label for label, _ in flow_checkpoints(RunContext(no_reflow))] == ["rf1"]


def test_failing_phase_names_itself(minimal_config_data):
    config = _with(minimal_config_data, target={"kind": "point_set", "params": {"points": [[1e4, 1e4]]}})
    with pytest.raises(PhaseError) as info:
        run_pipeline(config, until="train-rf")
    assert info.value.phase == "train-rf"
    assert info.value.artifact_path.endswith("rf1.caf1")


def test_ablation_cell_catalog():
    cells = ablation_cells()
    labels = [label for label, _ in cells]
    assert labels[:6] == ["A", "B", "C", "D", "E", "F"]
    assert labels[6:] == ["h=0.5", "h=1", "h=1.5", "h=2"]
    assert ablation_cells(["B"], [])[0][1].reflow_on


def test_cell_config_evaluates_one_step(minimal_config):
    cfg = cell_config(minimal_config, ablation_cells(["C"], [])[0][1])
    assert cfg.flow.n_steps == 1
    assert cfg.metrics.selections == ["sliced_wasserstein", "nfss", "coupling_preservation"]
    assert cfg.ablation.ivc_on is False and cfg.h == 1.5


def test_single_cell_grid_matches_its_pipeline(minimal_config):
    grid = run_ablation_grid(minimal_config, labels=["A"], h_sweep=[], jobs=1)
    assert [cell["status"] for cell in grid["cells"]] == ["ok"]
    ledger = read_ledger(grid["ledger"])
    assert ledger["name"].str.startswith("A/").all()

    cell_cfg = cell_config(minimal_config, ablation_cells(["A"], [])[0][1])
    assert set(ledger["config_hash"]) == {config_hash(cell_cfg)}
    direct = read_ledger(run_pipeline(cell_cfg, until="metrics").root / "metrics.csv")
    assert ledger["value"].tolist() == direct["value"].tolist()

    summary = orjson.loads((grid["ledger"].parent / "ablation.json").read_bytes())
    assert summary[0]["label"] == "A" and summary[0]["config_hash"] == config_hash(cell_cfg)


def test_grid_records_failed_cells_and_continues(minimal_config_data):
    base = _with(minimal_config_data, target={"kind": "point_set", "params": {"points": [[1e4, 1e4]]}})
    grid = run_ablation_grid(base, labels=["A", "B"], h_sweep=[], jobs=1)
    assert [cell["label"] for cell in grid["cells"]] == ["A", "B"]
    assert all(cell["status"].startswith("failed") for cell in grid["cells"])
    assert not grid["ledger"].exists()
    assert (grid["ledger"].parent / "ablation.json").exists()


def test_unknown_cell_label_is_a_config_error(minimal_config):
    with pytest.raises(ConfigError):
        run_ablation_grid(minimal_config, labels=["Z"], h_sweep=[])


def test_two_reflow_rounds_train_an_intermediate_flow(minimal_config):
    config = minimal_config.with_overrides(**{"reflow.rounds": 2})
    result = run_pipeline(config, until="reflow")
    assert (result.root / "checkpoints" / "rf2.caf1").exists()
    assert (result.root / "couplings" / "reflow.cplg").exists()
    assert not (result.root / "checkpoints" / "rf3.caf1").exists()


def test_cells_with_the_same_config_run_once(minimal_config, monkeypatch):
    calls = []
    real_run_cell = pipeline._run_cell

    def counting_run_cell(config_data, force):
        calls.append(config_data["ablation"]["h"])
        return real_run_cell(config_data, force)

    monkeypatch.setattr(pipeline, "_run_cell", counting_run_cell)
    grid = run_ablation_grid(minimal_config, labels=["D"], h_sweep=[1.0], jobs=1)

    assert calls == [1.0]
    d_cell, sweep_cell = grid["cells"]
    assert (d_cell["label"], sweep_cell["label"]) == ("D", "h=1")
    assert d_cell["config_hash"] == sweep_cell["config_hash"]
    assert d_cell["same_as"] is None and sweep_cell["same_as"] == "D"

    ledger = read_ledger(grid["ledger"])
    d_rows = ledger[ledger["name"].str.startswith("D/")]
    sweep_rows = ledger[ledger["name"].str.startswith("h=1/")]
    assert len(d_rows) == len(sweep_rows) > 0
    assert d_rows["value"].tolist() == sweep_rows["value"].tolist()


def test_sample_phase_records_per_path_straightness(minimal_config):
    result = run_pipeline(minimal_config, until="sample")
    frame = pd.read_csv(result.root / "trajectories" / "caf_straightness.csv")
    assert list(frame.columns) == ["path", "straightness"]
    assert frame["path"].tolist() == list(range(minimal_config.metrics.n_plot_paths))
    assert (frame["straightness"].dropna() >= 0.0).all()
