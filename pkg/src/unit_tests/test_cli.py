import pandas as pd
import pytest
import yaml
from typer.testing import CliRunner

from app import app
from src.logic.experiment_config import config_hash, validate_config

runner = CliRunner()


@pytest.fixture(autouse=True)
def quiet_runtime(monkeypatch):
    monkeypatch.setenv("CAFLOW_SHOW_PROGRESS", "false")
    monkeypatch.setenv("CAFLOW_LOG_LEVEL", "WARNING")


def _write(tmp_path, data, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def test_pipeline_command_writes_the_run_tree(tmp_path, minimal_config_data):
    path = _write(tmp_path, minimal_config_data)
    result = runner.invoke(app, ["pipeline", "--config", str(path)])
    assert result.exit_code == 0, result.output
    root = tmp_path / "out" / config_hash(validate_config(minimal_config_data))
    assert (root / "metrics.csv").exists()
    assert (root / "plots" / "trajectories.svg").exists()


def test_seed_and_out_flags_change_the_run(tmp_path, minimal_config_data):
    path = _write(tmp_path, minimal_config_data)
    out = tmp_path / "alt"
    result = runner.invoke(app, ["train-rf", "--config", str(path), "--seed", "3", "--out", str(out)])
    assert result.exit_code == 0, result.output
    expected = validate_config({**minimal_config_data, "seed": 3})
    assert (out / config_hash(expected) / "checkpoints" / "rf1.caf1").exists()


def test_steps_and_h_flags_reach_the_sampler(tmp_path, minimal_config_data):
    path = _write(tmp_path, minimal_config_data)
    result = runner.invoke(app, ["sample", "--config", str(path), "--steps", "3", "--h", "1.5"])
    assert result.exit_code == 0, result.output
    expected = validate_config(minimal_config_data).with_overrides(**{"flow.n_steps": 3, "ablation.h": 1.5})
    frame = pd.read_csv(tmp_path / "out" / config_hash(expected) / "trajectories" / "caf_forward.csv")
    assert sorted(frame["t"].unique().tolist()) == pytest.approx([0.0, 1 / 3, 2 / 3, 1.0])


def test_invalid_config_exits_with_2(tmp_path, minimal_config_data):
    path = _write(tmp_path, {**minimal_config_data, "ablation": {"ivc": True}})
    result = runner.invoke(app, ["train-rf", "--config", str(path)])
    assert result.exit_code == 2


def test_wrong_schema_version_exits_with_2(tmp_path, minimal_config_data):
    path = _write(tmp_path, {**minimal_config_data, "schema_version": 9})
    assert runner.invoke(app, ["metrics", "--config", str(path)]).exit_code == 2


def test_plot_of_three_dimensional_data_exits_with_2(tmp_path, minimal_config_data):
    path = _write(tmp_path, {**minimal_config_data, "dim": 3, "target": "gaussian"})
    assert runner.invoke(app, ["plot", "--config", str(path)]).exit_code == 2


def test_phase_failure_exits_with_3(tmp_path, minimal_config_data):
    data = {**minimal_config_data, "target": {"kind": "point_set", "params": {"points": [[1e4, 1e4]]}}}
    path = _write(tmp_path, data)
    result = runner.invoke(app, ["train-rf", "--config", str(path)])
    assert result.exit_code == 3


def test_ablate_single_cell(tmp_path, minimal_config_data):
    path = _write(tmp_path, minimal_config_data)
    result = runner.invoke(app, ["ablate", "--config", str(path), "--labels", "A", "--no-sweep", "--jobs", "1"])
    assert result.exit_code == 0, result.output
    base_hash = config_hash(validate_config(minimal_config_data))
    ledger = pd.read_csv(tmp_path / "out" / "ablation" / base_hash / "metrics.csv", dtype=str)
    assert ledger["name"].str.startswith("A/").all()


def test_crossing_command_writes_results(tmp_path):
    out = tmp_path / "crossing.csv"
    result = runner.invoke(app, ["crossing", "--iterations", "5", "--out", str(out)])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out)
    assert sorted(frame["model"].unique()) == ["caf_ivc", "caf_no_ivc", "rf"]
    assert sorted(frame["n_steps"].unique()) == [1, 2, 10]
    assert (frame["crossing_error"] >= 0.0).all()


def test_invert_follows_the_steps_flag(tmp_path, minimal_config_data):
    path = _write(tmp_path, minimal_config_data)
    result = runner.invoke(app, ["invert", "--config", str(path), "--steps", "5"])
    assert result.exit_code == 0, result.output
    expected = validate_config(minimal_config_data).with_overrides(**{"flow.n_steps": 5})
    frame = pd.read_csv(tmp_path / "out" / config_hash(expected) / "trajectories" / "caf_inverse.csv")
    times = sorted(frame["t"].unique().tolist())
    assert len(times) == 6
    assert times == pytest.approx([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
