import numpy as np
import pytest

from src.logic.experiment_config import validate_config
from src.logic.nnsub import build_model, make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_tanh_model():
    return build_model([3, 6, 5, 2], "tanh", seed=7)


@pytest.fixture
def random_pairs(rng):
    x0 = rng.standard_normal((1000, 2))
    x1 = rng.standard_normal((1000, 2)) * 2.0 + 1.0
    return x0, x1


@pytest.fixture
def minimal_config_data(tmp_path):
    """Two-point target, tiny nets: the end-to-end smoke configuration."""
    small_train = {"iterations": 200, "batch_size": 32, "lr": 3e-3, "hidden_layers": 2, "hidden_units": 16}
    return {
        "schema_version": 1,
        "seed": 0,
        "source": "gaussian",
        "target": "two_points",
        "n_pairs": 256,
        "flow": {"h": 2.0, "n_steps": 1},
        "rf_train": dict(small_train),
        "caf_train": dict(small_train),
        "reflow": {"n_pairs": 256, "sim_steps": 10},
        "metrics": {
            "n_eval": 120,
            "n_heldout": 64,
            "n_plot_paths": 8,
            "n_projections": 16,
            "nfss_n_t": 4,
            "nfss_sim_factor": 2,
            "bootstrap_samples": 50,
            "reconstruction_steps": 3,
        },
        "output_dir": str(tmp_path / "out"),
    }


@pytest.fixture
def minimal_config(minimal_config_data):
    return validate_config(minimal_config_data)


@pytest.fixture
def relative_error():
    def _rel(a, b, floor: float = 1e-6) -> np.ndarray:
        a, b = np.asarray(a), np.asarray(b)
        return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)

    return _rel
