from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
import pytest

from src.logic.datasets import Coupling
from src.logic.errors import MetricError
from src.logic.flowcore import ExactFields
from src.logic.metrics import (
    MetricReport,
    append_ledger,
    append_ledger_rows,
    bootstrap_ci,
    coupling_preservation,
    nfss,
    nfss_term,
    psnr_analog,
    read_ledger,
    reconstruction_error,
    sliced_wasserstein,
    straightness_per_trajectory,
    write_straightness_csv,
)
from src.logic.model_factory import get_model_instance
from src.logic.nnsub import make_rng
from src.logic.sampling import FlowBundle, TrajectoryLog


@pytest.fixture
def pair_set():
    rng = make_rng(5)
    x0 = rng.standard_normal((40, 2))
    x1 = rng.standard_normal((40, 2)) * 2.0 + np.array([3.0, -1.0])
    return Coupling(x0, x1)


def _exact_bundle(coupling, h):
    fields = ExactFields(coupling.x0, coupling.x1, h)
    return FlowBundle("caf", fields.velocity, fields.acceleration, ivc=True)


def test_nfss_term_of_orthogonal_directions():
    assert nfss_term([[1.0, 0.0]], [[0.0, 1.0]])[0] == pytest.approx(2.0)
    assert nfss_term([[3.0, 0.0]], [[0.5, 0.0]])[0] == pytest.approx(0.0)
    assert nfss_term([[1.0, 0.0]], [[-2.0, 0.0]])[0] == pytest.approx(4.0)


def test_nfss_is_zero_for_straight_constant_speed_flow(pair_set):
    report = nfss(_exact_bundle(pair_set, 1.0), pair_set, n_t=8, sim_factor=2, n_boot=20)
    assert report.value == pytest.approx(0.0, abs=1e-10)
    assert report.n_samples == 40 * 8
    assert report.config["skipped"] == 0


def test_nfss_is_zero_for_exact_rf_field(pair_set):
    fields = ExactFields(pair_set.x0, pair_set.x1, 1.0)
    report = nfss(FlowBundle("rf", fields.rf_velocity), pair_set, n_t=4, sim_factor=3, n_boot=20)
    assert report.value == pytest.approx(0.0, abs=1e-10)


def test_nfss_is_positive_for_a_bending_flow():
    c = Coupling(np.zeros((20, 2)), np.tile([1.0, 0.0], (20, 1)))

    def bending(x, t):
        return np.tile([1.0, np.cos(np.pi * t)], (x.shape[0], 1))

    report = nfss(FlowBundle("rf", bending), c, n_t=8, sim_factor=4, n_boot=20)
    assert report.value > 0.1
    assert report.config["kind"] == "rf"


def test_nfss_refuses_degenerate_pairs():
    c = Coupling(np.ones((10, 2)), np.ones((10, 2)))
    fields = ExactFields(c.x0, c.x1, 1.0)
    with pytest.raises(MetricError, match="near-zero"):
        nfss(FlowBundle("rf", fields.rf_velocity), c, n_t=4, sim_factor=1)


def test_sliced_wasserstein_of_identical_sets_is_zero():
    x = make_rng(0).standard_normal((200, 3))
    report = sliced_wasserstein(x, x.copy(), n_projections=32)
    assert report.value == 0.0
    assert report.ci_halfwidth == 0.0


def test_sliced_wasserstein_of_point_masses():
    report = sliced_wasserstein(np.zeros((100, 1)), np.ones((100, 1)), n_projections=8)
    assert report.value == pytest.approx(1.0)


def test_sliced_wasserstein_handles_unequal_sizes():
    a = np.arange(100, dtype=np.float64)[:, None]
    b = np.repeat(a, 2, axis=0)
    assert sliced_wasserstein(a, b, n_projections=4).value == pytest.approx(0.0, abs=1e-12)
    assert sliced_wasserstein(np.zeros((100, 1)), np.ones((150, 1)), n_projections=4).value == pytest.approx(1.0)


def test_sliced_wasserstein_is_symmetric():
    rng = make_rng(2)
    a, b = rng.standard_normal((150, 2)), rng.standard_normal((120, 2)) + 1.0
    assert sliced_wasserstein(a, b, seed=3).value == pytest.approx(sliced_wasserstein(b, a, seed=3).value, rel=1e-12)


def test_sliced_wasserstein_rejects_small_or_mismatched_sets():
    with pytest.raises(MetricError, match="at least 100"):
        sliced_wasserstein(np.zeros((99, 2)), np.zeros((200, 2)))
    with pytest.raises(MetricError, match="dimension"):
        sliced_wasserstein(np.zeros((100, 2)), np.zeros((100, 3)))


def test_straightness_of_semicircle():
    theta = np.linspace(np.pi, 0.0, 101)
    log = TrajectoryLog(np.linspace(0.0, 1.0, 101), np.stack([np.cos(theta), np.sin(theta)], axis=1))
    assert straightness_per_trajectory(log) == pytest.approx(0.5, abs=1e-12)


def test_straightness_of_line_is_zero():
    t = np.linspace(0.0, 1.0, 5)
    log = TrajectoryLog(t, np.stack([t * 2.0, t - 1.0], axis=1))
    assert straightness_per_trajectory(log) == pytest.approx(0.0, abs=1e-12)


def test_straightness_edge_cases():
    closed = TrajectoryLog([0.0, 0.5, 1.0], [[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
    assert np.isnan(straightness_per_trajectory(closed))
    with pytest.raises(MetricError):
        straightness_per_trajectory(TrajectoryLog([0.0, 1.0], [[0.0, 0.0], [1.0, 0.0]]))


def test_coupling_preservation_of_exact_sampler(pair_set):
    report = coupling_preservation(pair_set, lambda x0, n: pair_set.x1.copy(), 1, n_boot=20)
    assert report.value == 0.0
    assert report.extras["psnr"] == 300.0


def test_coupling_preservation_of_identity_sampler(pair_set):
    report = coupling_preservation(pair_set, lambda x0, n: x0, 3)
    assert report.value == pytest.approx(np.linalg.norm(pair_set.x1 - pair_set.x0, axis=1).mean())
    assert report.n_samples == 40
    assert report.config == {"n_steps": 3}
    assert report.extras["psnr"] < 300.0


def test_coupling_preservation_needs_pairs():
    empty = Coupling(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(MetricError):
        coupling_preservation(empty, lambda x0, n: x0, 1)


def test_psnr_analog_limits():
    assert psnr_analog(0.0, 2.0) == 300.0
    assert psnr_analog(1.0, 0.0) == -300.0
    assert psnr_analog(1.0, 10.0) == pytest.approx(20.0)
    assert psnr_analog(1e-300, 1.0, cap_db=50.0) == 50.0


def test_reconstruction_error_report():
    report = reconstruction_error(np.zeros((4, 2)), np.array([[3.0, 4.0]] * 4), seed=1)
    assert report.value == pytest.approx(5.0)
    assert report.ci_halfwidth == 0.0


def test_bootstrap_interval_is_deterministic_and_non_negative():
    values = make_rng(0).standard_normal(300)
    a = bootstrap_ci(values, seed=4, n_boot=100)
    assert a == bootstrap_ci(values, seed=4, n_boot=100)
    assert 0.0 < a < 0.5
    assert bootstrap_ci([1.0], seed=0) == 0.0
    assert bootstrap_ci(np.full(50, 2.5), seed=0) == 0.0


def test_metric_report_requires_finite_value():
    with pytest.raises(ValueError):
        MetricReport(name="nfss", value=float("nan"), n_samples=1)
    with pytest.raises(ValueError):
        MetricReport(name="nfss", value=0.1, n_samples=1, ci_halfwidth=-1.0)


def test_ledger_header_written_once(tmp_path):
    path = tmp_path / "metrics.csv"
    reports = [
        MetricReport(name="nfss", value=0.125, n_samples=10, ci_halfwidth=0.01),
        MetricReport(name="coupling_preservation", value=0.3, n_samples=10, extras={"psnr": 42.5}),
    ]
    append_ledger(reports, path, "abc123", prefix="caf/")
    append_ledger(reports[:1], path, "abc123", prefix="rf/")
    text = path.read_text(encoding="utf-8")
    assert text.count("name,value,ci_halfwidth,n_samples,config_hash") == 1
    ledger = read_ledger(path)
    assert ledger["name"].tolist() == ["caf/nfss", "caf/coupling_preservation", "caf/coupling_preservation.psnr", "rf/nfss"]
    assert ledger["value"].tolist()[0] == "0.125"
    assert set(ledger["config_hash"]) == {"abc123"}


def test_concurrent_ledger_appends_do_not_interleave(tmp_path):
    path = tmp_path / "grid" / "metrics.csv"

    def writer(k):
        rows = [[f"cell{k}/m{i}", repr(float(i)), "0.0", 1, "h"] for i in range(25)]
        append_ledger_rows(rows, path, timeout=30)

    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(writer, range(8)))
    ledger = read_ledger(path)
    assert len(ledger) == 200
    for k in range(8):
        names = ledger["name"][ledger["name"].str.startswith(f"cell{k}/")].tolist()
        assert names == [f"cell{k}/m{i}" for i in range(25)]


def _constant_caf(v, a):
    v, a = np.asarray(v, dtype=np.float64), np.asarray(a, dtype=np.float64)
    return FlowBundle(
        "caf",
        lambda x, t: np.tile(v, (x.shape[0], 1)),
        lambda x, t, v0=None: np.tile(a, (x.shape[0], 1)),
        ivc=True,
    )


@pytest.mark.parametrize("h", [0.5, 1.5, 2.0])
def test_nfss_is_zero_for_exact_fields_at_any_h(pair_set, h):
    report = nfss(_exact_bundle(pair_set, h), pair_set, n_t=8, sim_factor=2, n_boot=20)
    assert report.value == pytest.approx(0.0, abs=1e-10)


def test_nfss_of_a_reversing_flow_stays_within_bounds():
    c = Coupling(make_rng(3).standard_normal((25, 2)), np.zeros((25, 2)))
    # x moves +x until t = 0.25, then back past its start; chord points -x
    report = nfss(_constant_caf([1.0, 0.0], [-4.0, 0.0]), c, n_t=10, sim_factor=1, n_boot=20)
    assert report.value == pytest.approx(4.0 * 3 / 10)
    assert 0.0 <= report.value <= 4.0


def test_nfss_of_random_networks_stays_within_bounds(pair_set):
    v = get_model_instance("caf_velocity", 2, seed=4, hidden_layers=2, hidden_units=16, activation="tanh")
    a = get_model_instance("caf_acceleration", 2, seed=5, hidden_layers=2, hidden_units=16, activation="tanh")
    report = nfss(FlowBundle("caf", v, a, ivc=True), pair_set, n_t=8, sim_factor=2, max_skip_fraction=1.0, n_boot=20)
    assert 0.0 <= report.value <= 4.0


def test_nfss_converges_as_the_time_grid_refines():
    c = Coupling(make_rng(6).standard_normal((30, 2)), np.zeros((30, 2)))
    bundle = _constant_caf([1.0, 0.0], [0.0, -2.0])
    # chord (1, -1); velocity (1, -2t)
    t = (np.arange(200_000) + 0.5) / 200_000
    u = np.array([1.0, -1.0]) / np.sqrt(2.0)
    w = np.stack([np.ones_like(t), -2.0 * t], axis=1) / np.sqrt(1.0 + 4.0 * t**2)[:, None]
    limit = float(np.mean(np.sum((u - w) ** 2, axis=1)))
    errors = [abs(nfss(bundle, c, n_t=n, sim_factor=1, n_boot=20).value - limit) for n in (4, 16, 64, 256)]
    assert all(later < earlier for earlier, later in zip(errors, errors[1:]))
    assert errors[-1] < 0.01


def test_sliced_wasserstein_triangle_inequality():
    rng = make_rng(11)
    for _ in range(10):
        a, b, c = (rng.standard_normal((150, 2)) * rng.uniform(0.5, 2.0) + rng.uniform(-2.0, 2.0, 2) for _ in range(3))
        ab, bc, ac = (sliced_wasserstein(p, q, n_projections=32, seed=4).value for p, q in ((a, b), (b, c), (a, c)))
        assert ac <= ab + bc + 1e-12


def test_nfss_chord_ends_at_the_simulated_point(pair_set):
    # straight constant-speed paths that miss the coupling's x1 entirely
    bundle = FlowBundle("rf", lambda x, t: np.tile([0.5, 2.0], (x.shape[0], 1)))
    report = nfss(bundle, pair_set, n_t=6, sim_factor=2, n_boot=20)
    assert report.value == pytest.approx(0.0, abs=1e-12)


def test_straightness_csv_has_one_row_per_path(tmp_path):
    theta = np.linspace(np.pi, 0.0, 51)
    arc = TrajectoryLog(np.linspace(0.0, 1.0, 51), np.stack([np.cos(theta), np.sin(theta)], axis=1))
    line = TrajectoryLog([0.0, 0.5, 1.0], [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    frame = pd.read_csv(write_straightness_csv([arc, line], tmp_path / "s.csv"))
    assert frame["path"].tolist() == [0, 1]
    assert frame["straightness"].tolist() == pytest.approx([0.5, 0.0], abs=1e-9)
