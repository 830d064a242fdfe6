import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.logic.errors import ShapeError
from src.logic.flowcore import (
    ExactFields,
    FlowConfig,
    acceleration_target,
    caf_time_derivative,
    closed_form_endpoint,
    exact_field_oracle,
    interp_caf,
    interp_rf,
    velocity_target,
)


@pytest.fixture
def pair():
    return np.array([0.5, -2.0, 1.0]), np.array([3.0, 1.0, -1.0])


def test_rf_interpolant_endpoints(pair):
    x0, x1 = pair
    assert_array_equal(interp_rf(x0, x1, 0.0), x0)
    assert_array_equal(interp_rf(x0, x1, 1.0), x1)
    assert_allclose(interp_rf(x0, x1, 0.25), 0.75 * x0 + 0.25 * x1)


@pytest.mark.parametrize("h", [0.0, 0.5, 1.0, 1.5, 2.0, -1.0])
def test_caf_interpolant_hits_both_endpoints(pair, h):
    x0, x1 = pair
    v = velocity_target(x0, x1, h)
    assert_allclose(interp_caf(x0, x1, 0.0, v), x0, atol=1e-15)
    assert_allclose(interp_caf(x0, x1, 1.0, v), x1, atol=1e-15)


def test_caf_with_unit_h_is_the_straight_line(pair):
    x0, x1 = pair
    v = velocity_target(x0, x1, 1.0)
    assert_array_equal(acceleration_target(x0, x1, v), np.zeros(3))
    for t in np.linspace(0.0, 1.0, 11):
        assert_allclose(interp_caf(x0, x1, t, v), interp_rf(x0, x1, t), atol=1e-14)


@pytest.mark.parametrize("h", [0.5, 1.5, 2.0])
def test_closed_form_endpoint_recovers_target(pair, h):
    x0, x1 = pair
    v, a, _ = exact_field_oracle(x0, x1, 0.3, h)
    assert_allclose(closed_form_endpoint(x0, v, a), x1, atol=1e-14)


def test_acceleration_is_constant_along_the_path(pair):
    x0, x1 = pair
    v = velocity_target(x0, x1, 2.0)
    a = acceleration_target(x0, x1, v)
    ts = np.linspace(0.0, 1.0, 9)
    derivs = np.array([caf_time_derivative(x0, x1, t, v) for t in ts])
    # finite differences of the rate are constant and equal to a
    assert_allclose(np.diff(derivs, axis=0) / np.diff(ts)[:, None], np.tile(a, (8, 1)), atol=1e-12)


def test_time_derivative_matches_numerical_derivative(pair):
    x0, x1 = pair
    v = velocity_target(x0, x1, 1.5)
    t, eps = 0.4, 1e-6
    numeric = (interp_caf(x0, x1, t + eps, v) - interp_caf(x0, x1, t - eps, v)) / (2 * eps)
    assert_allclose(caf_time_derivative(x0, x1, t, v), numeric, atol=1e-8)


def test_batched_time_broadcasts_per_row():
    x0 = np.zeros((3, 2))
    x1 = np.ones((3, 2))
    out = interp_rf(x0, x1, np.array([0.0, 0.5, 1.0]))
    assert_allclose(out, [[0, 0], [0.5, 0.5], [1, 1]])


@pytest.mark.parametrize("t", [-0.01, 1.01])
def test_time_outside_unit_interval_is_rejected(pair, t):
    with pytest.raises(ValueError):
        interp_rf(*pair, t)


def test_dimension_mismatch_is_rejected():
    with pytest.raises(ShapeError):
        interp_rf(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(ShapeError):
        acceleration_target(np.zeros(2), np.zeros(2), np.zeros(3))
    with pytest.raises(ShapeError):
        interp_rf(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros(3))


def test_flow_config_grid():
    cfg = FlowConfig(h=1.5, n_steps=4)
    assert cfg.dt == 0.25
    assert [cfg.grid_time(i) for i in range(5)] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert cfg.midpoint(0) == 0.125 and cfg.midpoint(3) == 0.875


def test_flow_config_rejects_bad_values():
    with pytest.raises(ValueError):
        FlowConfig(n_steps=0)
    with pytest.raises(ValueError):
        FlowConfig(h=float("inf"))
    with pytest.raises(ValueError):
        FlowConfig(time_dist="logit_normal")


def test_exact_fields_follow_the_pairs():
    x0 = np.array([[0.0, 0.0], [1.0, 2.0]])
    x1 = np.array([[2.0, 2.0], [-1.0, 0.0]])
    fields = ExactFields(x0, x1, h=0.5)
    assert_allclose(fields.velocity(x0, 0.0), 0.5 * (x1 - x0))
    assert_allclose(fields.acceleration(x0, 0.0), (x1 - x0))
    assert_allclose(fields.rf_velocity(x0, 0.7), x1 - x0)
    with pytest.raises(ShapeError):
        fields.velocity(np.zeros((3, 2)), 0.0)
