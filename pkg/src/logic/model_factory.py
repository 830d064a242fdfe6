# src/logic/model_factory.py
from typing import Optional

import numpy as np

from src.config import MODEL_DEFAULTS
from src.logic.nnsub import MlpModel, build_model, forward_batch
from src.models_config import SUPPORTED_ACTIVATIONS, input_width


def get_model_instance(
    role: str,
    dim: int,
    seed: int,
    hidden_layers: Optional[int] = None,
    hidden_units: Optional[int] = None,
    activation: Optional[str] = None,
) -> MlpModel:
    """
    Factory function to build a freshly initialized network for a role.

    Args:
        role (str): One of the roles in SUPPORTED_ROLES (e.g. 'rf_velocity').
        dim (int): Data dimension d; the output is always d-dimensional.
        seed (int): Initialization seed.
        hidden_layers, hidden_units, activation: Architecture overrides;
            defaults come from MODEL_DEFAULTS.

    Returns:
        An MlpModel whose input width matches the role's input layout.
    """
    activation = activation or MODEL_DEFAULTS["activation"]
    if activation not in SUPPORTED_ACTIVATIONS:
        raise ValueError(f"Unsupported activation '{activation}'")
    layers = MODEL_DEFAULTS["hidden_layers"] if hidden_layers is None else hidden_layers
    units = MODEL_DEFAULTS["hidden_units"] if hidden_units is None else hidden_units
    dims = [input_width(role, dim)] + [units] * layers + [dim]
    return build_model(dims, activation, seed)


def acceleration_role(ivc: bool) -> str:
    return "caf_acceleration" if ivc else "caf_acceleration_plain"


def network_inputs(x, t, v=None) -> np.ndarray:
    """Concatenate [x, t, v] into a network input batch; t may be a scalar."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t_col = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (x.shape[0], 1))
    blocks = [x, t_col]
    if v is not None:
        blocks.append(np.atleast_2d(np.asarray(v, dtype=np.float64)))
    return np.concatenate(blocks, axis=1)


class VelocityNet:
    """Field view of a velocity network: v(x, t)."""

    def __init__(self, model: MlpModel):
        self.model = model

    def __call__(self, x, t) -> np.ndarray:
        return forward_batch(self.model, network_inputs(x, t))


class AccelerationNet:
    """Field view of an acceleration network: a(x, t, v); v is ignored without IVC."""

    def __init__(self, model: MlpModel, ivc: bool):
        self.model = model
        self.ivc = ivc

    def __call__(self, x, t, v=None) -> np.ndarray:
        if self.ivc and v is None:
            raise ValueError("acceleration network with IVC needs the initial velocity")
        return forward_batch(self.model, network_inputs(x, t, v if self.ivc else None))
