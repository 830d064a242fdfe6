# src/models_config.py

# --- Network roles ---
# Each role names the blocks concatenated into the network input, in order.
# "x" and "v" contribute `dim` columns, "t" contributes one column.

SUPPORTED_ROLES = {
    "rf_velocity": {
        "inputs": ("x", "t"),
        "description": "Rectified-flow velocity v(x_t, t)",
    },
    "caf_velocity": {
        "inputs": ("x", "t"),
        "description": "CAF initial velocity v(x_t, t) regressed onto h(x1 - x0)",
    },
    "caf_acceleration": {
        "inputs": ("x", "t", "v"),
        "description": "CAF acceleration a(x_t, t, v) with initial-velocity conditioning",
    },
    "caf_acceleration_plain": {
        "inputs": ("x", "t"),
        "description": "CAF acceleration a(x_t, t) without conditioning",
    },
}

SUPPORTED_ACTIVATIONS = ("relu", "tanh", "gelu")


def input_width(role: str, dim: int) -> int:
    """Network input width for a role in `dim` dimensions."""
    if role not in SUPPORTED_ROLES:
        raise ValueError(f"Unsupported model role: {role}")
    return sum(1 if block == "t" else dim for block in SUPPORTED_ROLES[role]["inputs"])
