"""
Dense-network substrate for the flow models.

Sequential MLPs in float64 with manual backpropagation, a pure Adam step,
deterministic initialization and a versioned binary checkpoint format.
Weights are stored as (out, in) matrices so a layer computes y = W x + b.
"""

import struct
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.config import FILE_FORMATS
from src.logic.errors import CheckpointError, OptimizerError, ShapeError
from src.Utilities.utils import sha256_hex

# Checkpoint ids; order is part of the file format
ACTIVATION_IDS = {"relu": 0, "tanh": 1, "gelu": 2}
ACTIVATION_NAMES = {v: k for k, v in ACTIVATION_IDS.items()}

_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


@dataclass(eq=False)
class MlpModel:
    """Sequential MLP; hidden layers use `activation`, the output layer is identity."""

    layer_dims: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
            raise ShapeError(f"layer_dims must hold at least two positive sizes, got {self.layer_dims}")
        if self.activation not in ACTIVATION_IDS:
            raise ValueError(f"Unsupported activation: {self.activation}")
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError(
                f"expected {n_layers} weight/bias pairs for dims {self.layer_dims}, "
                f"got {len(self.weights)} weights and {len(self.biases)} biases"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected_w = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expected_w or b.shape != (self.layer_dims[i + 1],):
                raise ShapeError(
                    f"layer {i}: weight {w.shape} / bias {b.shape} inconsistent with "
                    f"expected {expected_w} / {(self.layer_dims[i + 1],)}"
                )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.seed,
        )


@dataclass(eq=False)
class Gradients:
    """Parameter gradients with the same layout as MlpModel."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def is_zero(self) -> bool:
        return all(not np.any(a) for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(eq=False)
class AdamState:
    first_moment: Gradients
    second_moment: Gradients
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(eq=False)
class ForwardCache:
    """Layer inputs and pre-activations kept for the backward pass."""

    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so draws depend only on (seed, position)."""
    return np.random.Generator(np.random.Philox(int(seed)))


def build_model(layer_dims: Sequence[int], activation: str = "relu", seed: int = 0) -> MlpModel:
    """Build an MLP with He-uniform (relu/gelu) or Xavier-uniform (tanh) weights and zero biases."""
    if activation not in ACTIVATION_IDS:
        raise ValueError(f"Unsupported activation: {activation}")
    dims = [int(d) for d in layer_dims]
    rng = make_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        if activation == "tanh":
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        else:
            limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(dims), weights, biases, activation, int(seed))


def model_from_arrays(weights: Sequence, biases: Sequence, activation: str = "relu", seed: int = 0) -> MlpModel:
    """Wrap explicit parameter arrays (used for hand-built fixtures)."""
    ws = [np.atleast_2d(np.asarray(w, dtype=np.float64)) for w in weights]
    bs = [np.atleast_1d(np.asarray(b, dtype=np.float64)) for b in biases]
    dims = [ws[0].shape[1]] + [w.shape[0] for w in ws]
    return MlpModel(tuple(dims), ws, bs, activation, seed)


def zero_grads(model: MlpModel) -> Gradients:
    return Gradients([np.zeros_like(w) for w in model.weights], [np.zeros_like(b) for b in model.biases])


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    # gelu, tanh approximation
    return 0.5 * z * (1.0 + np.tanh(_GELU_K * (z + _GELU_C * z**3)))


def _activate_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    if activation == "tanh":
        return 1.0 - np.tanh(z) ** 2
    u = np.tanh(_GELU_K * (z + _GELU_C * z**3))
    return 0.5 * (1.0 + u) + 0.5 * z * (1.0 - u**2) * _GELU_K * (1.0 + 3.0 * _GELU_C * z**2)


def _as_batch(model: MlpModel, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"input shape {x.shape} does not match model input width {model.input_dim} "
            f"(layer_dims={model.layer_dims})"
        )
    return x


def forward_with_cache(model: MlpModel, inputs) -> Tuple[np.ndarray, ForwardCache]:
    """Batched forward pass that records what backward needs."""
    a = _as_batch(model, inputs)
    cache = ForwardCache()
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        cache.inputs.append(a)
        z = a @ w.T + b
        cache.pre_activations.append(z)
        a = z if i == last else _activate(z, model.activation)
    return a, cache


def forward_batch(model: MlpModel, inputs) -> np.ndarray:
    """Evaluate the network on a (B, in) batch."""
    out, _ = forward_with_cache(model, inputs)
    return out


def forward(model: MlpModel, input_vector) -> np.ndarray:
    """Evaluate the network on a single input vector."""
    x = np.asarray(input_vector, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"forward expects a vector, got shape {x.shape}")
    return forward_batch(model, x[None, :])[0]


def backward_from_cache(model: MlpModel, cache: ForwardCache, output_grad) -> Tuple[Gradients, np.ndarray]:
    """Backpropagate dL/d(output) through a cached forward pass.

    Returns:
        (parameter gradients, gradient w.r.t. the batch input)
    """
    g = np.asarray(output_grad, dtype=np.float64)
    expected = (cache.inputs[0].shape[0], model.output_dim)
    if g.shape != expected:
        raise ShapeError(f"output_grad shape {g.shape} does not match forward output {expected}")
    n_layers = len(model.weights)
    grad_w: List[Optional[np.ndarray]] = [None] * n_layers
    grad_b: List[Optional[np.ndarray]] = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * _activate_grad(cache.pre_activations[i], model.activation)
        grad_w[i] = g.T @ cache.inputs[i]
        grad_b[i] = g.sum(axis=0)
        g = g @ model.weights[i]
    return Gradients(grad_w, grad_b), g


def backward_batch(model: MlpModel, inputs, output_grad) -> Tuple[Gradients, np.ndarray]:
    _, cache = forward_with_cache(model, inputs)
    return backward_from_cache(model, cache, output_grad)


def backward(model: MlpModel, input_vector, output_grad) -> Tuple[Gradients, np.ndarray]:
    """Gradients of a scalar loss for a single input, seeded with dL/d(output)."""
    x = np.asarray(input_vector, dtype=np.float64)
    g = np.asarray(output_grad, dtype=np.float64)
    if x.ndim != 1 or g.ndim != 1:
        raise ShapeError(f"backward expects vectors, got input {x.shape} and output_grad {g.shape}")
    grads, input_grad = backward_batch(model, x[None, :], g[None, :])
    return grads, input_grad[0]


def init_adam(model: MlpModel, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(zero_grads(model), zero_grads(model), 0, lr, beta1, beta2, eps)


def adam_step(model: MlpModel, state: AdamState, grads: Gradients) -> Tuple[MlpModel, AdamState]:
    """Bias-corrected Adam update; returns new model and state, inputs untouched."""
    if len(grads.weights) != len(model.weights) or any(
        g.shape != p.shape for g, p in zip(grads.arrays(), model.weights + model.biases)
    ):
        raise ShapeError("gradient structure does not match model parameters")
    if not grads.is_finite():
        raise OptimizerError(f"non-finite gradient at optimizer step {state.step_count + 1}; step rejected")

    t = state.step_count + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t

    def _update(params, grad_list, m_list, v_list):
        new_p, new_m, new_v = [], [], []
        for p, g, m, v in zip(params, grad_list, m_list, v_list):
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
            new_p.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
            new_m.append(m)
            new_v.append(v)
        return new_p, new_m, new_v

    w, mw, vw = _update(model.weights, grads.weights, state.first_moment.weights, state.second_moment.weights)
    b, mb, vb = _update(model.biases, grads.biases, state.first_moment.biases, state.second_moment.biases)
    new_model = MlpModel(model.layer_dims, w, b, model.activation, model.seed)
    new_state = AdamState(Gradients(mw, mb), Gradients(vw, vb), t, state.lr, state.beta1, state.beta2, state.eps)
    return new_model, new_state


# --- checkpoint format -----------------------------------------------------
# magic(4s) version(u32) n_dims(u32) dims(u32 * n_dims) activation(u8) seed(u64)
# params row-major f64 LE (W then b per layer), crc32(u32) over all preceding bytes

_HEAD = struct.Struct("<4sII")


def save_checkpoint(model: MlpModel) -> bytes:
    """Serialize a model to the versioned binary checkpoint format."""
    parts = [
        _HEAD.pack(FILE_FORMATS["checkpoint_magic"], FILE_FORMATS["checkpoint_version"], len(model.layer_dims)),
        struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims),
        struct.pack("<BQ", ACTIVATION_IDS[model.activation], model.seed),
    ]
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def load_checkpoint(payload: bytes) -> MlpModel:
    """Parse a checkpoint; raises CheckpointError on any inconsistency."""
    if len(payload) < _HEAD.size + 4:
        raise CheckpointError(f"checkpoint truncated: {len(payload)} bytes")
    magic, version, n_dims = _HEAD.unpack_from(payload, 0)
    if magic != FILE_FORMATS["checkpoint_magic"]:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != FILE_FORMATS["checkpoint_version"]:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (reader understands {FILE_FORMATS['checkpoint_version']})"
        )
    body, (crc,) = payload[:-4], struct.unpack("<I", payload[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC32 mismatch (corrupt payload)")
    offset = _HEAD.size
    try:
        dims = struct.unpack_from(f"<{n_dims}I", body, offset)
        offset += 4 * n_dims
        act_id, seed = struct.unpack_from("<BQ", body, offset)
        offset += struct.calcsize("<BQ")
    except struct.error as e:
        raise CheckpointError(f"checkpoint header truncated: {e}") from e
    if act_id not in ACTIVATION_NAMES:
        raise CheckpointError(f"unknown activation id {act_id}")
    expected = sum(o * i + o for i, o in zip(dims[:-1], dims[1:])) * 8
    if len(body) - offset != expected:
        raise CheckpointError(f"checkpoint parameter block has {len(body) - offset} bytes, expected {expected}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(body, dtype="<f8", count=fan_in * fan_out, offset=offset).reshape(fan_out, fan_in)
        offset += w.nbytes
        b = np.frombuffer(body, dtype="<f8", count=fan_out, offset=offset)
        offset += b.nbytes
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    try:
        return MlpModel(tuple(dims), weights, biases, ACTIVATION_NAMES[act_id], int(seed))
    except ShapeError as e:
        raise CheckpointError(f"checkpoint describes an invalid network: {e}") from e


def parameter_hash(model: MlpModel) -> str:
    return sha256_hex(save_checkpoint(model))
