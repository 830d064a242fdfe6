"""
Training objectives and loops.

Rectified-flow velocity regression, reflow to build deterministic couplings,
CAF initial-velocity regression and CAF acceleration regression with
initial-velocity conditioning (IVC). The distance d is squared L2, averaged
over the batch.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from src.config import MODEL_DEFAULTS, REFLOW_DEFAULTS, TRAIN_DEFAULTS
from src.logic.datasets import Coupling, DistributionSpec, sample_distribution
from src.logic.errors import OptimizerError, TrainingError
from src.logic.flowcore import FlowConfig, acceleration_target, interp_caf, interp_rf, velocity_target
from src.logic.model_factory import VelocityNet, acceleration_role, get_model_instance, network_inputs
from src.logic.nnsub import (
    Gradients,
    MlpModel,
    adam_step,
    backward_from_cache,
    forward_batch,
    forward_with_cache,
    init_adam,
    make_rng,
    parameter_hash,
    zero_grads,
)
from src.logic.sampling import integrate_rf
from src.Utilities.utils import derive_seed

logger = logging.getLogger(__name__)

Objective = Literal["rf", "caf_velocity", "caf_acceleration"]


class TrainConfig(BaseModel):
    """Optimizer, schedule and conditioning settings for one training phase."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    iterations: int = Field(TRAIN_DEFAULTS["iterations"], ge=1)
    batch_size: int = Field(TRAIN_DEFAULTS["batch_size"], ge=1)
    lr: float = Field(TRAIN_DEFAULTS["lr"], gt=0.0)
    beta1: float = Field(TRAIN_DEFAULTS["beta1"], ge=0.0, lt=1.0)
    beta2: float = Field(TRAIN_DEFAULTS["beta2"], ge=0.0, lt=1.0)
    eps: float = Field(TRAIN_DEFAULTS["eps"], gt=0.0)
    seed: int = Field(TRAIN_DEFAULTS["seed"], ge=0)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    ivc: bool = TRAIN_DEFAULTS["ivc"]
    teacher_forcing: bool = TRAIN_DEFAULTS["teacher_forcing"]
    hidden_layers: int = Field(MODEL_DEFAULTS["hidden_layers"], ge=0)
    hidden_units: int = Field(MODEL_DEFAULTS["hidden_units"], ge=1)
    activation: Literal["relu", "tanh", "gelu"] = MODEL_DEFAULTS["activation"]
    log_every: int = Field(TRAIN_DEFAULTS["log_every"], ge=1)
    divergence_threshold: float = Field(TRAIN_DEFAULTS["divergence_threshold"], gt=0.0)
    lr_schedule: Literal["constant", "cosine"] = TRAIN_DEFAULTS["lr_schedule"]
    lr_floor: float = Field(TRAIN_DEFAULTS["lr_floor"], ge=0.0, le=1.0)

    @model_validator(mode="before")
    @classmethod
    def _collapse_teacher_forcing(cls, data: Any) -> Any:
        # without conditioning there is nothing to force; keep one canonical value
        if isinstance(data, dict) and data.get("ivc") is False:
            data = {**data, "teacher_forcing": True}
        return data


@dataclass(eq=False)
class TrainReport:
    objective: str
    loss_curve: np.ndarray
    wallclock_curve: np.ndarray
    final_loss: float
    wallclock: float
    config: Dict[str, Any] = field(default_factory=dict)
    model_hash: str = ""


@dataclass(eq=False)
class LossResult:
    """Batch loss and gradients keyed by network role ('velocity', 'acceleration')."""

    loss: float
    grads: Dict[str, Gradients]


@dataclass(eq=False)
class CafModels:
    velocity: MlpModel
    acceleration: MlpModel
    ivc: bool
    velocity_report: Optional[TrainReport] = None
    acceleration_report: Optional[TrainReport] = None


def _check_loss(loss: float, objective: str, x0: np.ndarray, t_batch: np.ndarray) -> None:
    if not np.isfinite(loss):
        raise TrainingError(
            f"non-finite {objective} loss ({loss}); batch of {x0.shape[0]}, "
            f"|x0|max={np.nanmax(np.abs(x0)):.3g}, t in [{t_batch.min():.3f}, {t_batch.max():.3f}]"
        )


def _regress(model: MlpModel, inputs: np.ndarray, target: np.ndarray) -> Tuple[float, Gradients]:
    """Mean squared-L2 regression loss and its parameter gradients."""
    pred, cache = forward_with_cache(model, inputs)
    diff = pred - target
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grads, _ = backward_from_cache(model, cache, 2.0 * diff / diff.shape[0])
    return loss, grads


def rf_velocity_loss(x0, x1, model: MlpModel, t_batch) -> LossResult:
    """Mean ||(x1 - x0) - v(x_t, t)||^2 on the linear interpolant."""
    x0, x1, t_batch = np.atleast_2d(x0), np.atleast_2d(x1), np.atleast_1d(t_batch)
    xt = interp_rf(x0, x1, t_batch)
    loss, grads = _regress(model, network_inputs(xt, t_batch), x1 - x0)
    _check_loss(loss, "rf", x0, t_batch)
    return LossResult(loss, {"velocity": grads})


def caf_velocity_loss(x0, x1, model: MlpModel, t_batch, h: float) -> LossResult:
    """Mean ||h (x1 - x0) - v(x_t, t)||^2 with x_t on the CAF interpolant.

    The target is the initial velocity, so it does not depend on t.
    """
    x0, x1, t_batch = np.atleast_2d(x0), np.atleast_2d(x1), np.atleast_1d(t_batch)
    v = velocity_target(x0, x1, h)
    xt = interp_caf(x0, x1, t_batch, v)
    loss, grads = _regress(model, network_inputs(xt, t_batch), v)
    _check_loss(loss, "caf_velocity", x0, t_batch)
    return LossResult(loss, {"velocity": grads})


def caf_acceleration_loss(
    x0,
    x1,
    v_model: Optional[MlpModel],
    a_model: MlpModel,
    t_batch,
    h: float,
    ivc: bool,
    teacher_forcing: bool,
) -> LossResult:
    """Mean ||sg[a] - a_phi(x_t, t, v_cond)||^2.

    v_cond is the ground-truth initial velocity under teacher forcing and the
    frozen velocity network's estimate otherwise. Neither the target nor the
    conditioning carries gradient, so the velocity entry is all zeros.
    """
    x0, x1, t_batch = np.atleast_2d(x0), np.atleast_2d(x1), np.atleast_1d(t_batch)
    v = velocity_target(x0, x1, h)
    target = acceleration_target(x0, x1, v)
    xt = interp_caf(x0, x1, t_batch, v)
    cond = None
    if ivc:
        if teacher_forcing:
            cond = v
        else:
            if v_model is None:
                raise TrainingError("acceleration training without teacher forcing needs a velocity model")
            cond = forward_batch(v_model, network_inputs(xt, t_batch))
    loss, grads = _regress(a_model, network_inputs(xt, t_batch, cond), target)
    _check_loss(loss, "caf_acceleration", x0, t_batch)
    result = {"acceleration": grads}
    if v_model is not None:
        result["velocity"] = zero_grads(v_model)
    return LossResult(loss, result)


def learning_rate(config: TrainConfig, iteration: int) -> float:
    """Step size at an iteration; cosine decays from lr to lr * lr_floor."""
    if config.lr_schedule == "constant":
        return config.lr
    floor = config.lr * config.lr_floor
    return floor + 0.5 * (config.lr - floor) * (1.0 + math.cos(math.pi * iteration / config.iterations))


def train(
    model: MlpModel,
    coupling: Coupling,
    config: TrainConfig,
    objective: Objective,
    velocity_model: Optional[MlpModel] = None,
    show_progress: bool = False,
) -> Tuple[MlpModel, TrainReport]:
    """
    Minibatch Adam on one objective.

    Args:
        model: Network being trained (returned updated; the input is not mutated).
        coupling: Training pairs.
        config: Optimizer and flow settings.
        objective: 'rf', 'caf_velocity' or 'caf_acceleration'.
        velocity_model: Frozen velocity network, used by 'caf_acceleration'.

    Returns:
        (trained model, TrainReport)

    Raises:
        TrainingError: empty coupling, oversize batch, non-finite or diverging loss.
    """
    n = len(coupling)
    if n == 0:
        raise TrainingError("cannot train on an empty coupling")
    if config.batch_size > n:
        raise TrainingError(f"batch_size {config.batch_size} exceeds coupling size {n}")

    rng = make_rng(derive_seed(config.seed, "batches", objective))
    state = init_adam(model, config.lr, config.beta1, config.beta2, config.eps)
    losses = np.empty(config.iterations)
    clock = np.empty(config.iterations)
    h = config.flow.h
    start = time.perf_counter()

    for it in tqdm(range(config.iterations), desc=objective, disable=not show_progress, leave=False):
        state = replace(state, lr=learning_rate(config, it))
        idx = rng.choice(n, size=config.batch_size, replace=False)
        t_batch = rng.random(config.batch_size)
        x0, x1 = coupling.x0[idx], coupling.x1[idx]
        if objective == "rf":
            result = rf_velocity_loss(x0, x1, model, t_batch)
            key = "velocity"
        elif objective == "caf_velocity":
            result = caf_velocity_loss(x0, x1, model, t_batch, h)
            key = "velocity"
        elif objective == "caf_acceleration":
            result = caf_acceleration_loss(
                x0, x1, velocity_model, model, t_batch, h, config.ivc, config.teacher_forcing
            )
            key = "acceleration"
        else:
            raise ValueError(f"Unsupported objective: {objective}")

        if result.loss > config.divergence_threshold:
            raise TrainingError(
                f"{objective} loss diverged at iteration {it}: {result.loss:.6g} > {config.divergence_threshold:g}"
            )
        try:
            model, state = adam_step(model, state, result.grads[key])
        except OptimizerError as e:
            raise TrainingError(f"{objective} iteration {it}: {e}") from e
        losses[it] = result.loss
        clock[it] = time.perf_counter() - start
        if (it + 1) % config.log_every == 0:
            logger.debug("%s iteration %d loss %.6g", objective, it + 1, result.loss)

    report = TrainReport(
        objective=objective,
        loss_curve=losses,
        wallclock_curve=clock,
        final_loss=float(losses[-1]),
        wallclock=float(clock[-1]),
        config=config.model_dump(mode="json"),
        model_hash=parameter_hash(model),
    )
    logger.info("%s training done: final loss %.6g in %.1fs", objective, report.final_loss, report.wallclock)
    return model, report


def train_rf(coupling: Coupling, config: TrainConfig, show_progress: bool = False) -> Tuple[MlpModel, TrainReport]:
    """Train a rectified-flow velocity network from a fresh initialization."""
    model = get_model_instance(
        "rf_velocity",
        coupling.dim,
        derive_seed(config.seed, "init", "rf_velocity"),
        config.hidden_layers,
        config.hidden_units,
        config.activation,
    )
    return train(model, coupling, config, "rf", show_progress=show_progress)


def train_caf(coupling: Coupling, config: TrainConfig, show_progress: bool = False) -> CafModels:
    """Two-phase CAF training: velocity first, then acceleration against the frozen velocity net."""
    arch = (config.hidden_layers, config.hidden_units, config.activation)
    v_model = get_model_instance("caf_velocity", coupling.dim, derive_seed(config.seed, "init", "caf_velocity"), *arch)
    a_role = acceleration_role(config.ivc)
    a_model = get_model_instance(a_role, coupling.dim, derive_seed(config.seed, "init", a_role), *arch)

    v_model, v_report = train(v_model, coupling, config, "caf_velocity", show_progress=show_progress)
    frozen_hash = parameter_hash(v_model)
    a_model, a_report = train(
        a_model, coupling, config, "caf_acceleration", velocity_model=v_model, show_progress=show_progress
    )
    if parameter_hash(v_model) != frozen_hash:
        raise TrainingError("velocity network changed during acceleration training")
    return CafModels(v_model, a_model, config.ivc, v_report, a_report)


def reflow(
    rf_model: MlpModel,
    src_spec: DistributionSpec,
    n_pairs: int,
    sim_steps: int = REFLOW_DEFAULTS["sim_steps"],
    seed: int = 0,
    max_drop_fraction: float = REFLOW_DEFAULTS["max_drop_fraction"],
) -> Coupling:
    """
    Build a deterministic coupling (x0, Phi(x0)) by Euler-simulating rf_model.

    Pairs whose trajectory goes non-finite are dropped; more than
    max_drop_fraction of drops aborts.
    """
    if sim_steps < 1:
        raise TrainingError(f"sim_steps must be >= 1, got {sim_steps}")
    x0 = sample_distribution(src_spec, n_pairs, derive_seed(seed, "reflow", "source"))
    x1 = integrate_rf(x0, VelocityNet(rf_model), sim_steps)
    finite = np.all(np.isfinite(x1), axis=1)
    dropped = int(n_pairs - finite.sum())
    if dropped > max_drop_fraction * n_pairs:
        raise TrainingError(f"reflow dropped {dropped}/{n_pairs} non-finite trajectories (at most {max_drop_fraction:.0%} allowed)")
    if dropped:
        logger.warning("reflow dropped %d non-finite trajectories", dropped)
    provenance = f"reflow:rf={parameter_hash(rf_model)[:16]}:steps={sim_steps}:seed={seed}:dropped={dropped}"
    return Coupling(x0[finite], x1[finite], "deterministic", provenance)


def write_loss_log(report: TrainReport, path: Union[str, Path]) -> Path:
    """CSV loss log with columns iteration, loss, wallclock."""
    frame = pd.DataFrame(
        {
            "iteration": np.arange(1, len(report.loss_curve) + 1),
            "loss": report.loss_curve,
            "wallclock": report.wallclock_curve,
        }
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    return path
