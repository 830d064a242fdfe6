"""
Quantitative analysis of trained flows.

NFSS straightness, coupling preservation, sliced-Wasserstein sample quality,
per-path straightness, round-trip reconstruction error, bootstrap confidence
intervals and the CSV results ledger.
"""

import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import portalocker
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.config import LEDGER_COLUMNS, METRIC_DEFAULTS
from src.logic.datasets import Coupling
from src.logic.errors import MetricError
from src.logic.nnsub import make_rng
from src.logic.sampling import FlowBundle, TrajectoryLog
from src.Utilities.utils import derive_seed, format_float

logger = logging.getLogger(__name__)

_TINY = 1e-12


class MetricReport(BaseModel):
    """One measured quantity with its bootstrap 95% half-width."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    value: float
    n_samples: int = Field(ge=0)
    ci_halfwidth: float = Field(0.0, ge=0.0)
    config: Dict[str, Any] = Field(default_factory=dict)
    extras: Dict[str, float] = Field(default_factory=dict)

    @field_validator("value")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError(f"metric value must be finite, got {value}")
        return value


def bootstrap_ci(values, seed: int, n_boot: int = METRIC_DEFAULTS["bootstrap_samples"], level: float = 0.95) -> float:
    """Half-width of the percentile bootstrap interval of the mean."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        return 0.0
    rng = make_rng(derive_seed(seed, "bootstrap"))
    idx = rng.integers(0, values.size, size=(n_boot, values.size))
    means = values[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return float(max(hi - lo, 0.0) / 2.0)


def nfss_term(displacement, velocity) -> np.ndarray:
    """||u/|u| - w/|w|||^2 row-wise; callers filter near-zero norms first."""
    u = np.atleast_2d(displacement)
    w = np.atleast_2d(velocity)
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    w = w / np.linalg.norm(w, axis=1, keepdims=True)
    diff = u - w
    return np.sum(diff * diff, axis=1)


def nfss(
    bundle: FlowBundle,
    coupling: Coupling,
    n_t: int = METRIC_DEFAULTS["nfss_n_t"],
    sim_factor: int = METRIC_DEFAULTS["nfss_sim_factor"],
    seed: int = 0,
    max_skip_fraction: float = METRIC_DEFAULTS["max_nfss_skip_fraction"],
    n_boot: int = METRIC_DEFAULTS["bootstrap_samples"],
) -> MetricReport:
    """
    Normalized Flow Straightness Score.

    Each x0 of the coupling is simulated with the bundle's own sampler on a
    grid of n_t * sim_factor steps. At the n_t times j / n_t the unit
    instantaneous velocity is compared with the unit chord x1_hat - x0, where
    x1_hat is that simulation's endpoint. The coupling's own x1 is not used,
    so S measures the path the flow takes, not where it was supposed to land.

    Raises:
        MetricError: more than max_skip_fraction of the terms had a
            displacement or velocity norm below 1e-12.
    """
    if n_t < 1 or sim_factor < 1:
        raise MetricError(f"n_t and sim_factor must be >= 1, got {n_t}, {sim_factor}")
    x0 = coupling.x0
    n_fine = n_t * sim_factor
    x1_hat, log = bundle.sample(x0, n_fine)
    chord = x1_hat - x0
    v0 = bundle.initial_velocity(x0) if bundle.kind == "caf" else None

    terms = np.full((x0.shape[0], n_t), np.nan)
    chord_ok = np.linalg.norm(chord, axis=1) >= _TINY
    for j in range(n_t):
        t = j / n_t
        rate = bundle.rate(log.points[j * sim_factor], t, v0)
        ok = chord_ok & (np.linalg.norm(rate, axis=1) >= _TINY)
        if np.any(ok):
            terms[ok, j] = nfss_term(chord[ok], rate[ok])

    skipped = int(np.isnan(terms).sum())
    total = terms.size
    if skipped > max_skip_fraction * total:
        raise MetricError(f"NFSS skipped {skipped}/{total} terms with near-zero norms")
    if skipped:
        logger.info("NFSS skipped %d/%d degenerate terms", skipped, total)

    per_pair = np.nanmean(terms, axis=1)
    per_pair = per_pair[np.isfinite(per_pair)]
    return MetricReport(
        name="nfss",
        value=float(np.nanmean(terms)),
        n_samples=int(total - skipped),
        ci_halfwidth=bootstrap_ci(per_pair, seed, n_boot),
        config={"kind": bundle.kind, "n_t": n_t, "sim_steps": n_fine, "skipped": skipped},
    )


def _diameter(points: np.ndarray, chunk: int = 1024) -> float:
    """Largest pairwise distance, computed in row chunks."""
    best = 0.0
    for start in range(0, points.shape[0], chunk):
        block = points[start : start + chunk]
        d2 = np.sum((block[:, None, :] - points[None, :, :]) ** 2, axis=2)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def psnr_analog(mse: float, data_range: float, cap_db: float = METRIC_DEFAULTS["psnr_cap_db"]) -> float:
    """10 log10(range^2 / MSE), clipped to [-cap, cap]; zero error maps to the cap."""
    if mse <= 0.0:
        return cap_db
    if data_range <= 0.0:
        return -cap_db
    return float(np.clip(10.0 * math.log10(data_range**2 / mse), -cap_db, cap_db))


def coupling_preservation(
    coupling: Coupling,
    sampler: Callable[[np.ndarray, int], np.ndarray],
    n_steps: int,
    seed: int = 0,
    cap_db: float = METRIC_DEFAULTS["psnr_cap_db"],
    name: str = "coupling_preservation",
    n_boot: int = METRIC_DEFAULTS["bootstrap_samples"],
) -> MetricReport:
    """
    How well sampler(x0, N) lands on the x1 that x0 was paired with.

    Reports the mean L2 endpoint error, with a PSNR-analog in extras whose
    range is the diameter of the target points.
    """
    if len(coupling) == 0:
        raise MetricError("coupling preservation needs at least one pair")
    x1_hat = np.asarray(sampler(coupling.x0, n_steps), dtype=np.float64)
    diff = x1_hat - coupling.x1
    errors = np.linalg.norm(diff, axis=1)
    mse = float(np.mean(diff * diff))
    return MetricReport(
        name=name,
        value=float(errors.mean()),
        n_samples=len(coupling),
        ci_halfwidth=bootstrap_ci(errors, seed, n_boot),
        config={"n_steps": n_steps},
        extras={"psnr": psnr_analog(mse, _diameter(coupling.x1), cap_db)},
    )


def _projection_distance(a_sorted: np.ndarray, b_sorted: np.ndarray) -> float:
    """Exact 1-D W1 between two empirical laws given sorted samples."""
    na, nb = a_sorted.shape[0], b_sorted.shape[0]
    if na == nb:
        return float(np.mean(np.abs(a_sorted - b_sorted)))
    levels = np.union1d(np.arange(1, na + 1) / na, np.arange(1, nb + 1) / nb)
    widths = np.diff(np.concatenate([[0.0], levels]))
    mids = levels - widths / 2.0
    ia = np.minimum((mids * na).astype(int), na - 1)
    ib = np.minimum((mids * nb).astype(int), nb - 1)
    return float(np.sum(widths * np.abs(a_sorted[ia] - b_sorted[ib])))


def sliced_wasserstein(
    samples_a,
    samples_b,
    n_projections: int = METRIC_DEFAULTS["n_projections"],
    seed: int = 0,
    min_samples: int = METRIC_DEFAULTS["min_sw_samples"],
    n_boot: int = METRIC_DEFAULTS["bootstrap_samples"],
) -> MetricReport:
    """Average 1-D Wasserstein-1 distance over random unit directions."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if min(a.shape[0], b.shape[0]) < min_samples:
        raise MetricError(f"sliced Wasserstein needs at least {min_samples} samples per set, got {a.shape[0]} and {b.shape[0]}")
    if n_projections < 1:
        raise MetricError("n_projections must be >= 1")

    rng = make_rng(derive_seed(seed, "projections"))
    directions = rng.standard_normal((n_projections, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    proj_a = np.sort(a @ directions.T, axis=0)
    proj_b = np.sort(b @ directions.T, axis=0)
    per_projection = np.array([_projection_distance(proj_a[:, k], proj_b[:, k]) for k in range(n_projections)])
    return MetricReport(
        name="sliced_wasserstein",
        value=float(per_projection.mean()),
        n_samples=int(min(a.shape[0], b.shape[0])),
        ci_halfwidth=bootstrap_ci(per_projection, seed, n_boot),
        config={"n_projections": n_projections},
    )


def straightness_per_trajectory(log: TrajectoryLog) -> float:
    """
    Max perpendicular deviation from the chord, divided by the chord length.

    Returns NaN when the chord is shorter than 1e-12 (undefined).
    """
    points = log.points
    if points.shape[0] < 3:
        raise MetricError(f"straightness needs at least 3 logged points, got {points.shape[0]}")
    chord = points[-1] - points[0]
    length = float(np.linalg.norm(chord))
    if length < _TINY:
        logger.warning("straightness undefined: chord length %.3g", length)
        return float("nan")
    unit = chord / length
    rel = points - points[0]
    perp = rel - np.outer(rel @ unit, unit)
    return float(np.linalg.norm(perp, axis=1).max() / length)


def write_straightness_csv(logs: Sequence[TrajectoryLog], path: Union[str, Path]) -> Path:
    """Per-path straightness as a CSV with columns path, straightness (empty where undefined)."""
    frame = pd.DataFrame(
        {"path": np.arange(len(logs)), "straightness": [straightness_per_trajectory(log) for log in logs]}
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def reconstruction_error(
    x1, x1_hat, seed: int = 0, name: str = "reconstruction_error", n_boot: int = METRIC_DEFAULTS["bootstrap_samples"]
) -> MetricReport:
    errors = np.linalg.norm(np.atleast_2d(x1_hat) - np.atleast_2d(x1), axis=1)
    return MetricReport(
        name=name,
        value=float(errors.mean()),
        n_samples=int(errors.size),
        ci_halfwidth=bootstrap_ci(errors, seed, n_boot),
    )


def ledger_rows(reports: Iterable[MetricReport], config_hash: str, prefix: str = "") -> List[List[Any]]:
    """Flatten reports to ledger rows; every extra becomes its own '<name>.<key>' row."""
    rows = []
    for report in reports:
        name = f"{prefix}{report.name}"
        rows.append([name, format_float(report.value), format_float(report.ci_halfwidth), report.n_samples, config_hash])
        for key in sorted(report.extras):
            rows.append([f"{name}.{key}", format_float(report.extras[key]), format_float(0.0), report.n_samples, config_hash])
    return rows


def append_ledger_rows(rows: Sequence[Sequence[Any]], path: Union[str, Path], timeout: Optional[float] = 60.0) -> Path:
    """
    Append rows to a CSV ledger under an exclusive file lock.

    Columns are fixed (LEDGER_COLUMNS); the header is written once, when the
    file is created.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([list(r) for r in rows], columns=LEDGER_COLUMNS)
    lock_path = path.with_name(path.name + ".lock")
    with portalocker.Lock(str(lock_path), mode="a", timeout=timeout):
        write_header = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="", encoding="utf-8") as f:
            frame.to_csv(f, header=write_header, index=False, lineterminator="\n")
    logger.debug("appended %d ledger rows to %s", len(frame), path)
    return path


def append_ledger(
    reports: Sequence[MetricReport],
    path: Union[str, Path],
    config_hash: str,
    prefix: str = "",
    timeout: Optional[float] = 60.0,
) -> Path:
    return append_ledger_rows(ledger_rows(reports, config_hash, prefix), path, timeout)


def read_ledger(path: Union[str, Path]) -> pd.DataFrame:
    """Ledger as strings, so values keep their exact written form."""
    return pd.read_csv(path, dtype=str, keep_default_na=False)
