"""
Source/target distributions, couplings and coupling persistence.

Sample sets are (n, d) float64 arrays; row i is one Vec_d. Couplings keep
their pairs in creation order because coupling-preservation metrics compare
by index.
"""

import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.config import DATASET_PRESETS, FILE_FORMATS
from src.logic.errors import CouplingFormatError, DistributionError
from src.logic.nnsub import make_rng
from src.Utilities.utils import derive_seed, write_bytes_atomic

logger = logging.getLogger(__name__)

DistributionKind = Literal[
    "standard_gaussian", "gaussian_mixture", "two_moons", "checkerboard", "swiss_roll", "point_set"
]
PLANAR_KINDS = ("two_moons", "checkerboard", "swiss_roll")
COUPLING_MODES = {"stochastic": 0, "deterministic": 1}


class DistributionSpec(BaseModel):
    """A sampleable distribution in `dim` dimensions."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: DistributionKind
    dim: int = Field(2, ge=1)
    params: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_params(self) -> "DistributionSpec":
        p = self.params
        if self.kind in PLANAR_KINDS and self.dim != 2:
            raise ValueError(f"{self.kind} is only defined in 2 dimensions, got dim={self.dim}")
        if float(p.get("noise", 0.0)) < 0.0:
            raise ValueError("noise must be non-negative")
        if self.kind == "gaussian_mixture":
            mixture_components(self)
        if self.kind == "point_set":
            pts = np.asarray(p.get("points", []), dtype=np.float64)
            if pts.size == 0:
                raise ValueError("point_set requires a non-empty 'points' list")
            if pts.ndim != 2 or pts.shape[1] != self.dim:
                raise ValueError(f"point_set points must have dimension {self.dim}, got shape {pts.shape}")
        return self


def mixture_components(spec: DistributionSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Means (k, d), weights (k,) and isotropic scales (k,) of a mixture spec.

    Either explicit `means`/`weights`/`scales` or the ring shorthand
    `radius`/`n_modes`/`scale` (2-D, equal weights).
    """
    p = spec.params
    if "means" in p:
        means = np.asarray(p["means"], dtype=np.float64)
        k = means.shape[0] if means.ndim == 2 else 0
        weights = np.asarray(p.get("weights", [1.0 / max(k, 1)] * k), dtype=np.float64)
        scales = np.broadcast_to(np.asarray(p.get("scales", 1.0), dtype=np.float64), (k,)).copy()
    else:
        if spec.dim != 2:
            raise ValueError("ring-shaped mixture shorthand needs dim=2")
        k = int(p.get("n_modes", 8))
        if k < 1:
            raise ValueError("n_modes must be >= 1")
        angles = 2.0 * np.pi * np.arange(k) / k
        means = float(p.get("radius", 2.0)) * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        weights = np.full(k, 1.0 / k)
        scales = np.full(k, float(p.get("scale", 0.1)))
    if means.ndim != 2 or means.shape[0] == 0 or means.shape[1] != spec.dim:
        raise ValueError(f"mixture means must have shape (k, {spec.dim}), got {means.shape}")
    if weights.shape != (means.shape[0],) or np.any(weights <= 0.0):
        raise ValueError("mixture weights must be positive, one per mode")
    if abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError(f"mixture weights must sum to 1, got {weights.sum()!r}")
    if np.any(scales <= 0.0):
        raise ValueError("mixture scales must be positive")
    return means, weights, scales


def preset(name: str, dim: int = 2) -> DistributionSpec:
    """Look up a catalog distribution by name."""
    if name not in DATASET_PRESETS:
        raise DistributionError(f"Unknown dataset preset '{name}'. Available: {sorted(DATASET_PRESETS)}")
    entry = DATASET_PRESETS[name]
    try:
        return DistributionSpec(kind=entry["kind"], dim=dim, params=dict(entry["params"]))
    except ValueError as e:
        raise DistributionError(str(e)) from e


def sample_distribution(spec: DistributionSpec, n: int, seed: int) -> np.ndarray:
    """Draw n i.i.d. samples as an (n, dim) array; deterministic given seed."""
    if n < 1:
        raise DistributionError(f"sample count must be >= 1, got {n}")
    rng = make_rng(seed)
    p = spec.params
    noise = float(p.get("noise", 0.0))

    if spec.kind == "standard_gaussian":
        return rng.standard_normal((n, spec.dim))

    if spec.kind == "gaussian_mixture":
        means, weights, scales = mixture_components(spec)
        comp = rng.choice(len(weights), size=n, p=weights)
        return means[comp] + scales[comp, None] * rng.standard_normal((n, spec.dim))

    if spec.kind == "two_moons":
        theta = rng.uniform(0.0, np.pi, size=n)
        upper = rng.random(n) < 0.5
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.stack([x, y], axis=1) + noise * rng.standard_normal((n, 2))
        return 2.0 * (pts - np.array([0.5, 0.25]))

    if spec.kind == "checkerboard":
        cells = np.array([(i, j) for i in range(-2, 2) for j in range(-2, 2) if (i + j) % 2 == 0], dtype=np.float64)
        idx = rng.integers(0, len(cells), size=n)
        return cells[idx] + rng.random((n, 2))

    if spec.kind == "swiss_roll":
        theta = rng.uniform(1.5 * np.pi, 4.5 * np.pi, size=n)
        pts = np.stack([theta * np.cos(theta), theta * np.sin(theta)], axis=1) / 5.0
        return pts + noise * rng.standard_normal((n, 2))

    # point_set
    pts = np.asarray(p["points"], dtype=np.float64)
    return pts[rng.integers(0, len(pts), size=n)].copy()


@dataclass(eq=False)
class Coupling:
    """Ordered (x0, x1) pairs; x0[i] is paired with x1[i]."""

    x0: np.ndarray
    x1: np.ndarray
    mode: str = "stochastic"
    provenance: str = ""

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.ndim != 2 or self.x0.shape != self.x1.shape:
            raise CouplingFormatError(f"x0 {self.x0.shape} and x1 {self.x1.shape} must be matching (n, d) arrays")
        if self.mode not in COUPLING_MODES:
            raise CouplingFormatError(f"unknown coupling mode '{self.mode}'")
        if self.mode == "deterministic" and not self.provenance:
            raise CouplingFormatError("deterministic couplings must record their provenance")

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    @property
    def pairs(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.x0, self.x1))

    def subset(self, indices) -> "Coupling":
        idx = np.asarray(indices, dtype=np.int64)
        return Coupling(self.x0[idx], self.x1[idx], self.mode, self.provenance)

    def equals(self, other: "Coupling") -> bool:
        return (
            self.mode == other.mode
            and self.provenance == other.provenance
            and np.array_equal(self.x0, other.x0)
            and np.array_equal(self.x1, other.x1)
        )


def make_stochastic_coupling(src: DistributionSpec, tgt: DistributionSpec, n: int, seed: int) -> Coupling:
    """Independent draws from src and tgt paired by index."""
    if src.dim != tgt.dim:
        raise DistributionError(f"source dim {src.dim} does not match target dim {tgt.dim}")
    x0 = sample_distribution(src, n, derive_seed(seed, "source"))
    x1 = sample_distribution(tgt, n, derive_seed(seed, "target"))
    return Coupling(x0, x1, "stochastic", f"stochastic:{src.kind}->{tgt.kind}:seed={seed}")


def crossing_fixture() -> Coupling:
    """Two pairs whose straight interpolants cross at t=0.5, point (0, 0.5)."""
    x0 = np.array([[-1.0, 0.0], [-1.0, 1.0]])
    x1 = np.array([[1.0, 1.0], [1.0, 0.0]])
    return Coupling(x0, x1, "deterministic", "fixture:crossing")


def segment_intersection(p0, p1, q0, q1, tol: float = 1e-12) -> Optional[Tuple[float, np.ndarray]]:
    """Intersection of 2-D segments p0->p1 and q0->q1 strictly inside both.

    Returns:
        (fraction along p, intersection point) or None for parallel or
        non-intersecting segments.
    """
    p0, p1, q0, q1 = (np.asarray(a, dtype=np.float64) for a in (p0, p1, q0, q1))
    r, s = p1 - p0, q1 - q0
    denom = r[0] * s[1] - r[1] * s[0]
    if abs(denom) < tol:
        return None
    diff = q0 - p0
    u = (diff[0] * s[1] - diff[1] * s[0]) / denom
    w = (diff[0] * r[1] - diff[1] * r[0]) / denom
    if tol < u < 1.0 - tol and tol < w < 1.0 - tol:
        return float(u), p0 + u * r
    return None


def split_coupling(coupling: Coupling, n_test: int, seed: int) -> Tuple[Coupling, Coupling]:
    """Hold out n_test pairs; both parts keep the original relative order."""
    if not 0 < n_test < len(coupling):
        raise DistributionError(f"n_test must be in (0, {len(coupling)}), got {n_test}")
    perm = make_rng(seed).permutation(len(coupling))
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return coupling.subset(train_idx), coupling.subset(test_idx)


# --- persistence ---------------------------------------------------------
# magic(4s) version(u32) dim(u32) count(u64) mode(u8) provenance_len(u32) provenance(utf-8)
# pairs: x0 then x1 per pair, f64 LE; crc32(u32) over all preceding bytes

_HEADER = struct.Struct("<4sIIQBI")


def coupling_to_bytes(coupling: Coupling) -> bytes:
    prov = coupling.provenance.encode("utf-8")
    header = _HEADER.pack(
        FILE_FORMATS["coupling_magic"],
        FILE_FORMATS["coupling_version"],
        coupling.dim,
        len(coupling),
        COUPLING_MODES[coupling.mode],
        len(prov),
    )
    pairs = np.concatenate([coupling.x0, coupling.x1], axis=1)
    body = header + prov + np.ascontiguousarray(pairs, dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def coupling_from_bytes(payload: bytes) -> Coupling:
    if len(payload) < _HEADER.size + 4:
        raise CouplingFormatError(f"coupling file truncated: {len(payload)} bytes")
    magic, version, dim, count, mode_id, prov_len = _HEADER.unpack_from(payload, 0)
    if magic != FILE_FORMATS["coupling_magic"]:
        raise CouplingFormatError(f"bad coupling magic {magic!r}")
    if version != FILE_FORMATS["coupling_version"]:
        raise CouplingFormatError(f"unsupported coupling version {version}")
    body, (crc,) = payload[:-4], struct.unpack("<I", payload[-4:])
    if zlib.crc32(body) != crc:
        raise CouplingFormatError("coupling CRC32 mismatch (corrupt file)")
    modes = {v: k for k, v in COUPLING_MODES.items()}
    if mode_id not in modes:
        raise CouplingFormatError(f"unknown coupling mode id {mode_id}")
    offset = _HEADER.size + prov_len
    expected = count * 2 * dim * 8
    if dim == 0 or len(body) - offset != expected:
        raise CouplingFormatError(
            f"pair block has {len(body) - offset} bytes but header says dim={dim}, count={count} ({expected} bytes)"
        )
    try:
        provenance = body[_HEADER.size:offset].decode("utf-8")
    except UnicodeDecodeError as e:
        raise CouplingFormatError(f"coupling provenance is not valid UTF-8: {e}") from e
    pairs = np.frombuffer(body, dtype="<f8", offset=offset).reshape(count, 2 * dim).astype(np.float64)
    return Coupling(pairs[:, :dim], pairs[:, dim:], modes[mode_id], provenance)


def save_coupling(coupling: Coupling, path: Union[str, Path]) -> Path:
    out = write_bytes_atomic(path, coupling_to_bytes(coupling))
    logger.debug("saved %d %s pairs to %s", len(coupling), coupling.mode, out)
    return out


def load_coupling(path: Union[str, Path]) -> Coupling:
    return coupling_from_bytes(Path(path).read_bytes())


def export_coupling_csv(coupling: Coupling, path: Union[str, Path]) -> Path:
    """CSV with columns x0_0..x0_{d-1}, x1_0..x1_{d-1} for plotting."""
    d = coupling.dim
    columns = [f"x0_{i}" for i in range(d)] + [f"x1_{i}" for i in range(d)]
    frame = pd.DataFrame(np.concatenate([coupling.x0, coupling.x1], axis=1), columns=columns)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path
