"""
CCMForge Fiber Model

Synthesizes the incoherent intensity transfer operator of the cannula and
applies it to objects: y = M . vec(x) + noise.

Each column of M is the speckle intensity pattern produced on the sensor by
a single object pixel. A set of smoothed complex random mode fields is mixed
with smoothly varying per-pixel complex couplings, and the squared modulus
of the sum is recorded, then normalized to unit energy per column.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from math import isqrt
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, get_lapack_funcs, lu_factor
from scipy.ndimage import gaussian_filter

from config import (
    COND_EXACT_LIMIT,
    DEFAULT_COUPLING_CORRELATION_PX,
    FOV_DIAMETER_UM,
    NUM_THREADS,
)
from image_core import (
    ApertureMask,
    BadMagicError,
    ImageFormatError,
    ImageGrid,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    aperture_mask_array,
    make_rng,
)
from utils_fs import atomic_write_bytes
from utils_log import get_logger

logger = get_logger("fiber")

COLUMN_NORMS = ("unit_sum", "none")

# Fixed column block for operator assembly; independent of worker count so
# every column is computed by the same BLAS call shape.
_COLUMN_BLOCK = 256


# =============================================================================
# Domain Types
# =============================================================================

@dataclass(frozen=True)
class NoiseSpec:
    """Sensor noise: Poisson shot noise then additive Gaussian read noise."""

    gaussian_sigma: float = 0.0
    poisson_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError(f"gaussian_sigma must be >= 0, got {self.gaussian_sigma}")
        if self.poisson_scale < 0:
            raise ValueError(f"poisson_scale must be >= 0, got {self.poisson_scale}")

    @property
    def is_zero(self) -> bool:
        return self.gaussian_sigma == 0 and self.poisson_scale == 0

    def with_seed(self, seed: int) -> "NoiseSpec":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return {
            "gaussian_sigma": self.gaussian_sigma,
            "poisson_scale": self.poisson_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSpec":
        return cls(
            gaussian_sigma=float(data.get("gaussian_sigma", 0.0)),
            poisson_scale=float(data.get("poisson_scale", 0.0)),
            seed=int(data.get("seed", 0)),
        )


def frozen_matrix(matrix: np.ndarray) -> np.ndarray:
    """Mark an owned float64 matrix read-only in place so TransferOperator adopts it."""
    if matrix.dtype != np.float64:
        matrix = matrix.astype(np.float64)
    matrix.flags.writeable = False
    return matrix


@dataclass(frozen=True, eq=False)
class TransferOperator:
    """
    Dense n_sen x n_obj nonnegative intensity map plus provenance.

    A read-only float64 matrix is adopted as is; anything else is copied
    and frozen. Builders that own their matrix hand it over through
    `frozen_matrix` so large operators are never duplicated.
    """

    matrix: np.ndarray
    obj_shape: tuple[int, int]
    sen_shape: tuple[int, int]
    seed: int = 0
    mode_count: int = 1
    column_norm: str = "unit_sum"
    correlation_px: Optional[float] = None
    fov_um: float = FOV_DIAMETER_UM
    sensor_aperture: bool = False
    condition_number: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        n_sen = self.sen_shape[0] * self.sen_shape[1]
        n_obj = self.obj_shape[0] * self.obj_shape[1]
        if matrix.shape != (n_sen, n_obj):
            raise ShapeMismatchError(
                f"operator matrix shape {matrix.shape} does not match "
                f"sensor {self.sen_shape} x object {self.obj_shape}"
            )
        if self.column_norm not in COLUMN_NORMS:
            raise ValueError(f"column_norm must be one of {COLUMN_NORMS}, got {self.column_norm!r}")
        if self.mode_count < 1:
            raise ValueError(f"mode_count must be >= 1, got {self.mode_count}")
        lo, hi = float(matrix.min()), float(matrix.max())
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo < 0:
            raise ValueError("operator entries must be finite and >= 0")
        if self.column_norm == "unit_sum":
            sums = matrix.sum(axis=0)
            worst = float(np.max(np.abs(sums - 1.0)))
            if worst > 1e-9:
                raise ValueError(f"unit_sum operator column sums deviate from 1 by {worst:.3e}")
        if not matrix.flags.writeable and matrix.dtype == np.float64:
            frozen = matrix
        else:
            frozen = matrix.copy()
            frozen.flags.writeable = False
        object.__setattr__(self, "matrix", frozen)

    @property
    def n_obj(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_sen(self) -> int:
        return self.matrix.shape[0]

    @property
    def obj_pitch_um(self) -> float:
        return self.fov_um / self.obj_shape[1]

    @property
    def sen_pitch_um(self) -> float:
        return self.fov_um / self.sen_shape[1]

    def column(self, index: int) -> np.ndarray:
        return self.matrix[:, index]

    def describe(self) -> dict:
        """Provenance record for manifests and status files."""
        return {
            "obj_shape": list(self.obj_shape),
            "sen_shape": list(self.sen_shape),
            "seed": self.seed,
            "mode_count": self.mode_count,
            "column_norm": self.column_norm,
            "correlation_px": self.correlation_px,
            "fov_um": self.fov_um,
            "sensor_aperture": self.sensor_aperture,
            "condition_number": self.condition_number,
        }


# =============================================================================
# Operator Synthesis
# =============================================================================

def _complex_field(rng: np.random.Generator, shape: tuple[int, int], sigma: float) -> np.ndarray:
    """Complex Gaussian noise low-pass filtered to correlation length `sigma` (pixels)."""
    real = rng.standard_normal(shape)
    imag = rng.standard_normal(shape)
    if sigma > 0:
        real = gaussian_filter(real, sigma, mode="wrap")
        imag = gaussian_filter(imag, sigma, mode="wrap")
    out = real + 1j * imag
    rms = np.sqrt(np.mean(np.abs(out) ** 2))
    return out / rms if rms > 0 else out


def _estimated_condition(matrix: np.ndarray) -> float:
    if matrix.shape[0] == matrix.shape[1]:
        lu, _ = lu_factor(matrix, check_finite=False)
        (gecon,) = get_lapack_funcs(("gecon",), (lu,))
        rcond, _ = gecon(lu, np.linalg.norm(matrix, 1), norm="1")
        return float("inf") if rcond <= 0 else 1.0 / float(rcond)

    # cond(M) = sqrt(cond(M^T M)) for a full-column-rank tall matrix
    gram = matrix.T @ matrix if matrix.shape[0] > matrix.shape[1] else matrix @ matrix.T
    anorm = np.linalg.norm(gram, 1)
    try:
        factor, lower = cho_factor(gram, overwrite_a=True, check_finite=False)
    except LinAlgError:
        return float("inf")
    (pocon,) = get_lapack_funcs(("pocon",), (factor,))
    rcond, _ = pocon(factor, anorm, uplo="L" if lower else "U")
    return float("inf") if rcond <= 0 else float(np.sqrt(1.0 / float(rcond)))


def estimate_condition_number(matrix: np.ndarray, *, exact_limit: int = COND_EXACT_LIMIT) -> float:
    """
    Spectral condition number from singular values up to `exact_limit` rows
    or columns; above it, the LAPACK 1-norm estimate from an LU (square) or
    gram Cholesky (rectangular) factorization.
    """
    if max(matrix.shape) > exact_limit:
        logger.info(f"Estimating condition number of {matrix.shape} from a LAPACK 1-norm estimate")
        return _estimated_condition(matrix)
    s = np.linalg.svd(matrix, compute_uv=False)
    if s[-1] <= 0:
        return float("inf")
    return float(s[0] / s[-1])


def operator_from_fields(
    mode_fields: np.ndarray,
    couplings: np.ndarray,
    *,
    seed: int = 0,
    column_norm: str = "unit_sum",
    correlation_px: Optional[float] = None,
    fov_um: float = FOV_DIAMETER_UM,
    sensor_aperture: bool = False,
    workers: int = NUM_THREADS,
) -> TransferOperator:
    """
    Assemble M[s, i] = |sum_k a_k(i) m_k(s)|^2 from explicit fields.

    mode_fields: (K, sen_h, sen_w) complex; couplings: (K, obj_h, obj_w) complex.
    """
    mode_fields = np.asarray(mode_fields, dtype=np.complex128)
    couplings = np.asarray(couplings, dtype=np.complex128)
    if mode_fields.ndim != 3 or couplings.ndim != 3 or mode_fields.shape[0] != couplings.shape[0]:
        raise ShapeMismatchError(
            f"mode fields {mode_fields.shape} and couplings {couplings.shape} must be (K, h, w) with equal K"
        )

    mode_count = mode_fields.shape[0]
    sen_shape = mode_fields.shape[1:]
    obj_shape = couplings.shape[1:]
    n_sen = sen_shape[0] * sen_shape[1]
    n_obj = obj_shape[0] * obj_shape[1]

    modes = mode_fields.reshape(mode_count, n_sen).T
    coup = couplings.reshape(mode_count, n_obj)
    matrix = np.empty((n_sen, n_obj), dtype=np.float64)

    def fill_block(start: int) -> None:
        stop = min(start + _COLUMN_BLOCK, n_obj)
        matrix[:, start:stop] = np.abs(modes @ coup[:, start:stop]) ** 2

    starts = list(range(0, n_obj, _COLUMN_BLOCK))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        list(executor.map(fill_block, starts))

    if column_norm == "unit_sum":
        sums = matrix.sum(axis=0)
        dead = np.flatnonzero(sums <= 0)
        if dead.size:
            raise ValueError(f"object pixel {int(dead[0])} couples no energy to the sensor")
        matrix /= sums[None, :]

    cond = estimate_condition_number(matrix)
    return TransferOperator(
        matrix=frozen_matrix(matrix),
        obj_shape=(int(obj_shape[0]), int(obj_shape[1])),
        sen_shape=(int(sen_shape[0]), int(sen_shape[1])),
        seed=int(seed),
        mode_count=mode_count,
        column_norm=column_norm,
        correlation_px=correlation_px,
        fov_um=fov_um,
        sensor_aperture=sensor_aperture,
        condition_number=cond,
    )


def synthesize_operator(
    obj_h: int,
    obj_w: int,
    sen_h: int,
    sen_w: int,
    mode_count: int,
    correlation_px: float,
    seed: int,
    *,
    coupling_correlation_px: float = DEFAULT_COUPLING_CORRELATION_PX,
    column_norm: str = "unit_sum",
    sensor_aperture: bool = False,
    fov_um: float = FOV_DIAMETER_UM,
    workers: int = NUM_THREADS,
) -> TransferOperator:
    """
    Deterministic speckle transfer operator.

    Mode k draws its sensor field and its object couplings from streams
    derived from (seed, k), so the result does not depend on scheduling.
    With `sensor_aperture`, mode fields vanish outside the inscribed disk
    of the sensor grid (the cannula face).
    """
    if min(obj_h, obj_w, sen_h, sen_w) < 1:
        raise ValueError(f"operator grids must be non-empty, got obj {obj_h}x{obj_w}, sen {sen_h}x{sen_w}")
    if mode_count < 1:
        raise ValueError(f"mode_count must be >= 1, got {mode_count}")
    if correlation_px < 1:
        raise ValueError(f"correlation_px must be >= 1, got {correlation_px}")

    modes = np.stack([
        _complex_field(make_rng(seed, "mode", k), (sen_h, sen_w), correlation_px)
        for k in range(mode_count)
    ])
    couplings = np.stack([
        _complex_field(make_rng(seed, "coupling", k), (obj_h, obj_w), coupling_correlation_px)
        for k in range(mode_count)
    ])

    if sensor_aperture:
        face = aperture_mask_array(sen_h, sen_w, 1.0, ApertureMask(diameter_um=float(min(sen_h, sen_w))))
        modes = modes * face[None, :, :]

    op = operator_from_fields(
        modes,
        couplings,
        seed=seed,
        column_norm=column_norm,
        correlation_px=float(correlation_px),
        fov_um=fov_um,
        sensor_aperture=sensor_aperture,
        workers=workers,
    )
    logger.info(
        f"Synthesized operator obj={op.obj_shape} sen={op.sen_shape} modes={mode_count} "
        f"corr={correlation_px} seed={seed} cond={op.condition_number}"
    )
    return op


# =============================================================================
# Forward Model
# =============================================================================

def apply_noise(y: np.ndarray, noise: NoiseSpec) -> np.ndarray:
    """Poisson resampling at poisson_scale, then Gaussian noise of std sigma*max(y), clamped at 0."""
    y = np.array(y, dtype=np.float64, copy=True)
    if noise.is_zero:
        return y

    rng = make_rng(noise.seed)
    if noise.poisson_scale > 0:
        y = rng.poisson(y * noise.poisson_scale).astype(np.float64) / noise.poisson_scale
    if noise.gaussian_sigma > 0:
        peak = float(y.max()) if y.size else 0.0
        y = y + rng.normal(0.0, noise.gaussian_sigma * peak, size=y.shape)
    return np.maximum(y, 0.0)


def forward(op: TransferOperator, obj: ImageGrid, noise: NoiseSpec = NoiseSpec()) -> ImageGrid:
    """Sensor image y = M . vec(x), optionally noisy; deterministic given noise.seed."""
    if obj.data.size != op.n_obj:
        raise ShapeMismatchError(
            f"forward: expected object with {op.n_obj} pixels {op.obj_shape}, "
            f"got {obj.data.size} pixels {obj.shape}"
        )
    y = op.matrix @ obj.data.reshape(-1)
    y = apply_noise(y, noise)
    return ImageGrid(y.reshape(op.sen_shape), op.sen_pitch_um)


# =============================================================================
# CCMM Binary Format
# =============================================================================

CCMM_MAGIC = b"CCMM"
CCMM_VERSION = 1
_CCMM_HEADER = struct.Struct("<4sIIIQIB")


def encode_operator(op: TransferOperator) -> bytearray:
    header = _CCMM_HEADER.pack(
        CCMM_MAGIC,
        CCMM_VERSION,
        op.n_sen,
        op.n_obj,
        op.seed,
        op.mode_count,
        COLUMN_NORMS.index(op.column_norm),
    )
    out = bytearray(_CCMM_HEADER.size + 4 * op.matrix.size)
    out[:_CCMM_HEADER.size] = header
    # column-major: each operator column is contiguous
    body = np.frombuffer(out, dtype="<f4", offset=_CCMM_HEADER.size).reshape(op.n_obj, op.n_sen)
    body[...] = op.matrix.T
    return out


def _square_shape(n: int, what: str) -> tuple[int, int]:
    side = isqrt(n)
    if side * side != n:
        raise ImageFormatError(f"{what} count {n} is not square; pass its shape explicitly")
    return side, side


def decode_operator(
    payload: bytes,
    *,
    obj_shape: Optional[tuple[int, int]] = None,
    sen_shape: Optional[tuple[int, int]] = None,
    fov_um: float = FOV_DIAMETER_UM,
    source: str = "<bytes>",
) -> TransferOperator:
    """
    Decode a CCMM payload.

    The header stores only pixel counts; square sides are recovered unless
    explicit shapes are given. unit_sum columns are renormalized in float64
    after the float32 round trip.
    """
    if len(payload) < 4 or payload[:4] != CCMM_MAGIC:
        raise BadMagicError(f"{source}: not a CCMM file (bad magic)")
    if len(payload) < _CCMM_HEADER.size:
        raise TruncatedPayloadError(f"{source}: truncated CCMM header")

    _, version, n_sen, n_obj, seed, mode_count, norm_code = _CCMM_HEADER.unpack_from(payload, 0)
    if version != CCMM_VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported CCMM version {version}")
    if norm_code >= len(COLUMN_NORMS):
        raise ImageFormatError(f"{source}: unknown column_norm code {norm_code}")

    expected = _CCMM_HEADER.size + 4 * n_sen * n_obj
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{source}: truncated CCMM payload ({len(payload)} of {expected} bytes)")

    obj_shape = tuple(obj_shape) if obj_shape else _square_shape(n_obj, "object pixel")
    sen_shape = tuple(sen_shape) if sen_shape else _square_shape(n_sen, "sensor pixel")

    raw = np.frombuffer(payload, dtype="<f4", count=n_sen * n_obj, offset=_CCMM_HEADER.size)
    matrix = np.empty((n_sen, n_obj), dtype=np.float64)
    matrix.T[...] = raw.reshape(n_obj, n_sen)
    column_norm = COLUMN_NORMS[norm_code]
    if column_norm == "unit_sum":
        matrix /= matrix.sum(axis=0, keepdims=True)

    return TransferOperator(
        matrix=frozen_matrix(matrix),
        obj_shape=obj_shape,
        sen_shape=sen_shape,
        seed=int(seed),
        mode_count=int(mode_count),
        column_norm=column_norm,
        fov_um=fov_um,
    )


def write_operator(path: Path, op: TransferOperator) -> None:
    atomic_write_bytes(Path(path), encode_operator(op))


def read_operator(path: Path, **kwargs) -> TransferOperator:
    path = Path(path)
    return decode_operator(path.read_bytes(), source=str(path), **kwargs)
