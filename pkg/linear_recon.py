"""
CCMForge Linear Reconstruction

Baseline reconstruction: measure the transfer operator by single-pixel
probing, then invert it with Tikhonov regularization or a truncated SVD.
Factorizations are computed once per (operator, regularizer) and reused
across images, so per-image solve time and factorization time are
reported separately.
"""

from __future__ import annotations

import csv
import io
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, svd

from config import EXIT_NUMERIC, NUM_THREADS
from fiber_model import NoiseSpec, TransferOperator, apply_noise, frozen_matrix
from image_core import CCMError, ImageGrid, ShapeMismatchError, derive_seed
from metrics import SsimConfig, score_batch
from phantom_gen import PairedDataset
from utils_fs import atomic_write_text
from utils_log import get_logger

logger = get_logger("linear")

REG_METHODS = ("tikhonov", "truncated_svd")

# Squared Cholesky pivots below this fraction of the largest mark a singular normal matrix
_PIVOT_RTOL = 1e-10
_PROBE_BLOCK = 256
_CACHED_FACTORS = 2


# =============================================================================
# Exceptions
# =============================================================================

class RankDeficientError(CCMError):
    """Raised when the unregularized normal matrix cannot be factorized."""
    exit_code = EXIT_NUMERIC


# =============================================================================
# Calibration
# =============================================================================

@dataclass
class CalibrationRecord:
    probed: TransferOperator
    probe_count: int
    # Relative L2 error of each probed column against the ground-truth column
    column_residuals: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.probe_count != self.probed.n_obj:
            raise ValueError(f"probe_count {self.probe_count} != operator columns {self.probed.n_obj}")

    @property
    def max_residual(self) -> Optional[float]:
        if self.column_residuals is None:
            return None
        return float(self.column_residuals.max())


def _probe_column(op: TransferOperator, index: int, noise: NoiseSpec) -> np.ndarray:
    # Imaging the single-pixel object e_i returns column i of the operator
    response = np.array(op.column(index), dtype=np.float64)
    if noise.is_zero:
        return response
    response = apply_noise(response, noise.with_seed(derive_seed(noise.seed, "probe", index)))
    if op.column_norm == "unit_sum":
        total = response.sum()
        if total > 0:
            response /= total
        else:
            response = np.full_like(response, 1.0 / response.size)
    return response


def calibrate(
    op: TransferOperator,
    noise: NoiseSpec = NoiseSpec(),
    *,
    workers: int = NUM_THREADS,
) -> CalibrationRecord:
    """
    Measure the operator one object pixel at a time.

    Probe i carries its own noise seed derived from (noise.seed, "probe", i).
    Noisy unit_sum probes are renormalized to unit energy. With zero noise
    the probed matrix equals the ground truth bitwise.
    """
    probed = np.empty(op.matrix.shape, dtype=np.float64)
    residuals = np.empty(op.n_obj, dtype=np.float64)

    def probe_block(start: int) -> None:
        for i in range(start, min(start + _PROBE_BLOCK, op.n_obj)):
            probed[:, i] = _probe_column(op, i, noise)
            truth = op.column(i)
            norm = float(np.linalg.norm(truth))
            residuals[i] = np.linalg.norm(probed[:, i] - truth) / (norm if norm > 0 else 1.0)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        list(executor.map(probe_block, range(0, op.n_obj, _PROBE_BLOCK)))

    probed_op = TransferOperator(
        matrix=frozen_matrix(probed),
        obj_shape=op.obj_shape,
        sen_shape=op.sen_shape,
        seed=op.seed,
        mode_count=op.mode_count,
        column_norm=op.column_norm,
        correlation_px=op.correlation_px,
        fov_um=op.fov_um,
        sensor_aperture=op.sensor_aperture,
    )
    logger.info(f"Calibrated {op.n_obj} probes, max column residual {float(residuals.max()):.3e}")
    return CalibrationRecord(probed=probed_op, probe_count=op.n_obj, column_residuals=residuals)


# =============================================================================
# Regularized Inversion
# =============================================================================

@dataclass(frozen=True)
class RegularizerSpec:
    method: str = "tikhonov"
    lam: Optional[float] = None
    rank: Optional[int] = None

    def __post_init__(self):
        if self.method not in REG_METHODS:
            raise ValueError(f"method must be one of {REG_METHODS}, got {self.method!r}")
        if self.method == "tikhonov":
            if self.lam is None or self.rank is not None:
                raise ValueError("tikhonov takes lam and no rank")
            if not self.lam >= 0:
                raise ValueError(f"lam must be >= 0, got {self.lam}")
        else:
            if self.rank is None or self.lam is not None:
                raise ValueError("truncated_svd takes rank and no lam")
            if self.rank < 1:
                raise ValueError(f"rank must be >= 1, got {self.rank}")

    @classmethod
    def tikhonov(cls, lam: float) -> "RegularizerSpec":
        return cls(method="tikhonov", lam=float(lam))

    @classmethod
    def truncated_svd(cls, rank: int) -> "RegularizerSpec":
        return cls(method="truncated_svd", rank=int(rank))

    @property
    def parameter(self) -> float:
        """The active parameter: lambda or rank."""
        return float(self.lam) if self.method == "tikhonov" else float(self.rank)


@dataclass
class SolveResult:
    image: ImageGrid
    raw: np.ndarray
    solve_ms: float


class LinearSolver:
    """
    Regularized inverse of one probed operator with cached factorizations.

    Factorization is single-writer behind a lock; solves only read the
    cached factors and may run concurrently.
    """

    def __init__(self, probed: TransferOperator):
        self.op = probed
        self._lock = threading.Lock()
        self._gram: Optional[np.ndarray] = None
        self._cholesky: dict[float, tuple] = {}
        self._svd: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None
        self.factorize_ms: dict[tuple[str, float], float] = {}

    def _factor_tikhonov(self, lam: float):
        if self._gram is None:
            self._gram = self.op.matrix.T @ self.op.matrix
        if lam == 0.0 and self.op.n_sen < self.op.n_obj:
            raise RankDeficientError("rank deficient; increase lambda or use truncated_svd")
        normal = self._gram.copy()
        normal.flat[:: self.op.n_obj + 1] += lam
        try:
            factor = cho_factor(normal, lower=False, overwrite_a=True, check_finite=False)
        except LinAlgError as e:
            raise RankDeficientError("rank deficient; increase lambda or use truncated_svd") from e
        pivots = np.abs(np.diag(factor[0]))
        if lam == 0.0 and pivots.min() ** 2 <= _PIVOT_RTOL * pivots.max() ** 2:
            raise RankDeficientError("rank deficient; increase lambda or use truncated_svd")
        return factor

    def _factors(self, reg: RegularizerSpec):
        """Cached factorization for `reg`, built on first use."""
        key = (reg.method, reg.parameter)
        with self._lock:
            if reg.method == "tikhonov" and reg.lam in self._cholesky:
                return self._cholesky[reg.lam]
            if reg.method == "truncated_svd" and self._svd is not None and key in self.factorize_ms:
                return self._svd
            start = time.perf_counter()
            if reg.method == "tikhonov":
                factor = self._factor_tikhonov(reg.lam)
                # one n_obj x n_obj factor per lambda; keep only the newest few
                while len(self._cholesky) >= _CACHED_FACTORS:
                    self._cholesky.pop(next(iter(self._cholesky)))
                self._cholesky[reg.lam] = factor
            else:
                limit = min(self.op.n_sen, self.op.n_obj)
                if reg.rank > limit:
                    raise ValueError(f"rank {reg.rank} exceeds min(n_sen, n_obj) = {limit}")
                if self._svd is None:
                    self._svd = svd(self.op.matrix, full_matrices=False, check_finite=False)
                factor = self._svd
            elapsed = (time.perf_counter() - start) * 1000.0
            self.factorize_ms[key] = elapsed
            logger.info(f"Factorized {reg.method}({reg.parameter:g}) in {elapsed:.2f} ms")
            return factor

    def factorize(self, reg: RegularizerSpec) -> float:
        """Build (or reuse) the factorization for `reg`; returns its build time in ms."""
        self._factors(reg)
        return self.factorize_ms[(reg.method, reg.parameter)]

    def raw_solution(self, y: np.ndarray, reg: RegularizerSpec) -> np.ndarray:
        factor = self._factors(reg)
        if reg.method == "tikhonov":
            return cho_solve(factor, self.op.matrix.T @ y, check_finite=False)

        u, s, vt = factor
        r = reg.rank
        if s[r - 1] <= s[0] * np.finfo(np.float64).eps * max(self.op.matrix.shape):
            raise RankDeficientError(f"rank {r} exceeds the numerical rank of the operator")
        return vt[:r].T @ ((u[:, :r].T @ y) / s[:r])

    def solve(self, y: ImageGrid, reg: RegularizerSpec) -> SolveResult:
        if y.data.size != self.op.n_sen:
            raise ShapeMismatchError(
                f"solve: expected sensor image with {self.op.n_sen} pixels {self.op.sen_shape}, "
                f"got {y.data.size} pixels {y.shape}"
            )
        self.factorize(reg)
        start = time.perf_counter()
        raw = self.raw_solution(y.data.reshape(-1), reg)
        elapsed = (time.perf_counter() - start) * 1000.0
        image = ImageGrid(np.maximum(raw, 0.0).reshape(self.op.obj_shape), self.op.obj_pitch_um)
        return SolveResult(image=image, raw=raw.reshape(self.op.obj_shape), solve_ms=elapsed)

    def solve_many(
        self,
        ys: Sequence[ImageGrid],
        reg: RegularizerSpec,
        *,
        workers: int = NUM_THREADS,
    ) -> list[SolveResult]:
        self.factorize(reg)
        with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
            return list(executor.map(lambda y: self.solve(y, reg), ys))


def solve(probed: TransferOperator, y: ImageGrid, reg: RegularizerSpec) -> ImageGrid:
    """Clamped regularized reconstruction of a single sensor image."""
    return LinearSolver(probed).solve(y, reg).image


# =============================================================================
# Lambda Sweep
# =============================================================================

@dataclass(frozen=True)
class SweepRow:
    lam: float
    mean_mae: float
    mean_ssim: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    best_lambda: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["lambda", "mean_mae", "mean_ssim"])
        for row in self.rows:
            writer.writerow([repr(row.lam), f"{row.mean_mae:.8f}", f"{row.mean_ssim:.8f}"])
        return buf.getvalue()


def sweep_lambda(
    probed: TransferOperator,
    dataset: PairedDataset,
    lambdas: Sequence[float],
    *,
    ssim_cfg: Optional[SsimConfig] = None,
    solver: Optional[LinearSolver] = None,
    workers: int = NUM_THREADS,
) -> SweepResult:
    """Tikhonov over the test split for each lambda; best lambda minimizes mean MAE."""
    if not lambdas:
        raise ValueError("sweep_lambda needs at least one lambda")
    pairs = dataset.test_pairs()
    if not pairs:
        raise ValueError("sweep_lambda needs a non-empty test split")

    solver = solver or LinearSolver(probed)
    ssim_cfg = ssim_cfg or SsimConfig()
    rows = []
    for lam in lambdas:
        reg = RegularizerSpec.tikhonov(lam)
        results = solver.solve_many([sen for _, sen in pairs], reg, workers=workers)
        scores = score_batch([res.image for res in results], [obj for obj, _ in pairs], ssim_cfg, workers=workers)
        rows.append(SweepRow(
            lam=float(lam),
            mean_mae=float(np.mean([s[0] for s in scores])),
            mean_ssim=float(np.mean([s[1] for s in scores])),
        ))
        logger.info(f"Sweep lambda={lam:g}: MAE={rows[-1].mean_mae:.5f} SSIM={rows[-1].mean_ssim:.5f}")

    best = min(rows, key=lambda r: r.mean_mae)
    return SweepResult(rows=rows, best_lambda=best.lam)


def write_sweep_csv(path: Path, result: SweepResult) -> None:
    atomic_write_text(Path(path), result.to_csv())
