"""
CCMForge Metrics

Image quality and resolution measures: MAE, windowed SSIM, bilinear line
profiles, FWHM of a peak and the two-point separation criterion.

Every score written to a report is computed on images normalized to [0, 1].
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.signal import correlate2d, find_peaks

from config import (
    DIP_RATIO_THRESHOLD,
    EXIT_USAGE,
    NUM_THREADS,
    PEAK_MIN_FRACTION,
    REPORT_HEADER,
    SSIM_DYNAMIC_RANGE,
    SSIM_K1,
    SSIM_K2,
    SSIM_SIGMA,
    SSIM_WINDOW,
)
from image_core import CCMError, ImageGrid, ShapeMismatchError, normalize_unit
from utils_fs import atomic_write_text

ImageLike = Union[ImageGrid, np.ndarray]


# =============================================================================
# Exceptions
# =============================================================================

class PeakTruncatedError(CCMError):
    """Raised when a profile never drops below half maximum on one side."""
    exit_code = EXIT_USAGE


class ProfileBoundsError(CCMError):
    exit_code = EXIT_USAGE


def _as_array(img: ImageLike) -> np.ndarray:
    if isinstance(img, ImageGrid):
        return img.data
    return np.asarray(img, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"images differ in shape: {a.shape} vs {b.shape}")


# =============================================================================
# MAE / SSIM
# =============================================================================

def mae(a: ImageLike, b: ImageLike) -> float:
    """Mean absolute error over pixels."""
    a, b = _as_array(a), _as_array(b)
    _check_same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


@dataclass(frozen=True)
class SsimConfig:
    window: int = SSIM_WINDOW
    window_kind: str = "gaussian"
    sigma: float = SSIM_SIGMA
    k1: float = SSIM_K1
    k2: float = SSIM_K2
    dynamic_range: float = SSIM_DYNAMIC_RANGE

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be odd and >= 3, got {self.window}")
        if self.window_kind not in ("gaussian", "uniform"):
            raise ValueError(f"window_kind must be gaussian or uniform, got {self.window_kind!r}")
        if self.window_kind == "gaussian" and not self.sigma > 0:
            raise ValueError(f"gaussian window sigma must be > 0, got {self.sigma}")
        if not (self.k1 > 0 and self.k2 > 0 and self.dynamic_range > 0):
            raise ValueError("k1, k2 and dynamic_range must be > 0")

    def kernel(self) -> np.ndarray:
        if self.window_kind == "uniform":
            return np.full((self.window, self.window), 1.0 / self.window ** 2)
        return gauss_2d((self.window, self.window), self.sigma)


def gauss_2d(shape: tuple[int, int] = (3, 3), sigma: float = 0.5) -> np.ndarray:
    """Unit-sum 2-D Gaussian window (MATLAB fspecial('gaussian') convention)."""
    m, n = [(ss - 1.0) / 2.0 for ss in shape]
    y, x = np.ogrid[-m:m + 1, -n:n + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def ssim(a: ImageLike, b: ImageLike, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM over all fully contained window positions."""
    a, b = _as_array(a), _as_array(b)
    _check_same_shape(a, b)
    if a.shape[0] < cfg.window or a.shape[1] < cfg.window:
        raise ShapeMismatchError(f"image {a.shape} is smaller than the {cfg.window}x{cfg.window} SSIM window")

    window = cfg.kernel()
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2

    def filt(x: np.ndarray) -> np.ndarray:
        return correlate2d(x, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    mu_a_sq, mu_b_sq, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    sigma_a_sq = filt(a * a) - mu_a_sq
    sigma_b_sq = filt(b * b) - mu_b_sq
    sigma_ab = filt(a * b) - mu_ab

    ssim_map = ((2 * mu_ab + c1) * (2 * sigma_ab + c2)) / (
        (mu_a_sq + mu_b_sq + c1) * (sigma_a_sq + sigma_b_sq + c2)
    )
    return float(np.mean(ssim_map))


def score_pair(recon: ImageGrid, reference: ImageGrid, cfg: SsimConfig = SsimConfig()) -> tuple[float, float]:
    """(MAE, SSIM) after normalizing both images to [0, 1]."""
    r, t = normalize_unit(recon), normalize_unit(reference)
    return mae(r, t), ssim(r, t, cfg)


def score_batch(
    recons: Sequence[ImageGrid],
    references: Sequence[ImageGrid],
    cfg: SsimConfig = SsimConfig(),
    *,
    workers: int = NUM_THREADS,
) -> list[tuple[float, float]]:
    if len(recons) != len(references):
        raise ShapeMismatchError(f"{len(recons)} reconstructions vs {len(references)} references")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return list(executor.map(lambda pair: score_pair(pair[0], pair[1], cfg), zip(recons, references)))


# =============================================================================
# Line Profiles
# =============================================================================

@dataclass(frozen=True)
class ProfileLine:
    """Segment between two pixel-coordinate points (row, col), sampled every `spacing_px`."""

    start: tuple[float, float]
    end: tuple[float, float]
    spacing_px: float = 1.0

    def __post_init__(self):
        if tuple(self.start) == tuple(self.end):
            raise ValueError("profile line endpoints must be distinct")
        if not self.spacing_px > 0:
            raise ValueError(f"spacing_px must be > 0, got {self.spacing_px}")

    @property
    def length_px(self) -> float:
        return math.dist(self.start, self.end)

    @property
    def sample_count(self) -> int:
        return int(math.floor(self.length_px / self.spacing_px + 1e-9)) + 1


@dataclass(frozen=True)
class Profile:
    values: np.ndarray
    spacing_um: float

    @property
    def positions_um(self) -> np.ndarray:
        return np.arange(len(self.values)) * self.spacing_um


def line_profile(img: ImageGrid, line: ProfileLine) -> Profile:
    """Bilinear samples along the line; positions in um via the image pitch."""
    n = line.sample_count
    (r0, c0), (r1, c1) = line.start, line.end
    t = np.arange(n) * line.spacing_px / line.length_px
    rows = r0 + t * (r1 - r0)
    cols = c0 + t * (c1 - c0)

    tol = 1e-9
    if (rows.min() < -tol or cols.min() < -tol
            or rows.max() > img.height - 1 + tol or cols.max() > img.width - 1 + tol):
        raise ProfileBoundsError(f"profile line {line.start} -> {line.end} leaves the {img.height}x{img.width} image")

    coords = np.vstack([np.clip(rows, 0, img.height - 1), np.clip(cols, 0, img.width - 1)])
    values = map_coordinates(img.data, coords, order=1, mode="nearest")
    return Profile(values=values, spacing_um=line.spacing_px * img.pitch_um)


def _as_profile(profile: Union[Profile, np.ndarray], spacing_um: Optional[float]) -> Profile:
    if isinstance(profile, Profile):
        return profile
    return Profile(values=np.asarray(profile, dtype=np.float64), spacing_um=spacing_um or 1.0)


# =============================================================================
# Resolution Measures
# =============================================================================

def fwhm(profile: Union[Profile, np.ndarray], spacing_um: Optional[float] = None) -> float:
    """
    Full width at half maximum, baseline (profile minimum) subtracted.

    Crossings are linearly interpolated on each side of the highest sample.
    """
    prof = _as_profile(profile, spacing_um)
    v = np.asarray(prof.values, dtype=np.float64)
    v = v - v.min()
    peak = int(np.argmax(v))
    half = v[peak] / 2.0
    if v[peak] <= 0:
        raise PeakTruncatedError("peak truncated: profile is flat")

    left = None
    for i in range(peak, 0, -1):
        if v[i - 1] < half:
            left = (i - 1) + (half - v[i - 1]) / (v[i] - v[i - 1])
            break
    right = None
    for i in range(peak, len(v) - 1):
        if v[i + 1] < half:
            right = i + (v[i] - half) / (v[i] - v[i + 1])
            break
    if left is None or right is None:
        raise PeakTruncatedError("peak truncated")
    return float((right - left) * prof.spacing_um)


@dataclass(frozen=True)
class SeparationResult:
    resolved: bool
    peak_distance_um: Optional[float]
    dip_ratio: Optional[float]

    @property
    def distance_defined(self) -> bool:
        return self.peak_distance_um is not None


def two_point_separation(
    profile: Union[Profile, np.ndarray],
    spacing_um: Optional[float] = None,
    *,
    threshold: float = DIP_RATIO_THRESHOLD,
) -> SeparationResult:
    """
    Distance between the two highest peaks and the valley-to-lower-peak ratio.

    Peaks must rise above min + 10% of the profile range; plateaus count at
    their middle sample. Fewer than two peaks is reported as unresolved with
    an undefined distance.
    """
    prof = _as_profile(profile, spacing_um)
    v = np.asarray(prof.values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return SeparationResult(resolved=False, peak_distance_um=None, dip_ratio=None)

    peaks, props = find_peaks(v, height=lo + PEAK_MIN_FRACTION * (hi - lo))
    if len(peaks) < 2:
        return SeparationResult(resolved=False, peak_distance_um=None, dip_ratio=None)

    order = sorted(range(len(peaks)), key=lambda k: (-props["peak_heights"][k], peaks[k]))
    p, q = sorted(int(peaks[k]) for k in order[:2])
    valley = float(v[p:q + 1].min())
    lower = min(v[p], v[q])
    dip = valley / lower if lower > 0 else 1.0
    return SeparationResult(
        resolved=bool(dip < threshold),
        peak_distance_um=float((q - p) * prof.spacing_um),
        dip_ratio=float(dip),
    )


# =============================================================================
# Reports
# =============================================================================

@dataclass
class ReconRecord:
    index: int
    method: str
    lambda_or_rank: Optional[float]
    mae: float
    ssim: float
    solve_ms: Optional[float] = None
    fwhm_um: Optional[float] = None
    peak_distance_um: Optional[float] = None
    dip_ratio: Optional[float] = None
    resolved: Optional[bool] = None


_BASE_COLUMNS = ("index", "method", "lambda_or_rank", "mae", "ssim", "solve_ms")
_OPTIONAL_COLUMNS = ("fwhm_um", "peak_distance_um", "dip_ratio", "resolved")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.8g}"
    return str(value)


def format_report(records: Sequence[ReconRecord]) -> str:
    """CSV text; optional columns appear only when some record fills them."""
    extra = [c for c in _OPTIONAL_COLUMNS if any(getattr(r, c) is not None for r in records)]
    columns = list(_BASE_COLUMNS) + extra
    buf = io.StringIO()
    buf.write(REPORT_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for record in records:
        writer.writerow([_fmt(getattr(record, c)) for c in columns])
    return buf.getvalue()


def write_report(path: Path, records: Sequence[ReconRecord]) -> None:
    atomic_write_text(Path(path), format_report(records))


def read_report(path: Path) -> list[ReconRecord]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    types = {f.name: f.type for f in fields(ReconRecord)}
    records = []
    for row in csv.DictReader(lines):
        kwargs = {}
        for name, text in row.items():
            if text == "":
                kwargs[name] = None
            elif name in ("index",):
                kwargs[name] = int(text)
            elif name == "method":
                kwargs[name] = text
            elif name == "resolved":
                kwargs[name] = text == "true"
            elif name in types:
                kwargs[name] = float(text)
        records.append(ReconRecord(**kwargs))
    return records


def summarize(records: Sequence[ReconRecord]) -> tuple[float, float]:
    """(mean SSIM, mean MAE)."""
    if not records:
        return float("nan"), float("nan")
    return float(np.mean([r.ssim for r in records])), float(np.mean([r.mae for r in records]))
