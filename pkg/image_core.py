"""
CCMForge Image Core

Fundamental image representation shared by every other module:
intensity grids with a physical pixel pitch, circular aperture masking,
area-weighted resampling, unit normalization, seeded random streams and
the IMGF / PGM file formats.

Images are stored row-major with a top-left origin. Pixel (r, c) has its
centre at coordinates (r, c); the image covers [-0.5, H-0.5] x [-0.5, W-0.5].
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from config import EXIT_IO, EXIT_SHAPE, EXIT_USAGE
from utils_fs import atomic_write_bytes


# =============================================================================
# Exceptions
# =============================================================================

class CCMError(Exception):
    """Base class for toolkit errors; `exit_code` feeds the CLI contract."""
    exit_code = EXIT_USAGE


class ShapeMismatchError(CCMError):
    """Raised when array dimensions do not match what an operation expects."""
    exit_code = EXIT_SHAPE


class EmptyApertureError(CCMError):
    """Raised when an aperture disk does not intersect the image."""
    exit_code = EXIT_USAGE


class ImageFormatError(CCMError):
    """Raised when a binary artifact cannot be decoded."""
    exit_code = EXIT_IO


class BadMagicError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class UnsupportedVersionError(ImageFormatError):
    pass


# =============================================================================
# Seeded Random Streams
# =============================================================================

def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


def seed_sequence(seed: int, *keys: int | str) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_seed(seed: int, *keys: int | str) -> int:
    """Derive an independent u64 seed from (seed, keys); schedule-independent."""
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *keys))


# =============================================================================
# Domain Types
# =============================================================================

@dataclass(frozen=True, eq=False)
class ImageGrid:
    """H x W nonnegative intensity field with pixel pitch in micrometres."""

    data: np.ndarray
    pitch_um: float

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ShapeMismatchError(f"ImageGrid needs a 2-D array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatchError(f"ImageGrid needs height, width >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ImageGrid intensities must be finite")
        if np.any(arr < 0):
            raise ValueError("ImageGrid intensities must be >= 0")
        if not (self.pitch_um > 0 and np.isfinite(self.pitch_um)):
            raise ValueError(f"pitch_um must be > 0, got {self.pitch_um}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "pitch_um", float(self.pitch_um))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def integrated_intensity(self) -> float:
        """Sum of intensities times pixel area (um^2)."""
        return float(self.data.sum()) * self.pitch_um ** 2

    def with_data(self, data: np.ndarray) -> "ImageGrid":
        return ImageGrid(data, self.pitch_um)


@dataclass(frozen=True)
class ApertureMask:
    """Circular field-of-view disk; `center` is in pixel coordinates (row, col)."""

    diameter_um: float
    center: tuple[float, float] | None = field(default=None)

    def __post_init__(self):
        if not self.diameter_um > 0:
            raise ValueError(f"aperture diameter must be > 0, got {self.diameter_um}")

    def resolve_center(self, height: int, width: int) -> tuple[float, float]:
        if self.center is None:
            return (height - 1) / 2.0, (width - 1) / 2.0
        return float(self.center[0]), float(self.center[1])


# =============================================================================
# Operations
# =============================================================================

def aperture_mask_array(height: int, width: int, pitch_um: float, mask: ApertureMask) -> np.ndarray:
    """Boolean array, True where the pixel centre lies inside the disk."""
    cr, cc = mask.resolve_center(height, width)
    radius_um = mask.diameter_um / 2.0

    # Nearest point of the image rectangle to the disk centre
    dr = max(-0.5 - cr, 0.0, cr - (height - 0.5))
    dc = max(-0.5 - cc, 0.0, cc - (width - 0.5))
    if np.hypot(dr, dc) * pitch_um > radius_um:
        raise EmptyApertureError("empty aperture")

    rows = (np.arange(height) - cr) * pitch_um
    cols = (np.arange(width) - cc) * pitch_um
    dist_sq = rows[:, None] ** 2 + cols[None, :] ** 2
    return dist_sq <= radius_um ** 2


def apply_aperture(img: ImageGrid, mask: ApertureMask) -> ImageGrid:
    """Zero every pixel whose centre lies outside the disk; others unchanged."""
    inside = aperture_mask_array(img.height, img.width, img.pitch_um, mask)
    return img.with_data(np.where(inside, img.data, 0.0))


def _overlap_matrix(old: int, new: int) -> np.ndarray:
    """(new x old) weights: overlap length of old pixel k with new pixel i, per new pixel length."""
    scale = old / new
    edges_old = np.arange(old + 1, dtype=np.float64)
    edges_new = np.arange(new + 1, dtype=np.float64) * scale
    lo = np.maximum(edges_new[:-1, None], edges_old[None, :-1])
    hi = np.minimum(edges_new[1:, None], edges_old[None, 1:])
    return np.clip(hi - lo, 0.0, None) / scale


def resample(img: ImageGrid, new_h: int, new_w: int) -> ImageGrid:
    """
    Area-weighted average resampling.

    Each output pixel is the mean of the input intensity over its footprint,
    so sum x pixel area is conserved. Pitch stays isotropic and is scaled by
    the geometric mean of the two axis factors.
    """
    if new_h < 1 or new_w < 1:
        raise ValueError(f"resample target must be >= 1x1, got {new_h}x{new_w}")
    if (new_h, new_w) == img.shape:
        return img

    rh = _overlap_matrix(img.height, new_h)
    rw = _overlap_matrix(img.width, new_w)
    data = rh @ img.data @ rw.T
    pitch = img.pitch_um * np.sqrt((img.height / new_h) * (img.width / new_w))
    return ImageGrid(np.clip(data, 0.0, None), pitch)


def normalize_unit(img: ImageGrid) -> ImageGrid:
    """Divide by the maximum; an all-zero image is returned unchanged."""
    peak = float(img.data.max())
    if peak <= 0.0:
        return img
    return img.with_data(img.data / peak)


# =============================================================================
# IMGF Binary Format
# =============================================================================

IMGF_MAGIC = b"CCMI"
IMGF_VERSION = 1
_IMGF_HEADER = struct.Struct("<4sIIId")


def encode_imgf(img: ImageGrid) -> bytes:
    header = _IMGF_HEADER.pack(IMGF_MAGIC, IMGF_VERSION, img.height, img.width, img.pitch_um)
    return header + img.data.astype("<f4").tobytes(order="C")


def decode_imgf(payload: bytes, *, source: str = "<bytes>") -> ImageGrid:
    if len(payload) < 4 or payload[:4] != IMGF_MAGIC:
        raise BadMagicError(f"{source}: not an IMGF file (bad magic)")
    if len(payload) < _IMGF_HEADER.size:
        raise TruncatedPayloadError(f"{source}: truncated IMGF header")

    _, version, height, width, pitch = _IMGF_HEADER.unpack_from(payload, 0)
    if version != IMGF_VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported IMGF version {version}")

    expected = _IMGF_HEADER.size + 4 * height * width
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{source}: truncated IMGF payload ({len(payload)} of {expected} bytes)"
        )
    data = np.frombuffer(payload, dtype="<f4", count=height * width, offset=_IMGF_HEADER.size)
    return ImageGrid(data.reshape(height, width), pitch)


def write_imgf(path: Path, img: ImageGrid) -> None:
    atomic_write_bytes(Path(path), encode_imgf(img))


def read_imgf(path: Path) -> ImageGrid:
    path = Path(path)
    return decode_imgf(path.read_bytes(), source=str(path))


def read_imgf_dir(directory: Path) -> list[ImageGrid]:
    """Load every *.imgf in a directory, in sorted file-name order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"IMGF directory not found: {directory}")
    return [read_imgf(p) for p in sorted(directory.glob("*.imgf"))]


# =============================================================================
# Portable Graymap Rendering
# =============================================================================

def to_uint8(img: ImageGrid) -> np.ndarray:
    unit = normalize_unit(img).data
    return np.round(unit * 255.0).astype(np.uint8)


def render_triptych(panels: Sequence[ImageGrid], gap: int = 2) -> np.ndarray:
    """Side-by-side 8-bit panels (e.g. sensor | reference | reconstruction)."""
    if not panels:
        raise ValueError("render_triptych needs at least one panel")
    height = panels[0].height
    tiles = []
    for i, panel in enumerate(panels):
        if panel.height != height:
            width = max(1, round(panel.width * height / panel.height))
            panel = resample(panel, height, width)
        if i:
            tiles.append(np.full((height, gap), 255, dtype=np.uint8))
        tiles.append(to_uint8(panel))
    return np.concatenate(tiles, axis=1)


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    """Write an 8-bit binary (P5) portable graymap."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ShapeMismatchError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(Path(path), header + pixels.tobytes(order="C"))
