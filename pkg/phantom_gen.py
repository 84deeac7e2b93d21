"""
CCMForge Phantom Generator

Synthetic object datasets for the three data regimes: fluorescent beads,
neuron-like structures (soma + random-walk branches) and quasi-QR glyphs.
Objects are paired with sensor images through the fiber model and split
into train/test index sets recorded in a manifest.

Dataset directory layout:
    manifest.json
    obj_000000.imgf, sen_000000.imgf, ...
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from config import EXIT_USAGE, NUM_THREADS, PLACEMENT_RETRIES
from fiber_model import NoiseSpec, TransferOperator, forward
from image_core import (
    ApertureMask,
    CCMError,
    ImageGrid,
    ShapeMismatchError,
    apply_aperture,
    derive_seed,
    make_rng,
    normalize_unit,
    read_imgf,
    resample,
    write_imgf,
)
from utils_fs import atomic_write_json, hash_directory
from utils_log import get_logger

logger = get_logger("phantom")

PHANTOM_KINDS = ("beads", "neurons", "glyphs")
MANIFEST_NAME = "manifest.json"
_SUPERSAMPLE = 8


# =============================================================================
# Exceptions
# =============================================================================

class PlacementError(CCMError):
    """Raised when beads cannot be placed with the requested separation."""
    exit_code = EXIT_USAGE


# =============================================================================
# Phantom Specifications
# =============================================================================

@dataclass(frozen=True)
class BeadParams:
    diameter_um: float
    count_min: int = 1
    count_max: int = 6
    min_separation_um: float = 0.0
    # Forced bead centres in pixel coordinates; bypasses random placement
    centers: Optional[tuple[tuple[float, float], ...]] = None


@dataclass(frozen=True)
class NeuronParams:
    soma_diameter_um: tuple[float, float] = (8.0, 14.0)
    soma_count: tuple[int, int] = (1, 2)
    branch_count: tuple[int, int] = (2, 5)
    branch_length_um: tuple[float, float] = (30.0, 90.0)
    branch_width_um: float = 4.0
    width_decay: float = 0.97
    step_um: float = 2.0
    turn_sigma_rad: float = 0.3
    branch_intensity: float = 0.7


@dataclass(frozen=True)
class GlyphParams:
    grid: int = 8
    fill_probability: float = 0.5


PhantomParams = Union[BeadParams, NeuronParams, GlyphParams]
_PARAM_TYPES = {"beads": BeadParams, "neurons": NeuronParams, "glyphs": GlyphParams}


@dataclass(frozen=True)
class PhantomSpec:
    kind: str
    img_h: int
    img_w: int
    pitch_um: float
    params: PhantomParams
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValueError(f"kind must be one of {PHANTOM_KINDS}, got {self.kind!r}")
        if not isinstance(self.params, _PARAM_TYPES[self.kind]):
            raise ValueError(f"{self.kind} phantoms need {_PARAM_TYPES[self.kind].__name__}")
        if self.img_h < 1 or self.img_w < 1 or not self.pitch_um > 0:
            raise ValueError("phantom grid and pitch must be positive")

        p = self.params
        if isinstance(p, BeadParams):
            if p.diameter_um / self.pitch_um < 1.0:
                raise ValueError(
                    f"bead diameter {p.diameter_um} um is below one pixel at pitch {self.pitch_um} um"
                )
            if p.count_min < 1 or p.count_max < p.count_min or p.min_separation_um < 0:
                raise ValueError("bead count range and separation must be positive and ordered")
        elif isinstance(p, NeuronParams):
            values = [*p.soma_diameter_um, *p.branch_length_um, p.branch_width_um, p.step_um]
            if min(values) <= 0 or not 0 < p.width_decay <= 1:
                raise ValueError("neuron geometry must be positive")
        elif isinstance(p, GlyphParams):
            if p.grid < 1 or not 0.0 <= p.fill_probability <= 1.0:
                raise ValueError("glyph grid must be >= 1 and fill probability in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "img_h": self.img_h,
            "img_w": self.img_w,
            "pitch_um": self.pitch_um,
            "seed": self.seed,
            "params": asdict(self.params),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        kind = data["kind"]
        raw = dict(data.get("params", {}))
        for key, value in raw.items():
            if isinstance(value, list):
                raw[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        return cls(
            kind=kind,
            img_h=int(data["img_h"]),
            img_w=int(data["img_w"]),
            pitch_um=float(data["pitch_um"]),
            params=_PARAM_TYPES[kind](**raw),
            seed=int(data.get("seed", 0)),
        )


# =============================================================================
# Rendering
# =============================================================================

def stamp_disk(
    canvas: np.ndarray,
    center: tuple[float, float],
    diameter_px: float,
    value: float = 1.0,
    supersample: int = _SUPERSAMPLE,
) -> None:
    """Max-composite an antialiased disk (pixel-area coverage) into `canvas` in place."""
    h, w = canvas.shape
    cr, cc = center
    radius = diameter_px / 2.0
    r0, r1 = max(0, math.floor(cr - radius)), min(h, math.ceil(cr + radius) + 1)
    c0, c1 = max(0, math.floor(cc - radius)), min(w, math.ceil(cc + radius) + 1)
    if r0 >= r1 or c0 >= c1:
        return

    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    rows = (np.arange(r0, r1)[:, None] + offsets[None, :]).ravel()
    cols = (np.arange(c0, c1)[:, None] + offsets[None, :]).ravel()
    inside = (rows[:, None] - cr) ** 2 + (cols[None, :] - cc) ** 2 <= radius ** 2
    coverage = inside.reshape(r1 - r0, supersample, c1 - c0, supersample).mean(axis=(1, 3))
    np.maximum(canvas[r0:r1, c0:c1], value * coverage, out=canvas[r0:r1, c0:c1])


def bead_layout(spec: PhantomSpec, index: int) -> list[tuple[float, float]]:
    """Bead centres (pixel coordinates) for entry `index`; deterministic given (seed, index)."""
    p = spec.params
    if p.centers is not None:
        return [tuple(map(float, c)) for c in p.centers]

    rng = make_rng(spec.seed, "beads", index)
    radius = p.diameter_um / spec.pitch_um / 2.0
    min_sep = p.min_separation_um / spec.pitch_um
    lo_r, hi_r = radius - 0.5, spec.img_h - 0.5 - radius
    lo_c, hi_c = radius - 0.5, spec.img_w - 0.5 - radius
    if lo_r > hi_r or lo_c > hi_c:
        raise PlacementError(f"bead of diameter {p.diameter_um} um does not fit the image")

    n_beads = int(rng.integers(p.count_min, p.count_max + 1))
    centers: list[tuple[float, float]] = []
    placed: Optional[cKDTree] = None
    for j in range(n_beads):
        for _ in range(PLACEMENT_RETRIES):
            cand = (float(rng.uniform(lo_r, hi_r)), float(rng.uniform(lo_c, hi_c)))
            if placed is None or min_sep <= 0 or placed.query(cand)[0] >= min_sep:
                centers.append(cand)
                placed = cKDTree(centers)
                break
        else:
            raise PlacementError(
                f"could not place bead {j + 1} of {n_beads} with separation "
                f"{p.min_separation_um} um after {PLACEMENT_RETRIES} retries"
            )
    return centers


def _render_beads(spec: PhantomSpec, index: int) -> np.ndarray:
    canvas = np.zeros((spec.img_h, spec.img_w))
    diameter_px = spec.params.diameter_um / spec.pitch_um
    for center in bead_layout(spec, index):
        stamp_disk(canvas, center, diameter_px)
    return canvas


def _render_neuron(spec: PhantomSpec, index: int) -> np.ndarray:
    p = spec.params
    rng = make_rng(spec.seed, "neurons", index)
    canvas = np.zeros((spec.img_h, spec.img_w))
    step_px = p.step_um / spec.pitch_um

    n_soma = int(rng.integers(p.soma_count[0], p.soma_count[1] + 1))
    for _ in range(n_soma):
        soma_px = float(rng.uniform(*p.soma_diameter_um)) / spec.pitch_um
        margin = soma_px / 2.0
        center = np.array([
            rng.uniform(margin - 0.5, max(margin - 0.5, spec.img_h - 0.5 - margin)),
            rng.uniform(margin - 0.5, max(margin - 0.5, spec.img_w - 0.5 - margin)),
        ])
        stamp_disk(canvas, tuple(center), soma_px)

        n_branch = int(rng.integers(p.branch_count[0], p.branch_count[1] + 1))
        for _ in range(n_branch):
            theta = float(rng.uniform(0.0, 2.0 * math.pi))
            length_px = float(rng.uniform(*p.branch_length_um)) / spec.pitch_um
            width_px = p.branch_width_um / spec.pitch_um
            pos = center + margin * np.array([math.sin(theta), math.cos(theta)])
            for _ in range(max(1, int(length_px / step_px))):
                theta += float(rng.normal(0.0, p.turn_sigma_rad))
                pos = pos + step_px * np.array([math.sin(theta), math.cos(theta)])
                if not (-0.5 <= pos[0] < spec.img_h - 0.5 and -0.5 <= pos[1] < spec.img_w - 0.5):
                    break
                width_px *= p.width_decay
                stamp_disk(canvas, tuple(pos), max(width_px, 0.5), p.branch_intensity)
    return canvas


def _render_glyph(spec: PhantomSpec, index: int) -> np.ndarray:
    p = spec.params
    rng = make_rng(spec.seed, "glyphs", index)
    blocks = (rng.random((p.grid, p.grid)) < p.fill_probability).astype(np.float64)
    rows = (np.arange(spec.img_h) * p.grid) // spec.img_h
    cols = (np.arange(spec.img_w) * p.grid) // spec.img_w
    return blocks[rows][:, cols]


_RENDERERS = {"beads": _render_beads, "neurons": _render_neuron, "glyphs": _render_glyph}


def render_phantom(spec: PhantomSpec, index: int) -> ImageGrid:
    canvas = _RENDERERS[spec.kind](spec, index)
    return normalize_unit(ImageGrid(canvas, spec.pitch_um))


def generate_phantoms(
    spec: PhantomSpec,
    count: int,
    *,
    workers: int = NUM_THREADS,
) -> list[ImageGrid]:
    """`count` phantoms in index order, each normalized to [0, 1]."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return list(executor.map(lambda i: render_phantom(spec, i), range(count)))


def prepare_external_objects(images: Sequence[ImageGrid], side: int) -> list[ImageGrid]:
    """Resample user-supplied objects to side x side and normalize to [0, 1]."""
    return [normalize_unit(resample(img, side, side)) for img in images]


# =============================================================================
# Raster Tiling
# =============================================================================

def raster_positions(extent_um: float, fov_um: float, step_um: float) -> int:
    """Number of stage positions along one axis."""
    return int(math.floor((extent_um - fov_um) / step_um + 1e-9)) + 1


def raster_tile(large_obj: ImageGrid, fov: ApertureMask, step_um: float) -> list[ImageGrid]:
    """
    Row-major grid of FOV-masked square crops spaced `step_um` apart.

    Each crop is centred on its own aperture; `fov.center` is ignored.
    """
    if not step_um > 0:
        raise ValueError(f"step_um must be > 0, got {step_um}")
    pitch = large_obj.pitch_um
    side = int(round(fov.diameter_um / pitch))
    if side < 1 or side > large_obj.height or side > large_obj.width:
        raise ValueError(
            f"FOV of {fov.diameter_um} um ({side} px) does not fit a "
            f"{large_obj.height}x{large_obj.width} object at pitch {pitch} um"
        )

    n_rows = raster_positions(large_obj.height * pitch, fov.diameter_um, step_um)
    n_cols = raster_positions(large_obj.width * pitch, fov.diameter_um, step_um)
    crop_mask = ApertureMask(diameter_um=fov.diameter_um)

    tiles = []
    for i in range(n_rows):
        r0 = min(int(round(i * step_um / pitch)), large_obj.height - side)
        for j in range(n_cols):
            c0 = min(int(round(j * step_um / pitch)), large_obj.width - side)
            crop = ImageGrid(large_obj.data[r0:r0 + side, c0:c0 + side], pitch)
            tiles.append(apply_aperture(crop, crop_mask))
    return tiles


# =============================================================================
# Paired Datasets
# =============================================================================

@dataclass
class DatasetManifest:
    count: int
    train_indices: list[int]
    test_indices: list[int]
    split_seed: int
    train_fraction: float
    noise: dict
    operator: dict
    phantom: Optional[dict] = None
    seed: Optional[int] = None
    split_kind: str = "random"
    tile_overlapping: bool = False
    groups: Optional[list[int]] = None
    source: str = "phantom"
    sensor_masked_before_resample: bool = True
    objects_normalized: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class PairedDataset:
    entries: list[tuple[ImageGrid, ImageGrid]]
    manifest: DatasetManifest = field(repr=False)

    def __post_init__(self):
        train, test = set(self.manifest.train_indices), set(self.manifest.test_indices)
        if train & test:
            raise ValueError("train and test indices overlap")
        if train | test != set(range(len(self.entries))):
            raise ValueError("train and test indices must cover every entry")
        for i, (obj, _) in enumerate(self.entries):
            if obj.data.max() > 1.0:
                raise ValueError(f"object {i} is not normalized to [0, 1]")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def objects(self) -> list[ImageGrid]:
        return [obj for obj, _ in self.entries]

    @property
    def sensors(self) -> list[ImageGrid]:
        return [sen for _, sen in self.entries]

    def subset(self, indices: Sequence[int]) -> list[tuple[ImageGrid, ImageGrid]]:
        return [self.entries[i] for i in indices]

    def train_pairs(self) -> list[tuple[ImageGrid, ImageGrid]]:
        return self.subset(self.manifest.train_indices)

    def test_pairs(self) -> list[tuple[ImageGrid, ImageGrid]]:
        return self.subset(self.manifest.test_indices)


def _check_fraction(train_fraction: float) -> None:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")


def split_indices(count: int, train_fraction: float, split_seed: int) -> tuple[list[int], list[int]]:
    """
    Seeded uniform shuffle; round(count * fraction) entries go to train.

    With two or more items both sides keep at least one.
    """
    _check_fraction(train_fraction)
    n_train = int(round(count * train_fraction))
    if count > 1:
        n_train = min(max(n_train, 1), count - 1)
    perm = np.random.default_rng(split_seed).permutation(count)
    return sorted(int(i) for i in perm[:n_train]), sorted(int(i) for i in perm[n_train:])


def split_by_groups(groups: Sequence[int], train_fraction: float, split_seed: int) -> tuple[list[int], list[int]]:
    """Structure-disjoint split: whole groups (source objects) go to one side."""
    _check_fraction(train_fraction)
    unique = sorted(set(int(g) for g in groups))
    n_train = int(round(len(unique) * train_fraction))
    if len(unique) > 1:
        n_train = min(max(n_train, 1), len(unique) - 1)
    perm = np.random.default_rng(split_seed).permutation(len(unique))
    train_groups = {unique[i] for i in perm[:n_train]}
    train = [i for i, g in enumerate(groups) if g in train_groups]
    test = [i for i, g in enumerate(groups) if g not in train_groups]
    return train, test


def pair_objects(
    objects: Sequence[ImageGrid],
    op: TransferOperator,
    noise: NoiseSpec,
    *,
    workers: int = NUM_THREADS,
) -> list[tuple[ImageGrid, ImageGrid]]:
    """Image each object through the operator; entry i uses noise seed derived from (noise.seed, i)."""
    for i, obj in enumerate(objects):
        if obj.shape != op.obj_shape:
            raise ShapeMismatchError(f"object {i} has shape {obj.shape}, operator expects {op.obj_shape}")

    def image(i: int) -> tuple[ImageGrid, ImageGrid]:
        entry_noise = noise.with_seed(derive_seed(noise.seed, i))
        return objects[i], forward(op, objects[i], entry_noise)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return list(executor.map(image, range(len(objects))))


def build_dataset_from_objects(
    objects: Sequence[ImageGrid],
    op: TransferOperator,
    noise: NoiseSpec,
    train_fraction: float,
    split_seed: int,
    *,
    groups: Optional[Sequence[int]] = None,
    disjoint: bool = False,
    source: str = "external",
    phantom: Optional[PhantomSpec] = None,
    workers: int = NUM_THREADS,
) -> PairedDataset:
    _check_fraction(train_fraction)
    entries = pair_objects(objects, op, noise, workers=workers)

    if groups is not None and disjoint:
        train, test = split_by_groups(groups, train_fraction, split_seed)
        split_kind = "structure_disjoint"
    else:
        train, test = split_indices(len(entries), train_fraction, split_seed)
        split_kind = "random"

    manifest = DatasetManifest(
        count=len(entries),
        train_indices=train,
        test_indices=test,
        split_seed=int(split_seed),
        train_fraction=float(train_fraction),
        noise=noise.to_dict(),
        operator=op.describe(),
        phantom=phantom.to_dict() if phantom else None,
        seed=phantom.seed if phantom else None,
        split_kind=split_kind,
        tile_overlapping=groups is not None and not disjoint,
        groups=[int(g) for g in groups] if groups is not None else None,
        source=source,
        sensor_masked_before_resample=True,
    )
    return PairedDataset(entries=entries, manifest=manifest)


def build_dataset(
    spec: PhantomSpec,
    op: TransferOperator,
    noise: NoiseSpec,
    count: int,
    train_fraction: float,
    split_seed: int,
    *,
    workers: int = NUM_THREADS,
) -> PairedDataset:
    """Phantoms paired with their sensor images, plus a seeded train/test split."""
    if (spec.img_h, spec.img_w) != op.obj_shape:
        raise ShapeMismatchError(
            f"phantom grid {spec.img_h}x{spec.img_w} does not match operator object shape {op.obj_shape}"
        )
    _check_fraction(train_fraction)
    objects = generate_phantoms(spec, count, workers=workers)
    ds = build_dataset_from_objects(
        objects, op, noise, train_fraction, split_seed,
        source="phantom", phantom=spec, workers=workers,
    )
    logger.info(
        f"Built {spec.kind} dataset: {count} pairs, "
        f"{len(ds.manifest.train_indices)} train / {len(ds.manifest.test_indices)} test"
    )
    return ds


def build_tiled_dataset(
    large_objects: Sequence[ImageGrid],
    fov: ApertureMask,
    step_um: float,
    op: TransferOperator,
    noise: NoiseSpec,
    train_fraction: float,
    split_seed: int,
    *,
    disjoint: bool = False,
    workers: int = NUM_THREADS,
) -> PairedDataset:
    """
    Raster-tile large objects and pair every tile.

    With `disjoint`, tiles from one source object never straddle the split;
    otherwise the split is over tiles and flagged tile-overlapping.
    """
    tiles, groups = [], []
    for g, large in enumerate(large_objects):
        for tile in raster_tile(large, fov, step_um):
            tiles.append(normalize_unit(resample(tile, *op.obj_shape)))
            groups.append(g)
    return build_dataset_from_objects(
        tiles, op, noise, train_fraction, split_seed,
        groups=groups, disjoint=disjoint, source="raster_tiles", workers=workers,
    )


# =============================================================================
# Persistence
# =============================================================================

def save_dataset(ds: PairedDataset, directory: Path) -> Path:
    """Write IMGF pairs and manifest.json; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (obj, sen) in enumerate(ds.entries):
        write_imgf(directory / f"obj_{i:06d}.imgf", obj)
        write_imgf(directory / f"sen_{i:06d}.imgf", sen)
    manifest_path = directory / MANIFEST_NAME
    atomic_write_json(manifest_path, ds.manifest.to_dict())
    return manifest_path


def load_dataset(directory: Path) -> PairedDataset:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = DatasetManifest.from_dict(json.loads(manifest_path.read_text(encoding="utf-8")))
    entries = [
        (read_imgf(directory / f"obj_{i:06d}.imgf"), read_imgf(directory / f"sen_{i:06d}.imgf"))
        for i in range(manifest.count)
    ]
    return PairedDataset(entries=entries, manifest=manifest)


def dataset_hash(directory: Path) -> str:
    return hash_directory(Path(directory))
