import math

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from fiber_model import NoiseSpec
from image_core import ApertureMask, ImageGrid, ShapeMismatchError
from phantom_gen import (
    BeadParams,
    GlyphParams,
    NeuronParams,
    PhantomSpec,
    PlacementError,
    bead_layout,
    build_dataset,
    build_tiled_dataset,
    dataset_hash,
    generate_phantoms,
    load_dataset,
    prepare_external_objects,
    raster_positions,
    raster_tile,
    render_phantom,
    save_dataset,
    split_indices,
    stamp_disk,
)


def bead_spec(**kw):
    params = BeadParams(diameter_um=3.0, count_min=4, count_max=6, min_separation_um=8.0)
    return PhantomSpec("beads", 64, 64, 1.0, kw.pop("params", params), seed=kw.pop("seed", 7))


def test_spec_validation():
    with pytest.raises(ValueError, match="below one pixel"):
        PhantomSpec("beads", 16, 16, 10.0, BeadParams(diameter_um=5.0))
    with pytest.raises(ValueError):
        PhantomSpec("stars", 16, 16, 1.0, GlyphParams())
    with pytest.raises(ValueError):
        PhantomSpec("glyphs", 16, 16, 1.0, BeadParams(diameter_um=2.0))


def test_spec_dict_round_trip():
    spec = PhantomSpec("neurons", 32, 32, 2.0, NeuronParams(), seed=4)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec
    beads = bead_spec(params=BeadParams(diameter_um=3.0, centers=((4.0, 5.0), (10.0, 11.0))))
    assert PhantomSpec.from_dict(beads.to_dict()) == beads


def test_beads_are_deterministic_and_normalized():
    spec = bead_spec()
    a = generate_phantoms(spec, 5, workers=1)
    b = generate_phantoms(spec, 5, workers=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)
        assert x.data.min() >= 0.0
        assert x.data.max() == 1.0


def test_bead_layout_respects_separation():
    spec = bead_spec()
    for index in range(10):
        centers = bead_layout(spec, index)
        assert 4 <= len(centers) <= 6
        for i, a in enumerate(centers):
            for b in centers[i + 1:]:
                assert math.dist(a, b) >= 8.0


def test_dense_bead_layout_keeps_spacing():
    params = BeadParams(diameter_um=1.5, count_min=300, count_max=300, min_separation_um=2.5)
    spec = PhantomSpec("beads", 96, 96, 1.0, params, seed=2)
    centers = np.array(bead_layout(spec, 0))
    assert len(centers) == 300
    assert pdist(centers).min() >= 2.5
    np.testing.assert_array_equal(centers, np.array(bead_layout(spec, 0)))


def test_bead_placement_failure():
    spec = PhantomSpec(
        "beads", 8, 8, 1.0,
        BeadParams(diameter_um=3.0, count_min=10, count_max=10, min_separation_um=100.0),
    )
    with pytest.raises(PlacementError, match="could not place bead 2 of 10"):
        bead_layout(spec, 0)


def test_stamp_disk_coverage():
    canvas = np.zeros((9, 9))
    stamp_disk(canvas, (4.0, 4.0), 3.0)
    assert canvas[4, 4] == 1.0
    assert 0.0 < canvas[4, 5] < 1.0
    assert canvas[4, 7] == 0.0
    # area of a 1.5 px radius disk
    assert canvas.sum() == pytest.approx(math.pi * 1.5 ** 2, rel=0.05)


def test_glyphs_are_block_constant():
    spec = PhantomSpec("glyphs", 16, 16, 1.0, GlyphParams(grid=4, fill_probability=0.5), seed=3)
    img = render_phantom(spec, 0).data
    for r in range(4):
        for c in range(4):
            block = img[4 * r:4 * r + 4, 4 * c:4 * c + 4]
            assert np.all(block == block[0, 0])
    assert set(np.unique(img)) <= {0.0, 1.0}

    empty = PhantomSpec("glyphs", 16, 16, 1.0, GlyphParams(grid=4, fill_probability=0.0))
    full = PhantomSpec("glyphs", 16, 16, 1.0, GlyphParams(grid=4, fill_probability=1.0))
    assert render_phantom(empty, 0).data.max() == 0.0
    assert render_phantom(full, 0).data.min() == 1.0


def test_neurons_render_structure():
    spec = PhantomSpec("neurons", 48, 48, 2.0, NeuronParams(), seed=1)
    img = render_phantom(spec, 2)
    assert img.data.max() == 1.0
    assert (img.data > 0).sum() > 20


def test_external_objects_are_resampled_and_normalized():
    img = ImageGrid(np.random.default_rng(0).random((20, 20)) * 7.0, 1.0)
    (out,) = prepare_external_objects([img], 8)
    assert out.shape == (8, 8)
    assert out.data.max() == 1.0


def test_split_arithmetic():
    train, test = split_indices(10, 0.9, 1)
    assert len(train) == 9 and len(test) == 1
    assert sorted(train + test) == list(range(10))
    train, test = split_indices(18339, 16504 / 18339, 0)
    assert (len(train), len(test)) == (16504, 1835)
    with pytest.raises(ValueError):
        split_indices(10, 1.0, 0)


@pytest.mark.parametrize("count, fraction, sizes", [(2, 0.9, (1, 1)), (3, 0.9, (2, 1)), (2, 0.1, (1, 1)), (1, 0.9, (1, 0))])
def test_small_splits_keep_both_sides(count, fraction, sizes):
    train, test = split_indices(count, fraction, 4)
    assert (len(train), len(test)) == sizes
    assert sorted(train + test) == list(range(count))


def test_build_dataset_pairs_and_split(tiny_op):
    spec = PhantomSpec("glyphs", 8, 8, tiny_op.obj_pitch_um, GlyphParams(grid=4), seed=2)
    ds = build_dataset(spec, tiny_op, NoiseSpec(), count=10, train_fraction=0.9, split_seed=5)
    assert len(ds) == 10
    assert len(ds.manifest.train_indices) == 9
    assert not set(ds.manifest.train_indices) & set(ds.manifest.test_indices)
    assert ds.manifest.phantom["kind"] == "glyphs"
    obj, sen = ds.entries[0]
    np.testing.assert_allclose(sen.data.reshape(-1), tiny_op.matrix @ obj.data.reshape(-1))


def test_build_dataset_shape_mismatch(tiny_op):
    spec = PhantomSpec("glyphs", 16, 16, 1.0, GlyphParams())
    with pytest.raises(ShapeMismatchError):
        build_dataset(spec, tiny_op, NoiseSpec(), count=4, train_fraction=0.5, split_seed=0)


def test_dataset_save_load_and_hash(tmp_path, tiny_op):
    spec = PhantomSpec("glyphs", 8, 8, tiny_op.obj_pitch_um, GlyphParams(grid=4), seed=2)
    noise = NoiseSpec(gaussian_sigma=0.01, seed=8)
    a = build_dataset(spec, tiny_op, noise, count=6, train_fraction=0.5, split_seed=1, workers=1)
    b = build_dataset(spec, tiny_op, noise, count=6, train_fraction=0.5, split_seed=1, workers=4)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")

    back = load_dataset(tmp_path / "a")
    assert back.manifest == a.manifest
    for (o1, s1), (o2, s2) in zip(a.entries, back.entries):
        np.testing.assert_allclose(o1.data, o2.data, rtol=1e-6)
        np.testing.assert_allclose(s1.data, s2.data, rtol=1e-6)

    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_raster_positions_and_tiles():
    assert raster_positions(400.0, 200.0, 80.0) == 3
    assert raster_positions(400.0, 200.0, 400.0) == 1
    assert raster_positions(400.0, 200.0, 100.0) == 3

    large = ImageGrid(np.ones((200, 200)), 2.0)
    tiles = raster_tile(large, ApertureMask(200.0), 80.0)
    assert len(tiles) == 9
    for tile in tiles:
        assert tile.shape == (100, 100)
        assert tile.data[0, 0] == 0.0
        assert tile.data[50, 50] == 1.0
    assert len(raster_tile(large, ApertureMask(200.0), 400.0)) == 1
    with pytest.raises(ValueError):
        raster_tile(large, ApertureMask(800.0), 80.0)


def test_tiled_dataset_split_modes(tiny_op):
    rng = np.random.default_rng(0)
    larges = [ImageGrid(rng.random((60, 60)), 2.0) for _ in range(4)]
    fov = ApertureMask(80.0)

    disjoint = build_tiled_dataset(larges, fov, 20.0, tiny_op, NoiseSpec(), 0.5, 3, disjoint=True)
    m = disjoint.manifest
    assert m.split_kind == "structure_disjoint"
    assert not m.tile_overlapping
    train_groups = {m.groups[i] for i in m.train_indices}
    test_groups = {m.groups[i] for i in m.test_indices}
    assert train_groups and test_groups
    assert not train_groups & test_groups

    mixed = build_tiled_dataset(larges, fov, 20.0, tiny_op, NoiseSpec(), 0.5, 3)
    assert mixed.manifest.split_kind == "random"
    assert mixed.manifest.tile_overlapping
    assert len(mixed) == 4 * 9


def test_single_centred_bead_area():
    spec = PhantomSpec("beads", 16, 16, 2.0, BeadParams(diameter_um=8.0, centers=((7.5, 7.5),)))
    img = render_phantom(spec, 0)
    area = int((img.data >= 0.5).sum())
    assert area == pytest.approx(math.pi * 2.0 ** 2, rel=0.15)
