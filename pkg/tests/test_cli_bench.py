import csv
import shutil

import numpy as np
import pytest

from cli_bench import BenchRecord, format_bench_csv, main, ratio_table
from image_core import ImageGrid, read_imgf, write_imgf
from metrics import read_report
from phantom_gen import load_dataset
from utils_fs import hash_directory


def run(out, *argv, threads=1, seed=5):
    return main(["--out", str(out), "--seed", str(seed), "--threads", str(threads), *argv])


def gen(out, *extra, **kw):
    return run(out, "gen", "--side", "16", "--count", "10", *extra, **kw)


def test_gen_writes_dataset_and_manifest(tmp_path, capsys):
    assert gen(tmp_path) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    assert printed[-1].endswith("manifest.json")
    ds = load_dataset(tmp_path / "dataset")
    assert len(ds) == 10
    assert len(ds.manifest.train_indices) == 9
    assert ds.manifest.phantom["kind"] == "beads"
    assert (tmp_path / "operator.ccmm").exists()


def test_gen_is_reproducible_across_threads_and_flag_order(tmp_path):
    assert gen(tmp_path / "a", threads=1) == 0
    assert gen(tmp_path / "b", threads=3) == 0
    assert main(["gen", "--side", "16", "--count", "10",
                 "--out", str(tmp_path / "c"), "--seed", "5", "--threads", "2"]) == 0
    first = hash_directory(tmp_path / "a")
    assert hash_directory(tmp_path / "b") == first
    assert hash_directory(tmp_path / "c") == first
    assert gen(tmp_path / "d", seed=6) == 0
    assert hash_directory(tmp_path / "d") != first


def test_gen_from_directory(tmp_path):
    src = tmp_path / "objects"
    rng = np.random.default_rng(0)
    for k in range(3):
        write_imgf(src / f"o{k}.imgf", ImageGrid(rng.random((20, 20)), 1.0))
    assert run(tmp_path / "out", "gen", "--side", "8", "--from-dir", str(src), "--train-fraction", "0.5") == 0
    ds = load_dataset(tmp_path / "out" / "dataset")
    assert len(ds) == 3
    assert ds.objects[0].shape == (8, 8)
    assert ds.manifest.source == str(src)


def test_usage_errors_exit_2(tmp_path):
    assert gen(tmp_path, "--train-fraction", "1.5") == 2
    assert gen(tmp_path, "--kind", "stars") == 2
    assert main([]) == 2


def test_shape_mismatch_has_its_own_exit_code(tmp_path, capsys):
    assert gen(tmp_path / "big") == 0
    assert run(tmp_path / "small", "gen", "--side", "8", "--count", "4") == 0
    assert run(tmp_path / "small", "calibrate") == 0
    code = run(tmp_path / "big", "solve", "--probed", str(tmp_path / "small" / "probed.ccmm"))
    assert "does not match" in capsys.readouterr().err
    assert code == 5
    assert code != gen(tmp_path / "bad", "--train-fraction", "1.5")


def test_missing_inputs_exit_3(tmp_path):
    assert run(tmp_path, "solve") == 3
    assert run(tmp_path, "calibrate") == 3


def test_calibrate_and_solve_with_sweep(tmp_path):
    assert gen(tmp_path) == 0
    assert run(tmp_path, "calibrate") == 0
    assert (tmp_path / "probed.ccmm").exists()
    assert run(tmp_path, "solve", "--sweep", "1e-4", "1e-2") == 0

    linear = tmp_path / "recon" / "linear"
    with open(linear / "sweep.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [float(r["lambda"]) for r in rows] == [1e-4, 1e-2]

    records = read_report(linear / "linear_report.csv")
    ds = load_dataset(tmp_path / "dataset")
    assert [r.index for r in records] == ds.manifest.test_indices
    assert all(0.0 <= r.mae <= 1.0 for r in records)
    assert len(list(linear.glob("rec_*.imgf"))) == len(records)


def test_solve_truncated_svd(tmp_path, capsys):
    assert gen(tmp_path) == 0
    assert run(tmp_path, "calibrate") == 0
    assert run(tmp_path, "solve", "--method", "truncated_svd", "--rank", "40", "--all") == 0
    records = read_report(tmp_path / "recon" / "linear" / "linear_report.csv")
    assert len(records) == 10
    assert records[0].method == "truncated_svd"
    assert records[0].lambda_or_rank == 40.0


def test_eval_of_ground_truth_is_perfect(tmp_path, capsys):
    assert gen(tmp_path) == 0
    ds = load_dataset(tmp_path / "dataset")
    recon = tmp_path / "truth"
    recon.mkdir()
    for i in ds.manifest.test_indices:
        shutil.copy(tmp_path / "dataset" / f"obj_{i:06d}.imgf", recon / f"rec_{i:06d}.imgf")
    capsys.readouterr()
    assert run(tmp_path, "eval", "--recon", str(recon), "--method", "truth", "--triptych", "1", "--resolution") == 0
    out = capsys.readouterr().out
    assert f"[EVAL] {len(ds.manifest.test_indices)} images: mean SSIM 1.0000, mean MAE 0.0000" in out
    assert len(list(recon.glob("triptych_*.pgm"))) == 1
    records = read_report(recon / "eval_report.csv")
    assert records[0].method == "truth"
    assert records[0].resolved is not None


def test_eval_rejects_corrupt_reconstruction(tmp_path):
    assert gen(tmp_path) == 0
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "rec_000000.imgf").write_bytes(b"garbage bytes")
    assert run(tmp_path, "eval", "--recon", str(bad)) == 3


def test_end_to_end_is_deterministic(tmp_path):
    net = ["--depth", "1", "--base-channels", "2", "--growth", "2", "--epochs", "2", "--batch-size", "4"]
    for name, threads in (("a", 1), ("b", 2)):
        out = tmp_path / name
        assert run(out, "gen", "--side", "16", "--count", "12", "--kind", "glyphs", "--grid", "4",
                   threads=threads) == 0
        assert run(out, "calibrate", threads=threads) == 0
        assert run(out, "train", *net, threads=threads) == 0
        assert run(out, "infer", threads=threads) == 0

    a, b = tmp_path / "a", tmp_path / "b"
    assert hash_directory(a / "dataset") == hash_directory(b / "dataset")
    assert (a / "probed.ccmm").read_bytes() == (b / "probed.ccmm").read_bytes()
    assert (a / "checkpoints" / "latest.ccmw").read_bytes() == (b / "checkpoints" / "latest.ccmw").read_bytes()
    recs = sorted((a / "recon" / "ann").glob("rec_*.imgf"))
    assert recs
    for path in recs:
        assert path.read_bytes() == (b / "recon" / "ann" / path.name).read_bytes()
    assert read_imgf(recs[0]).shape == (16, 16)


def test_bench_refuses_few_repetitions(tmp_path):
    assert run(tmp_path, "bench", "--sides", "16", "--reps", "50") == 2


def test_bench_missing_artifact(tmp_path, capsys):
    assert run(tmp_path, "bench", "--sides", "16", "--artifacts", str(tmp_path / "none")) == 2
    assert "side 16" in capsys.readouterr().err


def test_bench_synthesized_side(tmp_path):
    assert run(tmp_path, "bench", "--sides", "16", "--synthesize") == 0
    with open(tmp_path / "bench" / "bench.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["method"] for r in rows] == ["ann_infer", "linear_solve", "linear_factorize"]
    assert rows[0]["reps"] == "100"
    assert rows[2]["reps"] == "1"
    assert (tmp_path / "bench" / "side_016" / "net.ccmw").exists()
    assert (tmp_path / "bench" / "ratios.csv").read_text().startswith("method,side_a,side_b,ratio")


def test_bench_record_validation_and_ratios():
    with pytest.raises(ValueError):
        BenchRecord("ann_infer", 16, 1.0, 0.5, 2.0, 50, "m")
    with pytest.raises(ValueError):
        BenchRecord("ann_infer", 16, 1.0, 2.0, 3.0, 100, "m")
    records = [
        BenchRecord.from_samples("ann_infer", 16, [1.0] * 100, "m"),
        BenchRecord.from_samples("ann_infer", 32, [4.0] * 100, "m"),
        BenchRecord.from_samples("linear_solve", 16, [2.0] * 100, "m"),
        BenchRecord.from_samples("linear_solve", 32, [32.0] * 100, "m"),
    ]
    assert ratio_table(records) == [("ann_infer", 16, 32, 4.0), ("linear_solve", 16, 32, 16.0)]
    assert format_bench_csv(records).splitlines()[0] == "method,image_side,median_ms,p10_ms,p90_ms,reps,machine"


def test_tile_command(tmp_path, capsys):
    big = tmp_path / "big.imgf"
    write_imgf(big, ImageGrid(np.random.default_rng(1).random((200, 200)), 2.0))
    assert run(tmp_path / "out", "tile", "--input", str(big), "--step", "80") == 0
    assert len(list((tmp_path / "out" / "tiles").glob("tile_*.imgf"))) == 9

    assert gen(tmp_path / "op") == 0
    assert run(tmp_path / "out2", "tile", "--input", str(big), str(big), "--step", "80",
               "--operator", str(tmp_path / "op" / "operator.ccmm"), "--disjoint",
               "--train-fraction", "0.5") == 0
    ds = load_dataset(tmp_path / "out2" / "dataset_tiled")
    assert ds.manifest.split_kind == "structure_disjoint"
    assert len(ds) == 18
    assert "structure_disjoint" in capsys.readouterr().out
