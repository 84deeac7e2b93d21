"""
CCMForge Run All

Orchestrator for the full desk-scale pipeline:
gen -> calibrate -> solve (with lambda sweep) -> train -> infer -> eval -> bench.

Each stage is a cli_bench subcommand. A stage is skipped when the hash of
its inputs and its parameters match the last successful run recorded by
RunStatusManager; pass --force to rerun everything.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from cli_bench import main as cli_main
from config import (
    CHECKPOINT_DIRNAME,
    DATASET_DIRNAME,
    DESK_DATASET_SIZE,
    DESK_SIDE,
    EXIT_OK,
    NUM_THREADS,
    OPERATOR_FILENAME,
    OUTPUT_DIR,
    PROBED_FILENAME,
    RECON_DIRNAME,
    TRAIN_EPOCHS,
)
from status_manager import RunStatusManager
from utils_fs import hash_directory, hash_paths
from utils_log import get_logger

logger = get_logger("pipeline")


class StageFailed(RuntimeError):
    def __init__(self, stage: str, code: int):
        super().__init__(f"stage {stage} exited with code {code}")
        self.stage = stage
        self.code = code


def _hash(*paths: Path) -> str:
    parts = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            parts.append(hash_directory(p))
        elif p.is_file():
            parts.append(hash_paths([p]))
        else:
            parts.append("missing")
    return "|".join(parts)


def run_stage(
    manager: RunStatusManager,
    stage: str,
    argv: list[str],
    *,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    params: dict,
    force: bool = False,
) -> bool:
    """Run one CLI stage unless it is up to date; returns True when it ran."""
    input_hash = _hash(*inputs)
    have_outputs = all(Path(p).exists() for p in outputs)
    if not force and have_outputs and manager.is_up_to_date(stage, input_hash, params):
        print(f"[PIPELINE] {stage}: unchanged, skipping")
        return False

    print(f"[PIPELINE] {stage}: running")
    code = cli_main(argv)
    if code != EXIT_OK:
        manager.mark_failed(stage, input_hash=input_hash, params=params, error=f"exit code {code}")
        raise StageFailed(stage, code)
    manager.set_stage_status(stage, input_hash=input_hash, params=params, output_hash=_hash(*outputs))
    return True


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description="Run the full CCMForge desk pipeline")
    p.add_argument("--out", default=str(OUTPUT_DIR))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=NUM_THREADS)
    p.add_argument("--kind", choices=("beads", "neurons", "glyphs"), default="beads")
    p.add_argument("--side", type=int, default=DESK_SIDE)
    p.add_argument("--count", type=int, default=DESK_DATASET_SIZE)
    p.add_argument("--epochs", type=int, default=TRAIN_EPOCHS)
    p.add_argument("--bench", action="store_true", help="also run the timing benchmark")
    p.add_argument("--bench-sides", type=int, nargs="+", default=[16, 32, 64])
    p.add_argument("--force", action="store_true", help="ignore recorded stage status")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    manager = RunStatusManager(out)
    common = ["--out", str(out), "--seed", str(args.seed), "--threads", str(args.threads)]

    dataset = out / DATASET_DIRNAME
    operator = out / OPERATOR_FILENAME
    probed = out / PROBED_FILENAME
    checkpoint = out / CHECKPOINT_DIRNAME / "latest.ccmw"
    ann_dir = out / RECON_DIRNAME / "ann"
    linear_dir = out / RECON_DIRNAME / "linear"

    print("=" * 60)
    print("CCMForge - Desk-Scale Pipeline")
    print("=" * 60)

    gen_params = {"kind": args.kind, "side": args.side, "count": args.count, "seed": args.seed}
    try:
        run_stage(manager, "gen",
                  common + ["gen", "--kind", args.kind, "--side", str(args.side), "--count", str(args.count)],
                  inputs=[], outputs=[dataset, operator], params=gen_params, force=args.force)
        run_stage(manager, "calibrate", common + ["calibrate"],
                  inputs=[operator], outputs=[probed], params={"seed": args.seed}, force=args.force)
        run_stage(manager, "solve", common + ["solve", "--sweep"],
                  inputs=[probed, dataset], outputs=[linear_dir / "linear_report.csv"],
                  params={"sweep": True}, force=args.force)
        run_stage(manager, "train", common + ["train", "--epochs", str(args.epochs)],
                  inputs=[dataset], outputs=[checkpoint],
                  params={"epochs": args.epochs, "seed": args.seed}, force=args.force)
        run_stage(manager, "infer", common + ["infer"],
                  inputs=[checkpoint, dataset], outputs=[ann_dir / "ann_report.csv"],
                  params={}, force=args.force)
        run_stage(manager, "eval", common + ["eval", "--triptych", "4", "--resolution"],
                  inputs=[ann_dir / "ann_report.csv"], outputs=[ann_dir / "eval_report.csv"],
                  params={"triptych": 4}, force=args.force)
        if args.bench:
            sides = [str(s) for s in args.bench_sides]
            run_stage(manager, "bench", common + ["bench", "--synthesize", "--sides", *sides],
                      inputs=[], outputs=[out / "bench" / "bench.csv"],
                      params={"sides": args.bench_sides}, force=args.force)
    except StageFailed as e:
        print(f"[PIPELINE] {e}", file=sys.stderr)
        logger.error(str(e))
        return e.code

    print("\n" + "=" * 60)
    print("Pipeline Complete")
    print("=" * 60)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
