#!/usr/bin/env python3
"""
CCMForge - Computational Cannula Microscopy Toolkit

Main entry point. With a subcommand (gen, calibrate, solve, ...) it runs
that command; with no arguments it runs the full desk-scale pipeline.
"""

import os
import sys

COMMANDS = {"gen", "calibrate", "solve", "sweep", "train", "infer", "eval", "bench", "tile"}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    script_dir = os.path.dirname(os.path.abspath(__file__))
    sys.path.insert(0, script_dir)

    try:
        if COMMANDS.intersection(argv):
            from cli_bench import main as run_command
            return run_command(argv)

        from run_all import main as run_pipeline

        print("CCMForge Computational Cannula Microscopy Toolkit")
        print("=" * 40)
        print(f"Working directory: {os.getcwd()}")
        print(f"Python version: {sys.version.split()[0]}")
        print("\nStarting pipeline...")
        return run_pipeline(argv)

    except KeyboardInterrupt:
        print("\nProcessing interrupted by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
