"""Shared fixtures: tiny operators and datasets that build in milliseconds."""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from fiber_model import NoiseSpec, TransferOperator, synthesize_operator  # noqa: E402
from phantom_gen import GlyphParams, PhantomSpec, build_dataset  # noqa: E402


def well_conditioned_matrix(n: int, seed: int = 0) -> np.ndarray:
    """0.5 I + 0.5 R with R column-stochastic: unit-sum columns, condition number well below 100."""
    rng = np.random.default_rng(seed)
    r = rng.random((n, n))
    r /= r.sum(axis=0, keepdims=True)
    return 0.5 * np.eye(n) + 0.5 * r


def operator_from_matrix(matrix: np.ndarray, side: int) -> TransferOperator:
    return TransferOperator(matrix=matrix, obj_shape=(side, side), sen_shape=(side, side), column_norm="none")


@pytest.fixture
def well_conditioned_op():
    return operator_from_matrix(well_conditioned_matrix(64), 8)


@pytest.fixture(scope="session")
def tiny_op():
    return synthesize_operator(8, 8, 8, 8, mode_count=16, correlation_px=1.5, seed=3)


@pytest.fixture(scope="session")
def small_op():
    return synthesize_operator(16, 16, 16, 16, mode_count=32, correlation_px=2.0, seed=11)


@pytest.fixture(scope="session")
def glyph_dataset(small_op):
    spec = PhantomSpec("glyphs", 16, 16, small_op.obj_pitch_um, GlyphParams(grid=4, fill_probability=0.5), seed=5)
    return build_dataset(spec, small_op, NoiseSpec(), count=12, train_fraction=0.75, split_seed=2)
