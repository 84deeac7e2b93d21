"""
CCMForge Configuration

Global settings for the computational cannula microscopy simulator and
reconstruction toolkit.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# =============================================================================
# Directory Configuration
# =============================================================================

# Base directories - configure these for your environment
ROOT_DIR = Path(os.environ.get("CCMFORGE_ROOT", Path(__file__).parent))
OUTPUT_DIR = ROOT_DIR / "output"
LOG_DIR = ROOT_DIR / "logs"

# Subdirectory / file names used inside an output directory
DATASET_DIRNAME = "dataset"
OPERATOR_FILENAME = "operator.ccmm"
PROBED_FILENAME = "probed.ccmm"
CHECKPOINT_DIRNAME = "checkpoints"
RECON_DIRNAME = "recon"
STATUS_DIRNAME = ".status"

# =============================================================================
# Physical Geometry
# =============================================================================

FOV_DIAMETER_UM = 200.0
RASTER_STEP_UM = 80.0
BEAD_DIAMETER_UM = 4.0

# =============================================================================
# Desk-Scale Defaults
# =============================================================================

DESK_SIDE = 32
DESK_DATASET_SIZE = 2000
DEFAULT_MODE_COUNT = 32
DEFAULT_CORRELATION_PX = 2.0
# Spatial smoothness of the per-pixel mode couplings (object grid, pixels)
DEFAULT_COUPLING_CORRELATION_PX = 1.0
DEFAULT_GAUSSIAN_SIGMA = 0.01
DEFAULT_TRAIN_FRACTION = 0.9
DEFAULT_BEAD_DIAMETER_PX = 3.0
DEFAULT_GLYPH_GRID = 8
DEFAULT_GLYPH_FILL = 0.5

# Placement retries per bead before giving up
PLACEMENT_RETRIES = 1000

# Exact SVD for the condition number only up to this many object pixels
COND_EXACT_LIMIT = 1024

# =============================================================================
# Network / Training Defaults
# =============================================================================

NET_DEPTH = 3
NET_BASE_CHANNELS = 16
NET_GROWTH = 16
NET_LAYERS_PER_BLOCK = 2
NET_KERNEL_SIZE = 3
NET_BLOCK_KIND = "dense"

TRAIN_EPOCHS = 20
TRAIN_BATCH_SIZE = 16
TRAIN_LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
TRAIN_LOSS = "pixelwise_cross_entropy"

# Output probabilities are kept strictly inside (0, 1)
PROB_EPS = 1e-7

# =============================================================================
# Metric Defaults
# =============================================================================

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DYNAMIC_RANGE = 1.0

# Two-point criterion for incoherent imaging
DIP_RATIO_THRESHOLD = 0.735
PEAK_MIN_FRACTION = 0.1

REPORT_HEADER = "# images normalized to [0,1] before scoring"

# =============================================================================
# Benchmark Settings
# =============================================================================

BENCH_SIDES = (16, 32, 64, 128)
BENCH_MIN_REPS = 100

# =============================================================================
# Parallel Execution Settings
# =============================================================================

NUM_THREADS = int(os.environ.get("CCMFORGE_THREADS", 1))

# Logging
LOG_LEVEL = os.environ.get("CCMFORGE_LOG_LEVEL", "INFO")

# =============================================================================
# Exit Codes
# =============================================================================

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_SHAPE = 5
EXIT_INTERRUPTED = 130

# =============================================================================
# Initialization
# =============================================================================

def init_directories():
    """Create necessary directories if they don't exist."""
    for directory in [OUTPUT_DIR, LOG_DIR]:
        directory.mkdir(parents=True, exist_ok=True)

# Auto-initialize on import
init_directories()
