"""
Configuration settings for the power-aware LLM serving runtime.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

SRC_DIR = Path(__file__).resolve().parent

# Output root is the only setting taken from the environment
OUTPUT_ROOT = os.getenv("SERVING_OUTPUT_ROOT", "runs")

# Shipped calibration data
PROFILE_DIR = SRC_DIR / "profiles" / "models"
GPU_SPEC_FILE = SRC_DIR / "profiles" / "gpus" / "a100-sxm4.json"

# Platform
GPUS_PER_NODE = 4
SYSTEM_POWER_ALPHA = 1.05
SYSTEM_POWER_BETA = 345.0  # watts per server
FLOOR_RATIO = 0.4

# Default profiling sweep grid
SWEEP_CAPS = [150, 200, 250, 300, 350, 400]
SWEEP_BATCHES = [1, 4, 8, 16, 32, 64]
SWEEP_TPS = [1, 2, 4]
SWEEP_EPS = [1, 4, 8]
SWEEP_DPS = [1, 2, 3]

# Profiler
NOISE_SIGMA = 0.02
SYS_POWER_NOISE_SIGMA = 0.01
OUTLIER_BOUND = 0.10  # 5 sigma
SWEEP_WINDOW_SECONDS = 10.0
HOLDOUT_FRACTION = 0.2

# Predictor hyperparameters
PREDICTOR_N_TREES = 100
PREDICTOR_MAX_DEPTH = 12
PREDICTOR_MIN_LEAF = 2
MODEL_FORMAT_VERSION = 1

# Controller
CONTROL_INTERVAL = 0.5  # seconds
PID_KP = 0.3
PID_KI = 0.05
PID_KD = 0.05
PID_INTEGRAL_LIMIT = 0.5
BIAS_MIN = 0.5
BIAS_MAX = 2.0
EPSILON = 0.05
N_SUSTAIN = 3
WATER_FILL_QUANTUM = 25.0  # watts
TRACK_THROUGHPUT_SLACK = 0.005  # packings this close to the best count as equal

# Simulator workload presets (output length mean, log-normal sigma)
SEQ_LEN_PRESETS = {
    "short": (64.0, 0.5),
    "long": (256.0, 0.6),
}
DEFAULT_SEQ_LEN = "long"

# Acceptance thresholds used by the calibration checks
AMORTIZATION_RANGE = (1.7, 2.1)
CHECK_CAP = 300

# Default seed when a scenario or grid file does not set one
RANDOM_SEED = 0

TOOL_VERSION = "0.1.0"
