import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = Path(os.getenv("SLEEPPOSE_DATA_DIR", BASE_DIR / "data"))

# Filter and stream defaults
DEFAULT_BETA = 0.1
DEFAULT_RATE_HZ = 30.0
DEFAULT_WARMUP_S = 5.0

# Augmentation grid, variances in deg^2
SIGMA_PHI_SQ_GRID = (20.0, 200.0, 400.0, 600.0, 800.0, 1000.0)
SIGMA_THETA_SQ_GRID = (20.0, 100.0, 200.0, 300.0, 400.0, 500.0)

# Samples per class, shot included
VIRTUAL_TRAIN_COUNT = 500
VIRTUAL_TEST_COUNT = 125
WEARABLE_TRAIN_COUNT = 1000

# Hyperparameter search
SEARCH_BUDGET = 60
SEARCH_BOUNDS = (1e-3, 1e3)
SEARCH_VALIDATION_FRACTION = 0.2
SEARCH_MAX_ROWS_PER_CLASS = 100

REPEATS = 10
SIMILARITY_PAIR_CAP = 100_000
MODEL_SCHEMA_VERSION = 1
