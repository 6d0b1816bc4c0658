import os

# Configuration settings for relevance-integrated inference
LOG_FILE = os.environ.get("LASER_LOG_FILE", os.path.join("logs", "laser.log"))
LOG_LEVEL = os.environ.get("LASER_LOG_LEVEL", "INFO")
OUTPUT_DIR = "output"
FIXTURE_DIR = os.environ.get("LASER_FIXTURE_DIR", os.path.join("tests", "data"))

def get_output_path(output_dir: str, name: str) -> str:
    """Return a report path inside the run's output directory."""
    return os.path.join(output_dir or OUTPUT_DIR, name)

def get_fixture_path(name: str) -> str:
    """Return the path of a real-data fixture (DTI, kidney)."""
    return os.path.join(FIXTURE_DIR, name)

def get_max_workers() -> int:
    """Worker bound for bootstrap, bagging and macro runs (env LASER_THREADS)."""
    raw = os.environ.get("LASER_THREADS", "")
    try:
        value = int(raw)
    except ValueError:
        value = min(8, os.cpu_count() or 1)
    return max(1, value)

# Data ingestion
Z_COLUMN = "z"
TRUTH_COLUMN = "theta"
LABEL_COLUMN = "id"

# LP basis
DEFAULT_M = 6
RANK_TOL = 1e-10

# Relevance model
DEFAULT_K = 6
DISCRETE_MAX_LEVELS = 12
DENSITY_FLOOR = 1e-4
NORMALIZATION_GRID_SIZE = 2001
MAX_GRID_SIZE = 1001
SELECTORS = ("bic", "aic", "none")
FITTERS = ("ols", "knn")
KNN_NEIGHBORS = 50
BOOTSTRAP_B = 100

# LASER sampler
PROPOSAL_CAP = 10_000_000
MIN_ACCEPTANCE = 1e-4
PROPOSAL_BATCH = 65_536

# Global engines
LINDSEY_BINS = 120
LINDSEY_DEGREE = 7
LINDSEY_TAIL = 0.001
NULL_WINDOW = "locfdr"
LOCFDR_WINDOW_N = 500_000
MIN_LOCFDR_N = 200
MIN_LINDSEY_N = 50
FDR_GRID_SIZE = 500
IQR_TO_SD = 1.3489
ENGINES = ("locfdr", "bh")

# Empirical Bayes
NPMLE_GRID_SIZE = 200
NPMLE_TOL = 1e-8
NPMLE_MAX_ITER = 500
MIN_NPMLE_N = 20
HPD_ALPHA = 0.2
DEFAULT_BAGS = 10
FINITE_BAYES_B = 100
FINITE_BAYES_FAILURE_BUDGET = 0.10

# Custom inference
LOCFDR_THRESHOLD_CAP = 0.2
DPS_FLOOR = 1e-12
NULL_METHODS = ("laser", "quantile")
SUBGROUP_CUT = 50.0

# Reports
SCHEMA_VERSION = 1
