"""Application configuration constants."""

import logging
import os

# Application metadata
VERSION = "1.0.0"
APP_NAME = "softbound"

# Numerical tolerances (relative, scaled by max(1, |value|))
REL_TOL = 1e-9
BOX_TOL = 1e-9

# Finite-difference gradient check
FD_STEP = 1e-5
GRAD_REL_TOL = 1e-5
GRADCHECK_POINTS = 100
GRADCHECK_K_VALUES = (2, 3, 16)

# Dense simplex solver
PIVOT_TOL = 1e-10
RATIO_TOL = 1e-9
OPTIMALITY_TOL = 1e-9
FEASIBILITY_TOL = 1e-7
BLAND_FACTOR = 5        # Bland's rule after BLAND_FACTOR * (m + n) stalled pivots
MAX_ITER_FACTOR = 50    # iteration cap is MAX_ITER_FACTOR * (m + n) + 1000

# Synthetic tightness experiment
DEFAULT_K = 16
DEFAULT_EPSILON = 1.0
DEFAULT_REGIONS = 100
DEFAULT_DRAWS = 1000
DEFAULT_SEED = 0
MU_MAX_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)

# Grid for the `bounds` command
DEFAULT_GRID_LO = -2.0
DEFAULT_GRID_HI = 2.0
DEFAULT_GRID_POINTS = 401

# Random network generator
DEFAULT_LAYER_SIZES = (4, 8, 3)
DEFAULT_MEMBERS = 3
BIAS_SCALE = 0.1

# Projected gradient ascent attack
ATTACK_RESTARTS = 3
ATTACK_STEPS = 200
ATTACK_STEP_DIVISOR = 20  # step size = epsilon / ATTACK_STEP_DIVISOR
SOUNDNESS_SLACK = 1e-6

# Parallelism
THREADS_ENV = "SOFTBOUND_THREADS"


def thread_count() -> int:
    """
    Number of worker threads allowed by the environment.

    Returns:
        Value of SOFTBOUND_THREADS, or os.cpu_count() when unset or 0
    """
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        requested = int(raw)
    except ValueError:
        logging.getLogger(__name__).warning(
            "Ignoring invalid %s=%r, running single-threaded", THREADS_ENV, raw
        )
        return 1
    if requested <= 0:
        return os.cpu_count() or 1
    return requested
