import logging

DEFAULT_LOGGING_FORMAT = "[%(asctime)s]%(levelname)s:%(name)s:%(message)s"
DEFAULT_LOGGING_LEVEL = logging.INFO
DEFAULT_LOGGING_FILE_WHEN = "d"
DEFAULT_LOGGING_FILE_INTERVAL = 1
DEFAULT_LOGGING_FILE_DELAY = False
DEFAULT_LOGGING_FILE_ENCODING = "utf-8"


class Environment:
    DEV = "dev"
    PRD = "prd"
    TEST = "tests"
    LOCAL = "local"


class DomainKind:
    INTERVAL = "interval"
    BALL = "ball"
    HALF_SPACE = "half_space"
    GENERIC = "generic"


class Semantics:
    FREEZE_AT_EXIT = "freeze_at_exit"
    INDICATOR_GATED = "indicator_gated"


class MetricKind:
    W1_HAT = "w1_hat"
    W1 = "w1"
    WEIGHTED_VARIATION = "weighted_variation"


class HypothesisTag:
    A = "A"
    B = "B"
    E = "E"


class BoundaryCost:
    CLOSURE = "closure"
    INTERIOR = "interior"


class SolverMethod:
    EXACT = "exact"
    SINKHORN = "sinkhorn"
    AUTO = "auto"


class Regime:
    BOTH_ALIVE = 0
    SECOND_DEAD = 1
    FIRST_DEAD = 2


class Tier:
    FAST = "fast"
    FULL = "full"


# metric family contracted under each hypothesis
METRIC_FOR_HYPOTHESIS = {
    HypothesisTag.A: MetricKind.W1_HAT,
    HypothesisTag.B: MetricKind.W1,
    HypothesisTag.E: MetricKind.WEIGHTED_VARIATION,
}

BOUNDARY_TOL = 1e-9
MASS_TOL = 1e-12
MARGINAL_TOL = 1e-9
WEIGHT_QUANTUM = 1e-12
VIOLATION_SLACK = 1e-8

THETA_SCHEDULE = (0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0)
THETA_TARGET_RATIO = 0.8
INDETERMINATE_FACTOR = 10.0

EXACT_SOLVER_MAX_ATOMS = 2000
DEFAULT_COARSEN_ATOMS = 400
DEFAULT_SINKHORN_REG = 1e-2
DEFAULT_SINKHORN_ITER = 5000

ESS_REFRESH_FRACTION = 0.2
STAT_SIGMAS = 3.0
LARGE_LAMBDA = 100.0
MOMENT_SPAN = 10.0

FLOAT_FORMAT = "%.17g"
MANIFEST_NAME = "manifest.json"

MAX_SEED = 2 ** 64
