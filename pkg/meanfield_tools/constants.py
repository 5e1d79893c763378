import math

# Floating tolerances
WEIGHT_SUM_TOLERANCE = 1e-12
STEP_INDEX_EPSILON = 1e-9
GRID_MATCH_TOLERANCE = 1e-9
FD_DERIVATIVE_STEP = 1e-5
FD_DERIVATIVE_RTOL = 1e-6
FD_HESSIAN_STEP = 1e-4
FD_CHECK_POINTS = 100
FD_CHECK_RANGE = 5.0

# Activation bounds
TANH_BOUNDS = (1.0, 1.0, 4.0 / (3.0 * math.sqrt(3.0)))
SIGMOID_BOUNDS = (1.0, 0.25, math.sqrt(3.0) / 18.0)
DEFAULT_ACTIVATION = "tanh"

# Default run
DEFAULT_WIDTH = 1000
DEFAULT_HORIZON = 1.0
DEFAULT_LEARNING_RATE = 1.0
DEFAULT_SEED = 20190801
DEFAULT_REPLICAS = 1
DEFAULT_INIT_HALF_WIDTH = 1.0
MAX_SEED = 2**64 - 1

# Three-point, one-dimensional dataset used by the acceptance experiments
DEFAULT_DATA_POINTS = ((-1.0, -0.6), (0.5, 0.4), (1.5, 0.9))

# Mean-field integration
DEFAULT_REFERENCE_SIZE = 100_000
DEFAULT_STEP_FRACTION = 1e-3  # h = fraction * T
RK4_ORDER = 4
QUADRATURE_INTERVALS = 50  # reference snapshots used for time integrals

# Sobolev machinery
BOX_SCALE = 3.0  # B = 3 sqrt(D) C_o
SUPPORT_INFLATION = 1.25
DEFAULT_TRUNCATION = 16
TAIL_FACTOR = 4
QUADRATURE_NODES = 48
ATOM_CHUNK = 256

# Fluctuation statistics
DEFAULT_SIGNIFICANCE = 0.01
MIN_NORMALITY_SAMPLES = 50
MIN_COVARIANCE_REPLICAS = 30
MIN_RATE_POINTS = 3
GRID_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)

# Limit SPDE
PSD_TOLERANCE = 1e-10
DEFAULT_GALERKIN_MODES = 8
DEFAULT_SPDE_PATHS = 10_000
DEFAULT_SPDE_DT = 1e-3
PROJECTION_RESIDUAL_THRESHOLD = 0.5
GALERKIN_NODES = 64

# Harness
MANIFEST_NAME = "manifest.json"
CSV_FLOAT_FORMAT = "%.17g"
CODE_VERSION = "0.1.0"
DEFAULT_THREADS = 1

# Terminal charts
CHART_WIDTH = 80
CHART_HEIGHT = 20

# Acceptance thresholds
LLN_SLOPE_RANGE = (-0.65, -0.35)
VARIANCE_RTOL = 0.15
NORMALITY_PASS_FRACTION = 0.8
DECOMPOSITION_TOLERANCE = 1e-10
QV_RTOL = 0.10
SPDE_RTOL = 0.25
SPDE_SE_FACTOR = 3.0
SPDE_BLOCK = 4
V_SLOPE_RANGE = (-1.3, -0.7)
GAMMA_SLOPE_RANGE = (-0.7, -0.3)
XI_RATIO_MAX = 3.0
