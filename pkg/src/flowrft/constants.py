"""
Constants for flowrft.

Static defaults shared across modules. Rollout and objective values follow common
image-model fine-tuning settings where they make sense at toy scale; learning rates and
step counts are scaled down for the 2-D models trained here.
"""

# Checkpoint format
CHECKPOINT_MAGIC = b"FRFTCKPT"
CHECKPOINT_VERSION = 1

# Trajectory dump format
TRAJECTORY_FORMAT = "flowrft-trajectory"
TRAJECTORY_VERSION = 1

# Config schema
CONFIG_SCHEMA_VERSION = 1

# Time grid
DEFAULT_NUM_STEPS = 16
DEFAULT_SHIFT = 3.0

# Rollout
DEFAULT_GROUP_SIZE = 12
DEFAULT_ETA = 0.3
DEFAULT_PERCEPTION_KNOT = 4
DEFAULT_CLUSTER_SIZE = 6
DEFAULT_KMEANS_ITERS = 100

# Inter-group schedule
DEFAULT_SCHEDULE_PERIOD = 40
DEFAULT_COARSE_RATIO = 0.25

# Objectives
DEFAULT_CLIP_RANGE = 1e-4
DEFAULT_ADV_CLIP_MAX = 5.0
DEFAULT_TIMESTEP_FRACTION = 0.6
DEFAULT_DPO_BETA = 1.0
ADVANTAGE_GUARD = 1e-8

# Consistency regularizer
DEFAULT_CPGO_WEIGHT = 1e-6
DEFAULT_CPGO_TAU = 0.6

# Optimizer
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_WEIGHT_DECAY = 1e-4
DEFAULT_MAX_GRAD_NORM = 0.01
DEFAULT_GRAD_ACCUM_STEPS = 12
DEFAULT_PROMPTS_PER_ITERATION = 2

# Toy data: 8 isotropic Gaussians on a circle
DEFAULT_N_MODES = 8
DEFAULT_MIXTURE_RADIUS = 4.0
DEFAULT_MIXTURE_STD = 0.3

# Model
DEFAULT_HIDDEN_WIDTHS = (64, 64)
DEFAULT_TIME_EMBED_DIM = 16
DEFAULT_COND_DIM = 8
SUPPORTED_ACTIVATIONS = ("silu", "tanh", "softplus")

# Image metrics
DEFAULT_CANNY_LOW = 50.0
DEFAULT_CANNY_HIGH = 150.0
DEFAULT_NOISE_WINDOW = 7
DEFAULT_NOISE_PERCENTILE = 30.0
DEFAULT_BLUR_SIGMA = 1.0
BLUR_KERNEL_SIZE = 5
DILATION_ITERATIONS = 2

# Verification tolerances
FD_STEP = 1e-5
FD_RTOL = 1e-4
IDENTITY_RTOL = 1e-8
SCALING_BAND = (3.0, 5.0)

METHODS = ("grpo", "fine", "coarse", "consistent_rft", "dpo", "ddpo")
SCHEDULE_MODES = ("dynamic", "fine", "coarse")
