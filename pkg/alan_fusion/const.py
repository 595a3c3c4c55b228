"""Constants for the ALAN image fusion package."""

DOMAIN = "alan_fusion"

# Environment variables
ENV_THREADS = "ALAN_FUSION_THREADS"
ENV_SLOW_TESTS = "ALAN_FUSION_SLOW_TESTS"

# Pair kinds declared by dataset manifests
PAIR_KIND_CROSS_MODAL = "cross_modal"
PAIR_KIND_MULTI_FOCUS = "multi_focus"
PAIR_KIND_RECON = "recon"
PAIR_KINDS: tuple[str, ...] = (
    PAIR_KIND_CROSS_MODAL,
    PAIR_KIND_MULTI_FOCUS,
    PAIR_KIND_RECON,
)

# Pair kinds whose manifest records carry a third (ground-truth) path
PAIR_KINDS_WITH_GT: tuple[str, ...] = (PAIR_KIND_MULTI_FOCUS,)

# Network kinds
KIND_RECON = "recon_subtask1"
KIND_MULTIFOCUS = "multifocus_subtask2"
KIND_FUSION = "fusion_main"
NETWORK_KINDS: tuple[str, ...] = (KIND_RECON, KIND_MULTIFOCUS, KIND_FUSION)

# Training stages and the network kind each one trains
STAGE_SUBTASK1 = "subtask1"
STAGE_SUBTASK2 = "subtask2"
STAGE_MAIN = "main"
STAGES: tuple[str, ...] = (STAGE_SUBTASK1, STAGE_SUBTASK2, STAGE_MAIN)
STAGE_KINDS: dict[str, str] = {
    STAGE_SUBTASK1: KIND_RECON,
    STAGE_SUBTASK2: KIND_MULTIFOCUS,
    STAGE_MAIN: KIND_FUSION,
}
STAGE_PAIR_KINDS: dict[str, str] = {
    STAGE_SUBTASK1: PAIR_KIND_RECON,
    STAGE_SUBTASK2: PAIR_KIND_MULTI_FOCUS,
    STAGE_MAIN: PAIR_KIND_CROSS_MODAL,
}
# Checkpoint stage tag of a freshly instantiated network
STAGE_UNTRAINED = "untrained"

# Loss task tags
TASK_LM = "Lm"
TASK_LF = "Lf"
TASK_LE = "Le"
STAGE_TASK_TAGS: dict[str, str] = {
    STAGE_SUBTASK1: TASK_LE,
    STAGE_SUBTASK2: TASK_LM,
    STAGE_MAIN: TASK_LF,
}

# Fusion criteria
CRITERION_NONLINEAR = "nonlinear"
CRITERION_MAXIMUM = "maximum"
CRITERION_SUM = "sum"
CRITERION_WEIGHTED_AVERAGE = "weighted_average"
CRITERION_CONCAT = "concat"
CRITERION_HYBRID = "hybrid"
CRITERIA: tuple[str, ...] = (
    CRITERION_NONLINEAR,
    CRITERION_MAXIMUM,
    CRITERION_SUM,
    CRITERION_WEIGHTED_AVERAGE,
    CRITERION_CONCAT,
    CRITERION_HYBRID,
)
# Criteria compared by the fusion-criteria ablation
ABLATION_CRITERIA: tuple[str, ...] = (
    CRITERION_NONLINEAR,
    CRITERION_MAXIMUM,
    CRITERION_SUM,
    CRITERION_WEIGHTED_AVERAGE,
)

# Channel width of one feature stream and of the C6/C7 input per criterion
STREAM_CHANNELS = 64
MERGE_WIDTHS: dict[str, int] = {
    CRITERION_NONLINEAR: 256,
    CRITERION_CONCAT: 256,
    CRITERION_HYBRID: 128,
    CRITERION_MAXIMUM: 64,
    CRITERION_SUM: 64,
    CRITERION_WEIGHTED_AVERAGE: 64,
}

# Lateral source names
LATERAL_RECON = "recon"
LATERAL_MULTIFOCUS = "multifocus"
LATERAL_SOURCES: tuple[str, ...] = (LATERAL_RECON, LATERAL_MULTIFOCUS)

# Default values
DEFAULT_PATCH_WIDTH = 80
DEFAULT_PATCH_HEIGHT = 64
DEFAULT_ATTENTION_RATIO = 4
DEFAULT_FIXED_WEIGHT = 0.5
DEFAULT_WEIGHT_EPS = 1e-8
DEFAULT_DEGENERATE_FLOOR = 1e-2
DEFAULT_HEAD_BIAS = 0.5
DEFAULT_SSIM_WINDOW = 11
DEFAULT_SSIM_SIGMA = 1.5
DEFAULT_SSIM_K1 = 0.01
DEFAULT_SSIM_K2 = 0.03
DEFAULT_CAP_DB = 50.0
DEFAULT_MSE_FLOOR = 1e-12
DEFAULT_ALPHAS: tuple[float, float, float, float] = (1.0, 0.1, 0.1, 1.0)
DEFAULT_BRIGHTNESS_RANGE: tuple[float, float] = (0.5, 1.2)
DEFAULT_BLUR_SIGMA_RANGE: tuple[float, float] = (0.0, 2.0)
DEFAULT_NOISE_SIGMA_RANGE: tuple[float, float] = (0.0, 0.05)
DEFAULT_KEEP_CHECKPOINTS = 5
DEFAULT_ADAM_BETAS: tuple[float, float] = (0.9, 0.999)
DEFAULT_ADAM_EPS = 1e-8
DEFAULT_RUN_DIR = "runs"

# Per-stage hyperparameter defaults (learning rate, batch, epochs, patch w x h)
STAGE_DEFAULTS: dict[str, dict[str, float | int]] = {
    STAGE_SUBTASK1: {
        "learning_rate": 1e-4,
        "batch_size": 8,
        "epochs": 4,
        "patch_width": 256,
        "patch_height": 256,
    },
    STAGE_SUBTASK2: {
        "learning_rate": 1e-4,
        "batch_size": 16,
        "epochs": 10,
        "patch_width": 80,
        "patch_height": 64,
    },
    STAGE_MAIN: {
        "learning_rate": 1e-4,
        "batch_size": 16,
        "epochs": 10,
        "patch_width": 80,
        "patch_height": 64,
    },
}

# Optimizers
OPTIMIZER_ADAM = "adam"
OPTIMIZER_GD = "gd"

# Checkpoint container
CHECKPOINT_MAGIC = b"ALANCKPT\n"
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_SUFFIX = ".alan"

# Run-directory artefacts
RUN_CONFIG_FILE = "run_config.yaml"
PROVENANCE_FILE = "provenance.json"
TRAIN_LOG_FILE = "train_log.csv"

# Metric report columns. cpbd and jnb are reserved for externally computed values.
METRIC_COLUMNS: tuple[str, ...] = (
    "ag",
    "entropy",
    "sf",
    "sd",
    "ssim_a",
    "ssim_b",
    "ssim_mean",
    "vif_a",
    "vif_b",
    "psnr_a",
    "psnr_b",
    "cpbd",
    "jnb",
)
RESERVED_METRIC_COLUMNS: tuple[str, ...] = ("cpbd", "jnb")
VIF_MIN_SIZE = 32

# Mean opinion scores as stored in the published subjective comparison (0-5 scale).
MOS_DATASETS: tuple[str, ...] = ("CVS", "IR", "MF")
PUBLISHED_MOS: dict[str, dict[str, float]] = {
    "FZL": {"CVS": 4.48, "IR": 4.18, "MF": 4.20},
    "CSR": {"CVS": 4.46, "IR": 3.74, "MF": 4.35},
    "CVT": {"CVS": 4.41, "IR": 4.51, "MF": 4.57},
    "CNN": {"CVS": 4.64, "IR": 4.19, "MF": 4.66},
    "GTF": {"CVS": 3.70, "IR": 4.08, "MF": 4.25},
    "LATLR": {"CVS": 4.47, "IR": 4.43, "MF": 4.34},
    "RP": {"CVS": 4.65, "IR": 4.68, "MF": 4.63},
    "FUSIONGAN": {"CVS": 3.80, "IR": 4.22, "MF": 4.46},
    "IFCNN": {"CVS": 4.68, "IR": 4.63, "MF": 4.70},
    "MCNN": {"CVS": 4.40, "IR": 4.10, "MF": 4.67},
    "OURS": {"CVS": 4.76, "IR": 4.79, "MF": 4.65},
}
MOS_MIN_SCORE = 0.0
MOS_MAX_SCORE = 5.0
MOS_MIN_RATERS = 3

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# prepare-data kinds and the pair kind each one emits
PREPARE_CVS_SYNTH = "cvs-synth"
PREPARE_RECON = "recon"
PREPARE_MULTIFOCUS = "multifocus"
PREPARE_KINDS: dict[str, str] = {
    PREPARE_CVS_SYNTH: PAIR_KIND_CROSS_MODAL,
    PREPARE_RECON: PAIR_KIND_RECON,
    PREPARE_MULTIFOCUS: PAIR_KIND_MULTI_FOCUS,
}
IMAGE_SUFFIXES: tuple[str, ...] = (".png", ".pgm", ".pnm", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")

# Ablation modes and the lateral configurations compared by the task ablation
ABLATE_CRITERIA = "criteria"
ABLATE_TASKS = "tasks"
ABLATE_MODES: tuple[str, ...] = (ABLATE_CRITERIA, ABLATE_TASKS)
TASK_VARIANTS: dict[str, tuple[bool, bool]] = {
    "main_only": (False, False),
    "main_subtask1": (True, False),
    "main_subtask2": (False, True),
    "full": (True, True),
}
# The multi-focus subtask network scored on its own, without a main stage
TASK_MULTIFOCUS_ONLY = "multifocus_only"
TASK_VARIANT_ORDER: tuple[str, ...] = (
    "main_only",
    "main_subtask1",
    TASK_MULTIFOCUS_ONLY,
    "main_subtask2",
    "full",
)
ABLATION_FILE = "comparison.csv"
