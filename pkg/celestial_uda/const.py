DOMAIN = "celestial_uda"

# Scale tags, ordered finest -> coarsest spatial map
SCALE_LARGE = "large"
SCALE_MEDIUM = "medium"
SCALE_SMALL = "small"
SCALE_TAGS = (SCALE_LARGE, SCALE_MEDIUM, SCALE_SMALL)

DOMAIN_SOURCE = "source"
DOMAIN_TARGET = "target"

# Methods
METHOD_SOURCE_ONLY = "source_only"
METHOD_TARGET_ONLY = "target_only"
METHOD_INST_ADV_VISGA = "inst_adv_visga"
METHOD_INST_ADV_PC = "inst_adv_pc"
METHOD_INST_ADV_PC_SFF = "inst_adv_pc_sff"
METHOD_INST_CON_VISGA = "inst_con_visga"
METHOD_INST_CON_PC = "inst_con_pc"
METHOD_INST_CON_PC_SFF = "inst_con_pc_sff"
METHOD_FEAT_ADV_YOCOV1 = "feat_adv_yocov1"
METHOD_FEAT_ADV_PC_KMEANS = "feat_adv_pc_kmeans"
METHOD_FEAT_ADV_PTAP = "feat_adv_ptap"

# Row order of comparison tables
METHODS_ORDER = (
    METHOD_SOURCE_ONLY,
    METHOD_INST_ADV_VISGA,
    METHOD_INST_ADV_PC,
    METHOD_INST_ADV_PC_SFF,
    METHOD_INST_CON_VISGA,
    METHOD_INST_CON_PC,
    METHOD_INST_CON_PC_SFF,
    METHOD_FEAT_ADV_YOCOV1,
    METHOD_FEAT_ADV_PC_KMEANS,
    METHOD_FEAT_ADV_PTAP,
    METHOD_TARGET_ONLY,
)

# Config keys
CONF_METHOD = "method"
CONF_EPOCHS = "epochs"
CONF_BATCH_SIZE = "batch_size"
CONF_LEARNING_RATE = "learning_rate"
CONF_MOMENTUM = "momentum"
CONF_WEIGHT_DECAY = "weight_decay"
CONF_GRAD_CLIP = "grad_clip"
CONF_LAMBDA_IMG = "lambda_img"
CONF_LAMBDA_INST = "lambda_inst"
CONF_LAMBDA_PC = "lambda_pc"
CONF_GRL_LAMBDA = "grl_lambda"
CONF_SEED = "seed"
CONF_MERGE_THRESHOLD = "merge_threshold"
CONF_KEEP_FRACTION = "keep_fraction"
CONF_MARGIN = "margin"
CONF_CONF_THRESHOLD = "conf_threshold"
CONF_NMS_IOU = "nms_iou"
CONF_POOL_SIZE = "pool_size"
CONF_MAX_INSTANCES = "max_instances"
CONF_KMEANS_MAX_ITER = "kmeans_max_iter"
CONF_PC_NORMALIZE = "pc_normalize"
CONF_CONTRASTIVE_RAW = "contrastive_raw"
CONF_ATTENTION_KERNEL = "attention_kernel"
CONF_INPUT_SIZE = "input_size"
CONF_BACKBONE_CHANNELS = "backbone_channels"
CONF_NECK_CHANNELS = "neck_channels"  # large, medium, small spatial maps
CONF_STRIDES = "strides"
CONF_DEVICE = "device"

# Defaults
DEFAULT_EPOCHS = 50
DEFAULT_BATCH_SIZE = 32
DEFAULT_LEARNING_RATE = 0.01
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 5e-4
DEFAULT_GRAD_CLIP = 10.0
DEFAULT_LAMBDA = 1.0
DEFAULT_GRL_LAMBDA = 1.0
DEFAULT_SEED = 0
DEFAULT_MERGE_THRESHOLD = 0.1
DEFAULT_KEEP_FRACTION = 0.5
DEFAULT_MARGIN = 1.0
DEFAULT_CONF_THRESHOLD = 0.25
DEFAULT_NMS_IOU = 0.7
DEFAULT_MAP_IOU = 0.5
DEFAULT_POOL_SIZE = 3
DEFAULT_MAX_INSTANCES = 8
DEFAULT_KMEANS_MAX_ITER = 50
DEFAULT_ATTENTION_KERNEL = 3
DEFAULT_INPUT_SIZE = 160
DEFAULT_BACKBONE_CHANNELS = 32
DEFAULT_NECK_CHANNELS = (32, 48, 64)
DEFAULT_STRIDES = (8, 16, 32)
DEFAULT_DEVICE = "cpu"
DEFAULT_MAX_DETECTIONS = 300

# Numerics
LOG_CLAMP_EPS = 1e-7
# Box side (in grid cells) each scale is tuned for during target assignment
SCALE_REFERENCE_CELLS = 3.0

# Dataset recipes
RECIPE_MINI_MARS = "mini-mars"
RECIPE_MINI_ASTEROID = "mini-asteroid"
RECIPE_MINI_MOON = "mini-moon"

SPLIT_SOURCE_TRAIN = "source_train"
SPLIT_TARGET_TRAIN = "target_train"
SPLIT_TARGET_TEST = "target_test"

MANIFEST_NAME = "manifest.yaml"
TRAIN_LOG_NAME = "train_log.csv"
CHECKPOINT_LAST = "last.pt"
CHECKPOINT_BEST = "best.pt"
DIAGNOSTICS_NAME = "divergence.yaml"
REPORT_NAME = "eval_report.yaml"
RUN_CONFIG_NAME = "config.cfg"
