from pathlib import Path

# Vocabulary layout
EOS_ID = 0
PAD_ID = -1
DEFAULT_CHARSET = 'abcdefghijklmnopqrstuvwxyz0123456789'

# Numerics
LOG_EPS = 1e-12
MASK_NEG = -1e9
LAYER_NORM_EPS = 1e-5

# Tags
TAG_IV = 'IV'
TAG_OOV = 'OOV'

# File names
TRAIN_MANIFEST = 'train.tsv'
EVAL_MANIFEST = 'eval.tsv'
DATASET_META = 'dataset.yaml'
CKPT_MANIFEST = 'manifest.yaml'
CKPT_BLOB = 'tensors.bin'
TRAIN_LOG_FILE = 'train_log.tsv'
EVENT_LOG_FILE = 'events.log'
DEFAULT_RUN_DIR = Path('runs/default')

# Training steps between console loss lines
TRAIN_LOG_EVERY = 50

# Worker count for evaluation and rendering pools
WORKERS_ENV_VAR = 'VLAMD_WORKERS'

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA_ERROR = 2
EXIT_NUMERIC_FAILURE = 3

# Logging Configuration
LOG_LEVEL = 'INFO'
LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'
