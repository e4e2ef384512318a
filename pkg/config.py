from __future__ import annotations

LOG_LEVEL = "info"

# Environment variable consulted when --data-dir is not given
DATA_DIR_ENV = "BITWEIGHT_DATA_DIR"

# Training recipe defaults
BATCH_SIZE = 125
LR_MAX = 0.1
LR_MIN = 1e-4
CYCLE_EPOCHS = (2, 4, 8, 16, 32, 64, 128)
MOMENTUM = 0.9
WEIGHT_DECAY = 5e-4
# Larger datasets overfit less and use the lighter decay
WEIGHT_DECAY_LARGE_DATA = 1e-4

# Step schedule used as the ablation baseline
STEP_LR_VALUES = (0.1, 0.01, 0.001)
STEP_LR_BOUNDARIES = (85, 170)
STEP_TOTAL_EPOCHS = 254

# Batch normalization
BN_EPSILON = 1e-5
BN_EMA_DECAY = 0.9

# Augmentation
PAD_PIXELS = 4
CUTOUT_SIZE = 18
HFLIP_PROB = 0.5

# Dataset file names, relative to the data directory
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_FILES = {
    "train": tuple(f"cifar-10-batches-bin/data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("cifar-10-batches-bin/test_batch.bin",),
}
CIFAR100_FILES = {
    "train": ("cifar-100-binary/train.bin",),
    "test": ("cifar-100-binary/test.bin",),
}

# File formats
PACK_MAGIC = b"B1W1"
PACK_VERSION = 1
CHECKPOINT_MAGIC = b"B1WC"
CHECKPOINT_VERSION = 1
SIDECAR_SUFFIX = ".json"

# Output file names inside --out-dir
TRAIN_LOG_NAME = "train_log.jsonl"
CHECKPOINT_NAME = "checkpoint.b1wc"
PACKED_NAME = "model.b1w1"
