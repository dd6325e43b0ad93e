"""Layer-wise local learning for neural networks.

Unsupervised, gradient-free training of feature layers with a competitive
Hebbian rule, followed by conventional backprop training of the output
head. Deterministic by construction: fixed seeds and the ordered-shard
threading discipline make results bit-identical across runs and thread
counts.
"""

from .dataio import BatchPlan, Dataset, batches, load_idx_pair, split
from .engine import (
    Event,
    EventKind,
    HebbianTrainer,
    RunRecord,
    SupervisedSettings,
    SupervisedTrainer,
    evaluate,
    hebbian_evaluate,
    preprocess_for_layer,
    register_handler,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    FormatError,
    GeometryError,
    HebbError,
    UnsupportedOperationError,
)
from .layers import (
    LayerNode,
    Model,
    backward,
    batchnorm2d,
    conv2d,
    extract_patches,
    flatten,
    forward,
    linear,
    maxpool2d,
    repu,
)
from .optim import Adam, EarlyStopping, LocalOptimizer, ReduceLROnPlateau
from .rules import (
    KrotovParams,
    KrotovRule,
    LearningRule,
    RuleUpdate,
    bracket_currents,
    gate,
    krotov_update,
    rule_for_layer,
)
from .tensorcore import DTYPE, RngState, matmul, rank_rows, seeded_normal

__version__ = "0.1.0"
