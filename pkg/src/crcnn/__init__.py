"""Cascade-residual CNN for video foreground segmentation, in numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import compute_background, extract_patches, normalize, reassemble, split_and_batch
from .errors import (
    CheckpointFormatError,
    CRCNNError,
    DataError,
    DegenerateBatchError,
    DivergenceError,
    InvalidMaskError,
    ShapeError,
    UndefinedMetricsError,
)
from .evaluation import ConfusionReport, aggregate, binarize, confusion, evaluate_video, metrics
from .model import (
    NetworkSpec,
    approximated_background,
    build_bcnn,
    build_scnn,
    cascade_input,
    count_parameters,
    segment_probabilities,
)
from .training import TrainConfig, TrainReport, train_bcnn, train_cascade, train_scnn

__version__ = "0.1.0"
