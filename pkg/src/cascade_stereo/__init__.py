"""Cascaded stereo matching on a small reverse-mode tensor library.

The network computes unary features with two stems, builds a concatenation
cost volume, aggregates it with a 3D hourglass and refines it with a 2D
hourglass. Everything runs on numpy with hand-written adjoints.
"""

from .data_io import (
    StereoSample,
    generate_synthetic_pair,
    load_checkpoint,
    load_dataset,
    load_disparity_png,
    load_image,
    normalize,
    save_checkpoint,
    save_disparity_png,
)
from .metrics import UNDEFINED, EvalReport, evaluate, report
from .net import ModelConfig, NetworkWeights, full_forward, init_weights, matching_forward, wta
from .tensor import ShapeError, Tensor, backward, no_grad, storage_dtype
from .training import TrainConfig, loss_cross_entropy, train_loop

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "ModelConfig",
    "NetworkWeights",
    "ShapeError",
    "StereoSample",
    "Tensor",
    "TrainConfig",
    "UNDEFINED",
    "backward",
    "evaluate",
    "full_forward",
    "generate_synthetic_pair",
    "init_weights",
    "load_checkpoint",
    "load_dataset",
    "load_disparity_png",
    "load_image",
    "loss_cross_entropy",
    "matching_forward",
    "no_grad",
    "normalize",
    "report",
    "save_checkpoint",
    "save_disparity_png",
    "storage_dtype",
    "train_loop",
    "wta",
]
