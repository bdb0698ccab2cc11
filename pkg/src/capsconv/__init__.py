"""Capsule convolution engine: tensor-to-tensor kernel mapping with
hand-derived backward passes, training loop, and diagnostics."""

from .activations import (
    MarginLossConfig,
    class_scores,
    leaky_relu,
    margin_loss,
    predict,
    squash,
)
from .conv import ConvGradients, conv_backward, conv_forward
from .model import (
    CapsuleShape,
    Checkpoint,
    ConfigError,
    LayerConfig,
    ModelConfig,
    PRESETS,
    count_parameters,
    forward_features,
    init_kernels,
    load_checkpoint,
    model_scores,
    parse_config_text,
    preset,
    save_checkpoint,
)
from .tensor_core import FeatureMapShape, KernelShape, ShapeError
from .training import (
    EvalResult,
    NumericError,
    TrainConfig,
    TrainResult,
    batch_loss_and_grads,
    build_pipeline,
    evaluate,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
