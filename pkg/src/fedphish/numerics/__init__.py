"""Dense-tensor math: reverse-mode autodiff, layer primitives, optimizers."""

from .gradcheck import finite_difference_check
from .layers import (
    ConfigurationError,
    affine,
    attention_pool,
    bilstm_sequence,
    dropout,
    embedding,
    gelu,
    layer_norm,
    log_softmax,
    lstm_cell_step,
    lstm_sequence,
    mhsa_block,
    multiscale_conv_encode,
    softmax,
)
from .optim import Adam, Sgd, clip_global_norm, make_optimizer
from .tensor import (
    GradientError,
    Tensor,
    backward,
    concat,
    logsumexp,
    maximum,
    zero_grads,
)

__all__ = [
    "Adam",
    "ConfigurationError",
    "GradientError",
    "Sgd",
    "Tensor",
    "affine",
    "attention_pool",
    "backward",
    "bilstm_sequence",
    "clip_global_norm",
    "concat",
    "dropout",
    "embedding",
    "finite_difference_check",
    "gelu",
    "layer_norm",
    "log_softmax",
    "logsumexp",
    "lstm_cell_step",
    "lstm_sequence",
    "make_optimizer",
    "maximum",
    "mhsa_block",
    "multiscale_conv_encode",
    "softmax",
    "zero_grads",
]
