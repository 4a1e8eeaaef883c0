from .functional import (
    ATTENTION_KEYS,
    BatchNorm,
    ConfigurationError,
    DimensionError,
    as_tensor,
    concat,
    conv2d,
    cross_entropy,
    dropout,
    gelu,
    layer_norm,
    linear_forward,
    log_softmax,
    max_pool2d,
    multi_head_self_attention,
    relu,
    softmax,
    stack,
)
from .gradcheck import GradCheckFailure, GradCheckReport, grad_check
from .tensor import (
    GradientContractError,
    StopGradientError,
    Tensor,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    parameter,
    precision,
    set_default_dtype,
    zero_grads,
)

__all__ = [
    "ATTENTION_KEYS",
    "BatchNorm",
    "ConfigurationError",
    "DimensionError",
    "GradCheckFailure",
    "GradCheckReport",
    "GradientContractError",
    "StopGradientError",
    "Tensor",
    "as_tensor",
    "concat",
    "conv2d",
    "cross_entropy",
    "dropout",
    "gelu",
    "get_default_dtype",
    "grad_check",
    "is_grad_enabled",
    "layer_norm",
    "linear_forward",
    "log_softmax",
    "max_pool2d",
    "multi_head_self_attention",
    "no_grad",
    "parameter",
    "precision",
    "relu",
    "set_default_dtype",
    "softmax",
    "stack",
    "zero_grads",
]
