"""Minimal differentiable numeric kernel used by the model."""

from . import _kernels
from ._kernels import BACKEND
from .gradcheck import GradCheckReport, check_params, numeric_grad, numeric_grad_array, rel_error
from .ops import (
    causal_attention,
    causal_attention_backward,
    cross_entropy,
    cross_entropy_backward,
    linear,
    linear_backward,
    log_softmax,
    mse_sum_mean,
    mse_sum_mean_backward,
    rmsnorm,
    rmsnorm_backward,
    rope,
    rope_backward,
    swiglu,
    swiglu_backward,
)
from .params import Parameter, ParamStore

__all__ = [
    "BACKEND",
    "GradCheckReport",
    "Parameter",
    "ParamStore",
    "causal_attention",
    "causal_attention_backward",
    "check_params",
    "cross_entropy",
    "cross_entropy_backward",
    "linear",
    "linear_backward",
    "log_softmax",
    "mse_sum_mean",
    "mse_sum_mean_backward",
    "numeric_grad",
    "numeric_grad_array",
    "rel_error",
    "rmsnorm",
    "rmsnorm_backward",
    "rope",
    "rope_backward",
    "swiglu",
    "swiglu_backward",
]
