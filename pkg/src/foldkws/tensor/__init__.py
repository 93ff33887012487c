from .core import Tensor, no_grad, parameter, precision, tensor
from .gradcheck import GradCheckReport, finite_diff_check
from .ops import (
    BatchNormState,
    batchnorm1d,
    conv1d,
    count_macs,
    global_avgpool1d,
    linear,
    log_softmax,
    maxpool1d,
    relu,
    weighted_cross_entropy,
)
from .optim import SGD, Adam

__all__ = [
    "Tensor", "no_grad", "parameter", "precision", "tensor",
    "GradCheckReport", "finite_diff_check",
    "BatchNormState", "batchnorm1d", "conv1d", "count_macs", "global_avgpool1d",
    "linear", "log_softmax", "maxpool1d", "relu", "weighted_cross_entropy",
    "SGD", "Adam",
]
