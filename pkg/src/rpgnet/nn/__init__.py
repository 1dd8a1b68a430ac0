from .functional import softmax_cross_entropy, mse_loss
from .gradcheck import GradCheckReport, grad_check
from .model import BatchNormState, Network, Param

__all__ = [
    "BatchNormState", "GradCheckReport", "Network", "Param",
    "grad_check", "mse_loss", "softmax_cross_entropy",
]
