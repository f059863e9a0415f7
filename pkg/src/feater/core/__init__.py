from feater.core.autograd import Tape, Tensor, as_tensor
from feater.core.counting import MacCounter, counting
from feater.core.gradcheck import GradCheckReport, grad_check, relative_error
from feater.core.kernels import (
    conv_channel_1x1,
    layer_norm,
    matmul,
    softmax_lastdim,
)
from feater.core.rng import RngStream
from feater.core.serial import read_tensor, write_tensor

__all__ = [
    "GradCheckReport",
    "MacCounter",
    "RngStream",
    "Tape",
    "Tensor",
    "as_tensor",
    "conv_channel_1x1",
    "counting",
    "grad_check",
    "layer_norm",
    "matmul",
    "read_tensor",
    "relative_error",
    "softmax_lastdim",
    "write_tensor",
]
