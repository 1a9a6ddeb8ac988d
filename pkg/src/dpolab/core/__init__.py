"""Dense float64 array math: reverse-mode gradients for small classifiers and 2-D DCT."""

from dpolab.core.dct import dct2, idct2
from dpolab.core.network import (
    ARCHITECTURES,
    TrainedModel,
    forward,
    init_model,
    loss_and_input_grad,
    predict,
)
from dpolab.core.ops import cross_entropy, log_softmax, softmax

__all__ = [
    "ARCHITECTURES",
    "TrainedModel",
    "cross_entropy",
    "dct2",
    "forward",
    "idct2",
    "init_model",
    "log_softmax",
    "loss_and_input_grad",
    "predict",
    "softmax",
]
