from .autograd import Tensor, backward
from .functional import cross_entropy, cross_entropy_graph, one_hot, softmax
from .model import (
    BoundModel,
    ConfigError,
    LayerSpec,
    LayerStack,
    ModelParams,
    ShapeError,
    forward,
    small_cnn,
    small_mlp,
    split,
)
from .optim import SgdState, sgd_step

__all__ = [
    "BoundModel",
    "ConfigError",
    "LayerSpec",
    "LayerStack",
    "ModelParams",
    "SgdState",
    "ShapeError",
    "Tensor",
    "backward",
    "cross_entropy",
    "cross_entropy_graph",
    "forward",
    "one_hot",
    "sgd_step",
    "small_cnn",
    "small_mlp",
    "softmax",
    "split",
]
