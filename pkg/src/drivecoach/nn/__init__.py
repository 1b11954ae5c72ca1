from .tensor import Tensor, ShapeError, matmul, add, sub, mul, neg, exp, log, relu, tanh
from .tensor import softmax, log_softmax, concat, scale, tsum, tmean, gather, clip, minimum
from .optim import ParamStore, AdamState, adam_step
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "Tensor", "ShapeError", "matmul", "add", "sub", "mul", "neg", "exp", "log",
    "relu", "tanh", "softmax", "log_softmax", "concat", "scale", "tsum", "tmean",
    "gather", "clip", "minimum",
    "ParamStore", "AdamState", "adam_step",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
