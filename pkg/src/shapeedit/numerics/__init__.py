from .optim import AdamState, adam_step
from .rng import derive_seed, seeded_rng
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    backward,
    concat,
    embedding,
    forward_backward,
    gelu,
    grad,
    layernorm,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    silu,
    softmax,
    take,
    transpose,
    tsum,
)
from .tensorio import TensorFormatError, decode_tensor, encode_tensor, load_tensor, save_tensor

__all__ = [
    "AdamState",
    "NonFiniteError",
    "Tensor",
    "TensorFormatError",
    "adam_step",
    "add",
    "backward",
    "concat",
    "decode_tensor",
    "derive_seed",
    "embedding",
    "encode_tensor",
    "forward_backward",
    "gelu",
    "grad",
    "layernorm",
    "load_tensor",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "reshape",
    "save_tensor",
    "seeded_rng",
    "silu",
    "softmax",
    "take",
    "transpose",
    "tsum",
]
