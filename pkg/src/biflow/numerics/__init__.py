"""Dense-array math with reverse-mode autodiff, seeded randomness and
transformer primitives."""

from .nn import (MLP, KVCache, Linear, Module, RMSNorm, SelfAttention, TransformerLayer,
                 attention, causal_attention, parameter)
from .optim import EMA, Adam, AdamState, adam_init, adam_step
from .rng import Rng, gaussian
from .tensor import (DEFAULT_DTYPE, Tensor, UnreachedInputWarning, as_tensor, clamp, concat, exp,
                     flip, getitem, grad, is_grad_enabled, is_row_invariant, log, matmul, mean, no_grad, relu,
                     reshape, row_invariant, sigmoid, silu, softmax, sqrt, square, stack, tanh,
                     transpose, tsum, where)

__all__ = [name for name in dir() if not name.startswith("_")]
