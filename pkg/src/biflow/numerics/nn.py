"""Small module system and the transformer pieces the flow conditioners use."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class Module:
    """Parameter container. Attributes that are parameters, modules or lists of
    modules are registered in assignment order, which fixes checkpoint names."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
            self._modules[name] = ModuleList(value)
            value = self._modules[name]
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ModuleList(Module, list):
    def __init__(self, items):
        Module.__init__(self)
        list.__init__(self, items)
        for i, m in enumerate(items):
            self._modules[str(i)] = m


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=data.dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, dtype=np.float32,
                 zero_init: bool = False, bias: bool = True):
        super().__init__()
        if zero_init:
            w = np.zeros((n_in, n_out), dtype=dtype)
        else:
            w = rng.normal((n_in, n_out), dtype=np.float64) / math.sqrt(n_in)
        self.weight = parameter(np.asarray(w, dtype=dtype))
        self.has_bias = bias
        if bias:
            self.bias = parameter(np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.has_bias else y


class RMSNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-6):
        super().__init__()
        self.gain = parameter(np.ones(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        ms = T.mean(T.square(x), axis=-1, keepdims=True)
        return x / T.sqrt(ms + self.eps) * self.gain


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    Queries are aligned with the *end* of the key sequence, so with ``causal``
    query i may attend to keys ``0 .. (Tk - Tq) + i``. That makes the same
    function serve full sequences, prefills and single cached steps.
    """
    tq, dh = q.shape[-2], q.shape[-1]
    tk = k.shape[-2]
    if k.shape[-1] != dh or v.shape[-2] != tk:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if causal and tk > 1:
        offset = tk - tq
        blocked = np.arange(tk)[None, :] > (np.arange(tq)[:, None] + offset)
        if blocked.any() and T.is_row_invariant():
            # masked entries would change the summation order of the softmax
            # and of w @ v; evaluate each query on exactly its visible keys
            rows = [attention(q[..., i:i + 1, :], k[..., :offset + i + 1, :],
                              v[..., :offset + i + 1, :], causal=False) for i in range(tq)]
            return T.concat(rows, axis=-2)
        if blocked.any():
            scores = T.where(blocked, -np.inf, scores)
    w = T.softmax(scores, axis=-1)
    return T.matmul(w, v)


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Attention where position t only sees positions <= t (same length q/k/v)."""
    if not (q.shape[-2] == k.shape[-2] == v.shape[-2]):
        raise ValueError(f"causal_attention needs equal lengths, got {q.shape}, {k.shape}, {v.shape}")
    return attention(q, k, v, causal=True)


class KVCache:
    """Keys/values per layer for incremental decoding of one conditioner."""

    def __init__(self, n_layers: int):
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.values: list[np.ndarray | None] = [None] * n_layers

    @property
    def length(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[-2]

    def extend(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            if self.keys[layer].shape[:-2] != k.shape[:-2]:
                raise ValueError("cache batch layout does not match the decoding batch")
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=-2)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=-2)
        return self.keys[layer], self.values[layer]


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: Rng, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor, causal: bool, cache: KVCache | None = None,
                 layer: int = 0) -> Tensor:
        n, t, dim = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(n, t, 3, h, dim // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if cache is not None:
            kd, vd = cache.extend(layer, k.data, v.data)
            k, v = Tensor(kd), Tensor(vd)
        out = attention(q, k, v, causal)
        out = out.transpose(0, 2, 1, 3).reshape(n, t, dim)
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: Rng, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm attention + MLP with residuals; no dropout."""

    def __init__(self, dim: int, heads: int, rng: Rng, dtype=np.float32, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = RMSNorm(dim, dtype)
        self.attn = SelfAttention(dim, heads, rng, dtype)
        self.norm2 = RMSNorm(dim, dtype)
        self.mlp = MLP(dim, mlp_ratio * dim, rng, dtype)

    def __call__(self, x: Tensor, causal: bool, cache: KVCache | None = None,
                 layer: int = 0) -> Tensor:
        x = x + self.attn(self.norm1(x), causal, cache, layer)
        return x + self.mlp(self.norm2(x))
