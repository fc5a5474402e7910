"""Adam and parameter EMA."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    skipped: int = 0


def adam_init(params: list[np.ndarray]) -> AdamState:
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.95), step: int | None = None,
              eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState, bool]:
    """One bias-corrected Adam update. Returns (params, state, applied).

    Non-finite gradients leave everything untouched and bump ``state.skipped``.
    New arrays are returned; the inputs are not modified.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} does not match param {p.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return params, state, False
    step = state.step + 1 if step is None else step
    if step < 1:
        raise ValueError("adam step counter starts at 1")
    b1, b2 = betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        new_params.append((p - lr * update).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return new_params, AdamState(new_m, new_v, step, state.skipped), True


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 4e-4,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = adam_init([p.data for p in self.params])

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> bool:
        new, self.state, applied = adam_step([p.data for p in self.params], grads, self.state,
                                             self.lr if lr is None else lr, self.betas,
                                             eps=self.eps)
        if applied:
            for p, d in zip(self.params, new):
                p.data = d
        return applied


@dataclass
class EMA:
    """Exponential moving average of parameter arrays.

    With ``warmup`` the effective decay is min(decay, (1 + n) / (10 + n)) after
    n updates, so short desk-scale runs do not sit on the initial weights.
    """

    decay: float
    warmup: bool = True
    shadow: dict[str, np.ndarray] = field(default_factory=dict)
    updates: int = 0

    @classmethod
    def of(cls, named: dict[str, np.ndarray], decay: float, warmup: bool = True) -> EMA:
        return cls(decay, warmup, {k: v.copy() for k, v in named.items()})

    def current_decay(self) -> float:
        if self.warmup:
            return min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))
        return self.decay

    def update(self, named: dict[str, np.ndarray]) -> None:
        d = self.current_decay()
        for k, v in named.items():
            s = self.shadow[k]
            self.shadow[k] = (d * s + (1.0 - d) * v).astype(v.dtype) if d else v.copy()
        self.updates += 1
