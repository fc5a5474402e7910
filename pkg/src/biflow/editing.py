"""Training-free editing through the forward/reverse pair.

Both edits map data to the prior with the frozen forward flow (no noise
injection) and decode with the one-pass reverse model.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .flow import ForwardModel, forward_blocks
from .numerics import Rng
from .reverse import ReverseModel, reverse_pass

# guidance used by edits unless overridden; equal to the `sample` CLI defaults
DEFAULT_W = 0.0
DEFAULT_WD = 0.0


class Mask:
    """Per-token keep mask: 1 keeps the token, 0 resamples it."""

    def __init__(self, values, tokens: int, token_dim: int):
        m = np.asarray(values)
        if m.ndim == 1 and m.shape == (tokens,):
            m = np.repeat(m[:, None], token_dim, axis=1)
        if m.shape != (tokens, token_dim):
            raise ValueError(f"mask shape {m.shape} does not match layout ({tokens}, {token_dim})")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask entries must be 0 or 1")
        self.keep = m.astype(bool)

    @classmethod
    def from_tokens(cls, kept: list[int], tokens: int, token_dim: int) -> Mask:
        m = np.zeros(tokens)
        for t in kept:
            if not 0 <= t < tokens:
                raise ValueError(f"token index {t} out of range [0, {tokens})")
            m[t] = 1
        return cls(m, tokens, token_dim)

    @classmethod
    def parse(cls, spec: str, tokens: int, token_dim: int) -> Mask:
        """'0,2,5-7' -> keep those tokens; '' or 'none' keeps nothing; 'all' keeps all."""
        spec = spec.strip()
        if spec in ("", "none"):
            return cls.from_tokens([], tokens, token_dim)
        if spec == "all":
            return cls.from_tokens(list(range(tokens)), tokens, token_dim)
        kept = []
        for part in spec.split(","):
            a, _, b = part.partition("-")
            try:
                lo, hi = int(a), int(b or a)
            except ValueError:
                raise ValueError(f"bad mask spec {spec!r}") from None
            kept.extend(range(lo, hi + 1))
        return cls.from_tokens(kept, tokens, token_dim)

    def __array__(self, dtype=None, copy=None):
        return self.keep.astype(dtype or np.float32)


def _encode(x, label, fwd: ForwardModel) -> np.ndarray:
    with nx.no_grad():
        return forward_blocks(fwd, np.asarray(x, dtype=fwd.dtype), label).z.data


def _decode(z, label, rev: ReverseModel, w: float, wd: float) -> np.ndarray:
    with nx.no_grad():
        return reverse_pass(z, label, w, wd, rev).x_prime.data


def reconstruct(x, label, fwd: ForwardModel, rev: ReverseModel,
                w: float = DEFAULT_W, wd: float = DEFAULT_WD) -> np.ndarray:
    """x' = G(F(x | c) | c)."""
    return _decode(_encode(x, label, fwd), label, rev, w, wd)


def inpaint_prior(x, mask: Mask, label, fwd: ForwardModel, rng: Rng | None,
                  noise: np.ndarray | None = None) -> np.ndarray:
    """z' = M * F(M * x) + (1 - M) * eps, as a select so kept entries are copied bit for bit."""
    x = np.asarray(x, dtype=fwd.dtype)
    keep = mask.keep
    if x.shape[1:] != keep.shape:
        raise ValueError(f"mask {keep.shape} does not match data {x.shape[1:]}")
    z_mask = _encode(np.where(keep, x, 0).astype(fwd.dtype), label, fwd)
    if noise is None:
        if rng is None:
            raise ValueError("inpainting needs an rng or explicit noise")
        noise = rng.normal(x.shape, dtype=fwd.dtype)
    return np.where(keep, z_mask, np.asarray(noise, dtype=fwd.dtype))


def inpaint(x, mask: Mask, label, fwd: ForwardModel, rev: ReverseModel, rng: Rng | None,
            w: float = DEFAULT_W, wd: float = DEFAULT_WD, noise: np.ndarray | None = None) -> np.ndarray:
    """Keep the prior of the masked-in tokens, redraw the rest, decode in one pass."""
    return _decode(inpaint_prior(x, mask, label, fwd, rng, noise), label, rev, w, wd)


def class_edit(x, label_from, label_to, fwd: ForwardModel, rev: ReverseModel,
               w: float = DEFAULT_W, wd: float = DEFAULT_WD) -> np.ndarray:
    """Encode under ``label_from``, decode under ``label_to``."""
    n = len(x)
    src, dst = fwd.labels(label_from, n), rev.labels(label_to, n)
    return _decode(_encode(x, src, fwd), dst, rev, w, wd)
