"""Exact inverse of the forward flow, score denoising and inference-time CFG.

Decoding runs the blocks in reverse, and inside each block the tokens one at
a time: x_t = z_t * exp(alpha_t) + mu_t, where (mu_t, alpha_t) come from the
already decoded prefix. The conditional and unconditional branches of CFG are
stacked along the batch axis so one conditioner call serves both.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .flow import FlowBlock, ForwardModel, forward_blocks, prior_log_prob
from .numerics import KVCache, Rng, Tensor

_SCHEDULES = {"linear": "linear", "constant": "constant", "const": "constant"}
_SPACES = {"parameter": "parameter", "param": "parameter", "pixel": "pixel"}
_MODES = {"online": "online", "offline": "offline"}


@dataclass
class GuidanceSpec:
    scale: float = 0.0
    schedule: str = "constant"
    space: str = "parameter"
    mode: str = "online"
    denoise_scale: float = 0.0

    def __post_init__(self):
        try:
            self.schedule = _SCHEDULES[self.schedule]
            self.space = _SPACES[self.space]
            self.mode = _MODES[self.mode]
        except KeyError as e:
            raise ValueError(f"unknown guidance option {e}") from None
        if self.scale < 0 or self.denoise_scale < 0:
            raise ValueError("guidance scales must be >= 0")

    def weight(self, t: int, tokens: int) -> float:
        """Scale at (decode-order) token t; the linear ramp restarts every block."""
        if self.schedule == "linear":
            return self.scale * t / max(tokens - 1, 1)
        return self.scale


@dataclass
class EvalCounter:
    """Number of network evaluations, counting a batched call once."""

    conditioner_calls: int = 0
    denoise_passes: int = 0
    block_calls: int = 0

    def reset(self) -> None:
        self.conditioner_calls = self.denoise_passes = self.block_calls = 0


def tarflow_cfg_extrapolate(cond_val, uncond_val, w_t):
    """(1 + w) cond - w uncond, written so that w = 0 or cond == uncond return cond exactly."""
    return cond_val + w_t * (cond_val - uncond_val)


def _finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def _decode_block(block: FlowBlock, zz: np.ndarray, lab: np.ndarray, guidance: GuidanceSpec | None,
                  use_cache: bool, counter: EvalCounter | None, index: int):
    """Invert one block for block-order outputs ``zz`` (M, T, d).

    Guided calls stack the conditional rows over the unconditional ones
    (M = 2N). Online guidance writes the guided token into both halves before
    the next step; offline leaves the halves independent. Returns the decoded
    rows and the per-token (mu, alpha) of every row.
    """
    m, t_len, _ = zz.shape
    n = m // 2
    online = guidance is not None and guidance.mode == "online"
    x = np.zeros_like(zz)
    cache = KVCache(len(block.layers)) if use_cache else None
    if cache is None and len(block.layers) == 0:
        raise ValueError("block has no layers")
    mus, alphas = [], []
    for t in range(t_len):
        if use_cache:
            prev = Tensor(x[:, t - 1:t]) if t > 0 else None
        else:
            prev = Tensor(x[:, :t]) if t > 0 else None
        p = block.step(prev, lab, t, cache)
        if counter is not None:
            counter.conditioner_calls += 1
        mu, al = p.mu.data[:, 0], p.alpha.data[:, 0]
        if not _finite(mu, al):
            raise FloatingPointError(f"block {index}: non-finite affine parameters at token {t}")
        mus.append(mu)
        alphas.append(al)
        if not online:
            x[:, t] = zz[:, t] * np.exp(al) + mu
            continue
        w_t = guidance.weight(t, t_len)
        y_t = zz[:n, t]
        if guidance.space == "parameter":
            mu_g = tarflow_cfg_extrapolate(mu[:n], mu[n:], w_t)
            al_g = tarflow_cfg_extrapolate(al[:n], al[n:], w_t)
            xt = y_t * np.exp(al_g) + mu_g
        else:
            xt = tarflow_cfg_extrapolate(y_t * np.exp(al[:n]) + mu[:n], y_t * np.exp(al[n:]) + mu[n:], w_t)
        # both branches continue from the guided token
        x[:n, t] = xt
        x[n:, t] = xt
    return x, np.stack(mus, axis=1), np.stack(alphas, axis=1)


def _schedule(guidance: GuidanceSpec, t_len: int, flip: bool, dtype) -> np.ndarray:
    """Per-token scales in canonical token order, shape (1, T, 1)."""
    w = np.array([guidance.weight(t, t_len) for t in range(t_len)], dtype=dtype)
    return (w[::-1] if flip else w)[None, :, None]


def sequential_invert(z, label, model: ForwardModel, guidance: GuidanceSpec | None = None,
                      use_cache: bool = True, counter: EvalCounter | None = None,
                      exact: bool = True) -> np.ndarray:
    """Decode x~ from prior samples z, token by token, block by block.

    ``guidance`` with unconditional labels (or None) decodes unguided. Online
    guidance extrapolates at every token of every block. Offline guidance
    decodes the conditional and unconditional sequences independently through
    all blocks and extrapolates once: on the final outputs (pixel space), or
    by applying the extrapolated (mu, alpha) of each block to z (parameter
    space), so guidance never feeds back into the conditioners.

    With ``exact`` all matmuls use the batch-size-independent kernel, so cached
    and uncached decoding, and guided runs at w=0, agree bit for bit with
    unguided decoding.
    """
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=model.dtype)
    cfg = model.cfg
    if z.ndim != 3 or z.shape[1:] != (cfg.tokens, cfg.token_dim):
        raise ValueError(f"expected z of shape (N, {cfg.tokens}, {cfg.token_dim}), got {z.shape}")
    n = len(z)
    labels = model.labels(label, n)
    if guidance is not None and np.all(labels == model.null_label):
        guidance = None
    if guidance is not None:
        labels = np.concatenate([labels, np.full(n, model.null_label, dtype=labels.dtype)])
        y = np.concatenate([z, z])
    else:
        y = z
    offline = guidance is not None and guidance.mode == "offline"
    chain = z   # guided chain of offline parameter-space guidance
    ctx = nx.row_invariant() if exact else contextlib.nullcontext()
    with nx.no_grad(), ctx:
        for i in reversed(range(len(model.blocks))):
            block = model.blocks[i]
            flip = (lambda a: a[:, ::-1]) if block.flip else (lambda a: a)
            xb, mu, al = _decode_block(block, np.ascontiguousarray(flip(y)), labels, guidance,
                                       use_cache, counter, i)
            y = np.ascontiguousarray(flip(xb))
            if offline and guidance.space == "parameter":
                w = _schedule(guidance, cfg.tokens, False, z.dtype)
                mu_g = tarflow_cfg_extrapolate(mu[:n], mu[n:], w)
                al_g = tarflow_cfg_extrapolate(al[:n], al[n:], w)
                chain = np.ascontiguousarray(flip(flip(chain) * np.exp(al_g) + mu_g))
    if guidance is None:
        return y
    if not offline:
        return y[:n]
    if guidance.space == "parameter":
        return chain
    w = _schedule(guidance, cfg.tokens, model.blocks[0].flip, z.dtype)
    return tarflow_cfg_extrapolate(y[:n], y[n:], w)


# -- denoising ----------------------------------------------------------------

ScoreFn = Callable[[np.ndarray], np.ndarray]


def score_denoise(x_tilde, sigma: float, score: ScoreFn) -> np.ndarray:
    """x = x~ + sigma^2 * score(x~)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x_tilde = np.asarray(x_tilde)
    s = np.asarray(score(x_tilde))
    if s.shape != x_tilde.shape:
        raise ValueError(f"score shape {s.shape} does not match input {x_tilde.shape}")
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("non-finite score")
    return x_tilde + np.asarray(sigma ** 2, dtype=x_tilde.dtype) * s


def model_score(model: ForwardModel, label=None, denoise_scale: float = 0.0,
                counter: EvalCounter | None = None) -> ScoreFn:
    """Score of the flow density, by a forward-backward pass.

    With a nonzero ``denoise_scale`` and a real label the score is guided:
    (1 + w_d) * s(x|c) - w_d * s(x), both branches in one stacked pass.
    """

    def score(x_tilde: np.ndarray) -> np.ndarray:
        n = len(x_tilde)
        labels = model.labels(label, n)
        guided = denoise_scale > 0 and not np.all(labels == model.null_label)
        xin = np.concatenate([x_tilde, x_tilde]) if guided else x_tilde
        lab = np.concatenate([labels, np.full(n, model.null_label)]) if guided else labels
        x = Tensor(np.asarray(xin, dtype=model.dtype), requires_grad=True)
        traj = forward_blocks(model, x, lab)
        lp = (prior_log_prob(traj.z) + traj.logdet).sum()
        (g,) = nx.grad(lp, [x])
        if counter is not None:
            counter.denoise_passes += 1
        if guided:
            return tarflow_cfg_extrapolate(g[:n], g[n:], denoise_scale)
        return g

    return score


def sample_exact(model: ForwardModel, n: int, label, rng: Rng,
                 guidance: GuidanceSpec | None = None, denoise: str = "score",
                 use_cache: bool = True, counter: EvalCounter | None = None,
                 exact: bool = True) -> np.ndarray:
    """Prior draw -> sequential inverse -> (optional) score denoising."""
    cfg = model.cfg
    z = rng.normal((n, cfg.tokens, cfg.token_dim), dtype=model.dtype)
    if n == 0:
        return z
    x = sequential_invert(z, label, model, guidance, use_cache, counter, exact)
    if denoise == "score" and cfg.sigma > 0:
        wd = guidance.denoise_scale if guidance is not None else 0.0
        x = score_denoise(x, cfg.sigma, model_score(model, label, wd, counter))
    elif denoise not in ("score", "none"):
        raise ValueError(f"unknown denoise mode {denoise!r}")
    return x
