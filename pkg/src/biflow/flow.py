"""Autoregressive affine flow: data -> Gaussian prior.

Each block maps a token sequence x (T tokens of d dims) to

    y_t = (x_t - mu_t) * exp(-alpha_t),    (mu_t, alpha_t) = f(x_<t, class)

with log|det| = -sum(alpha). Odd-index blocks run over the reversed token
order; trajectory states are always stored in canonical order. Class labels
enter as K learned tokens placed in front of the sequence; index
``num_classes`` is the null (unconditional) label.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Linear, Module, RMSNorm, Rng, Tensor, TransformerLayer, parameter

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FlowConfig:
    tokens: int                  # T
    token_dim: int               # d
    blocks: int = 4              # B
    layers: int = 2
    width: int = 64
    heads: int = 1
    num_classes: int = 1
    class_tokens: int = 1        # K
    clip: float | None = 1.0     # c; None disables clipping
    sigma: float = 0.3

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("a flow needs at least one block")
        if min(self.tokens, self.token_dim, self.layers, self.width, self.heads,
               self.num_classes, self.class_tokens) < 1:
            raise ValueError(f"all flow sizes must be >= 1: {self}")
        if self.clip is not None and self.clip <= 0:
            raise ValueError(f"clip range must be positive, got {self.clip}")
        if self.sigma < 0:
            raise ValueError(f"noise level must be >= 0, got {self.sigma}")


@dataclass
class AffineParams:
    mu: Tensor
    alpha: Tensor


def clip_params(raw: AffineParams, c: float | None) -> AffineParams:
    """Clamp mu and alpha to [-c, c]. Gradient passes inside, is zero outside."""
    if c is None:
        return raw
    if not c > 0:
        raise ValueError(f"clip range must be positive, got {c}")
    return AffineParams(nx.clamp(raw.mu, -c, c), nx.clamp(raw.alpha, -c, c))


class FlowBlock(Module):
    """Causal transformer conditioner for one affine block.

    The conditioner reads [class tokens, x_0 .. x_{T-2}] and its outputs at
    positions K-1 .. K+T-2 are the parameters for x_0 .. x_{T-1}, so token t
    only ever sees x_<t (token 0 sees the label alone).
    """

    def __init__(self, cfg: FlowConfig, flip: bool, rng: Rng, dtype=np.float32):
        super().__init__()
        w, k = cfg.width, cfg.class_tokens
        self.flip = flip
        self.cfg = cfg
        self.class_emb = parameter(
            (0.02 * rng.normal((cfg.num_classes + 1, k, w), dtype=np.float64)).astype(dtype))
        self.pos_emb = parameter(
            (0.02 * rng.normal((k + cfg.tokens - 1, w), dtype=np.float64)).astype(dtype))
        self.in_proj = Linear(cfg.token_dim, w, rng, dtype)
        self.layers = [TransformerLayer(w, cfg.heads, rng, dtype) for _ in range(cfg.layers)]
        self.norm = RMSNorm(w, dtype)
        self.out_proj = Linear(w, 2 * cfg.token_dim, rng, dtype, zero_init=True)

    def _head(self, h: Tensor, c: float | None) -> AffineParams:
        out = self.out_proj(self.norm(h))
        d = self.cfg.token_dim
        return clip_params(AffineParams(out[..., :d], out[..., d:]), c)

    def params(self, x: Tensor, labels: np.ndarray) -> AffineParams:
        """Teacher-forced parameters for every token of ``x`` (block order)."""
        k, t = self.cfg.class_tokens, self.cfg.tokens
        h = self.class_emb[labels]
        if t > 1:
            h = nx.concat([h, self.in_proj(x[:, :-1])], axis=1)
        h = h + self.pos_emb
        for layer in self.layers:
            h = layer(h, causal=True)
        return self._head(h[:, k - 1:], self.cfg.clip)

    def step(self, prev: Tensor | None, labels: np.ndarray, t: int,
             cache: nx.KVCache | None) -> AffineParams:
        """Parameters for token ``t`` while decoding.

        With a cache, feed only what is new: the class tokens at t=0, then the
        previously decoded token. Without one, ``prev`` holds the whole decoded
        prefix x_<t and everything is recomputed.
        """
        k = self.cfg.class_tokens
        if cache is None:
            h = self.class_emb[labels]
            if t > 0:
                h = nx.concat([h, self.in_proj(prev)], axis=1)
            h = h + self.pos_emb[:k + t]
        else:
            if cache.length != (0 if t == 0 else k + t - 1):
                raise ValueError(f"cache holds {cache.length} positions, decoding token {t}")
            if t == 0:
                h = self.class_emb[labels] + self.pos_emb[:k]
            else:
                h = self.in_proj(prev) + self.pos_emb[k + t - 1:k + t]
        for i, layer in enumerate(self.layers):
            h = layer(h, causal=True, cache=cache, layer=i)
        return self._head(h[:, -1:], self.cfg.clip)


def _check_finite(p: AffineParams, index: int) -> None:
    if not (np.all(np.isfinite(p.mu.data)) and np.all(np.isfinite(p.alpha.data))):
        raise FloatingPointError(f"block {index}: non-finite affine parameters")


class ForwardModel(Module):
    def __init__(self, cfg: FlowConfig, rng: Rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.blocks = [FlowBlock(cfg, flip=bool(i % 2), rng=rng.split(), dtype=dtype)
                       for i in range(cfg.blocks)]

    @property
    def null_label(self) -> int:
        return self.cfg.num_classes

    def labels(self, label, n: int) -> np.ndarray:
        """Broadcast a label (int, None for unconditional, or array) to shape (n,)."""
        if label is None:
            return np.full(n, self.null_label, dtype=np.int64)
        lab = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,)).copy()
        if lab.size and (lab.min() < 0 or lab.max() > self.null_label):
            raise ValueError(f"labels must lie in [0, {self.null_label}]")
        return lab

    def copy(self) -> ForwardModel:
        return copy.deepcopy(self)

    def with_weights(self, state: dict[str, np.ndarray]) -> ForwardModel:
        m = self.copy()
        m.load_state_dict(state)
        return m


@dataclass
class ForwardTrajectory:
    """States x~ = x^0 .. x^B = z (canonical token order) and the log-det."""

    states: list[Tensor]
    logdet: Tensor
    params: list[AffineParams] = field(default_factory=list)

    @property
    def z(self) -> Tensor:
        return self.states[-1]

    def arrays(self) -> list[np.ndarray]:
        return [s.data for s in self.states]


def block_forward(x: Tensor, labels: np.ndarray, block: FlowBlock,
                  index: int = 0) -> tuple[Tensor, Tensor, AffineParams]:
    """Apply one block to canonical-order tokens. Returns (y, logdet (N,), params)."""
    xb = nx.flip(x, 1) if block.flip else x
    p = block.params(xb, labels)
    _check_finite(p, index)
    y = (xb - p.mu) * nx.exp(-p.alpha)
    logdet = -p.alpha.sum(axis=(1, 2))
    if block.flip:
        y = nx.flip(y, 1)
        p = AffineParams(nx.flip(p.mu, 1), nx.flip(p.alpha, 1))
    return y, logdet, p


def forward_blocks(model: ForwardModel, x_tilde, label=None) -> ForwardTrajectory:
    """Push already-noised inputs through all blocks."""
    x = nx.as_tensor(x_tilde, dtype=None if isinstance(x_tilde, Tensor) else model.dtype)
    _check_layout(model, x.shape)
    labels = model.labels(label, x.shape[0])
    states, params = [x], []
    logdet = Tensor(np.zeros(x.shape[0], dtype=x.dtype))
    for i, block in enumerate(model.blocks):
        y, ld, p = block_forward(states[-1], labels, block, i)
        states.append(y)
        params.append(p)
        logdet = logdet + ld
    return ForwardTrajectory(states, logdet, params)


def forward_trajectory(x, label, model: ForwardModel, rng: Rng | None,
                       sigma: float | None = None) -> ForwardTrajectory:
    """Noise injection x~ = x + sigma * eps followed by all blocks."""
    sigma = model.cfg.sigma if sigma is None else sigma
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=model.dtype)
    if sigma > 0:
        if rng is None:
            raise ValueError("noise injection needs an rng")
        x = x + np.asarray(sigma, dtype=model.dtype) * rng.normal(x.shape, dtype=model.dtype)
    return forward_blocks(model, x, label)


def _check_layout(model: ForwardModel, shape) -> None:
    want = (model.cfg.tokens, model.cfg.token_dim)
    if len(shape) != 3 or tuple(shape[1:]) != want:
        raise ValueError(f"expected inputs of shape (N, {want[0]}, {want[1]}), got {tuple(shape)}")


def prior_log_prob(z: Tensor) -> Tensor:
    dim = int(np.prod(z.shape[1:]))
    return -0.5 * nx.square(z).sum(axis=(1, 2)) - 0.5 * dim * LOG_2PI


def nll_loss(traj: ForwardTrajectory) -> Tensor:
    """Batch-mean negative log-likelihood in nats per sample."""
    return -(prior_log_prob(traj.z) + traj.logdet).mean()


def log_prob(model: ForwardModel, x_tilde, label=None) -> Tensor:
    """Per-sample log density of the (noised) data under the flow."""
    traj = forward_blocks(model, x_tilde, label)
    return prior_log_prob(traj.z) + traj.logdet


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch: int = 256
    lr: float = 1e-3
    warmup_steps: int = 100
    betas: tuple[float, float] = (0.9, 0.95)
    ema_decay: float = 0.9999
    label_drop: float = 0.1
    max_skips: int = 50


class TrainingAborted(RuntimeError):
    pass


def lr_at(step: int, lr: float, warmup_steps: int) -> float:
    """Linear warmup, then constant."""
    if warmup_steps <= 0:
        return lr
    return lr * min(1.0, step / warmup_steps)


def state_rms(states: list[np.ndarray]) -> list[float]:
    """Root mean squared entry of each trajectory state."""
    return [float(np.sqrt(np.mean(np.square(s, dtype=np.float64)))) for s in states]


def drop_labels(labels: np.ndarray, rate: float, null: int, rng: Rng) -> np.ndarray:
    if rate <= 0:
        return labels
    drop = rng.uniform(0.0, 1.0, labels.shape, dtype=np.float64) < rate
    return np.where(drop, null, labels)


@dataclass
class ForwardResult:
    model: ForwardModel
    ema: nx.EMA
    log: list[dict]
    skipped: int = 0
    steps: int = 0

    def ema_model(self) -> ForwardModel:
        return self.model.with_weights(self.ema.shadow)


def train_forward(data: np.ndarray, labels: np.ndarray, model: ForwardModel,
                  cfg: TrainConfig, rng: Rng, log_path: str | None = None) -> ForwardResult:
    """Maximum-likelihood training with Adam, warmup, EMA and label drop.

    One metric row per epoch: step, epoch, nll (epoch mean), mean log-det and
    the RMS of every trajectory state x^0 .. x^B measured on the last batch.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    data = np.asarray(data, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    params = model.parameters()
    opt = nx.Adam(params, lr=cfg.lr, betas=cfg.betas)
    ema = nx.EMA.of(model.state_dict(), cfg.ema_decay)
    data_rng, noise_rng, drop_rng = rng.split(), rng.split(), rng.split()
    log, step, consecutive, skipped = [], 0, 0, 0
    n = len(data)
    for epoch in range(cfg.epochs):
        perm = data_rng.permutation(n)
        nlls, logdets, norms = [], [], None
        for start in range(0, n, cfg.batch):
            idx = perm[start:start + cfg.batch]
            lab = drop_labels(labels[idx], cfg.label_drop, model.null_label, drop_rng)
            try:
                traj = forward_trajectory(data[idx], lab, model, noise_rng)
                loss = nll_loss(traj)
                finite = bool(np.isfinite(loss.data))
            except FloatingPointError:
                finite = False
            if finite:
                grads = nx.grad(loss, params)
                finite = opt.step(grads, lr=lr_at(step + 1, cfg.lr, cfg.warmup_steps))
            if not finite:
                consecutive += 1
                skipped += 1
                if consecutive > cfg.max_skips:
                    raise TrainingAborted(f"{consecutive} consecutive non-finite steps at step {step}")
                continue
            consecutive = 0
            step += 1
            ema.update(model.state_dict())
            nlls.append(float(loss.data))
            logdets.append(float(traj.logdet.data.mean()))
            norms = state_rms(traj.arrays())
        row = {"step": step, "epoch": epoch,
               "nll": float(np.mean(nlls)) if nlls else float("nan"),
               "logdet_mean": float(np.mean(logdets)) if logdets else float("nan")}
        for i in range(model.cfg.blocks + 1):
            row[f"block_norm_{i}"] = norms[i] if norms else float("nan")
        log.append(row)
    if log_path is not None:
        write_csv(log_path, log)
    return ForwardResult(model, ema, log, skipped, step)


def write_csv(path: str, rows: list[dict]) -> None:
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def perturb_heads(model: ForwardModel, rng: Rng, scale: float = 0.25) -> ForwardModel:
    """Give the zero-initialised output heads random weights (std scale/sqrt(width)).

    A freshly built flow is the identity; this produces a random, non-trivial
    but well-conditioned untrained flow for inverse and log-det checks.
    """
    std = scale / math.sqrt(model.cfg.width)
    for block in model.blocks:
        w = block.out_proj.weight
        w.data = (std * rng.normal(w.shape, dtype=np.float64)).astype(w.dtype)
    return model
