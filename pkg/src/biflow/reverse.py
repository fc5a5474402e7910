"""Learned one-pass reverse model G: z -> h^{B-1} -> ... -> h^0 -> x'.

B bidirectional transformer blocks approximate the inverse flow block by
block, and an optional extra block maps h^0 (which tracks the noisy x~) to
the clean sample. Every block sees the class tokens and two guidance tokens
(embeddings of w and w_d), so guided sampling stays a single pass.

Two block layouts:

* hidden space (naive, hidden_align): the first block lifts tokens to the
  model width, intermediate states h^i live there, block 0 projects back to
  token space. Alignment goes through linear heads phi_i (phi_0 = identity).
* input space (hidden_distill): every block maps tokens to tokens with a
  residual, so h^i can be compared with x^i directly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .flow import ForwardModel, drop_labels, forward_trajectory, lr_at, write_csv
from .inverse import EvalCounter
from .numerics import Linear, Module, RMSNorm, Rng, Tensor, TransformerLayer, parameter

STRATEGIES = ("naive", "hidden_distill", "hidden_align")
NORM_MODES = ("none", "clip_assumed", "normalized")


@dataclass
class ReverseConfig:
    tokens: int
    token_dim: int
    blocks: int                  # B of the forward model
    width: int = 32
    layers: int = 1              # transformer layers per block
    heads: int = 1
    num_classes: int = 1
    class_tokens: int = 1
    hidden_space: bool = True
    denoise: bool = True
    proj_heads: bool = True

    def __post_init__(self):
        if min(self.tokens, self.token_dim, self.blocks, self.width, self.layers, self.heads,
               self.num_classes, self.class_tokens) < 1:
            raise ValueError(f"all reverse-model sizes must be >= 1: {self}")

    @classmethod
    def for_strategy(cls, strategy: str, **kw) -> ReverseConfig:
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        kw.setdefault("hidden_space", strategy != "hidden_distill")
        kw.setdefault("proj_heads", strategy == "hidden_align")
        return cls(**kw)


class GuidanceEmbed(Module):
    """Scalar guidance scale -> one conditioning token."""

    def __init__(self, width: int, rng: Rng, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(1, width, rng, dtype)
        self.fc2 = Linear(width, width, rng, dtype)

    def __call__(self, w: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(w, dtype=self.fc1.weight.dtype).reshape(-1, 1, 1))
        return self.fc2(nx.silu(self.fc1(x)))


class ReverseBlock(Module):
    def __init__(self, in_dim: int, out_dim: int, cfg: ReverseConfig, rng: Rng,
                 dtype=np.float32):
        super().__init__()
        w = cfg.width
        self.in_dim, self.out_dim = in_dim, out_dim
        self.residual = in_dim == out_dim == cfg.token_dim
        self.pos_emb = parameter((0.02 * rng.normal((cfg.tokens, w), dtype=np.float64)).astype(dtype))
        self.in_proj = Linear(in_dim, w, rng, dtype) if in_dim != w or self.residual else None
        self.layers = [TransformerLayer(w, cfg.heads, rng, dtype) for _ in range(cfg.layers)]
        if out_dim != w or self.residual:
            self.norm = RMSNorm(w, dtype)
            self.out_proj = Linear(w, out_dim, rng, dtype, zero_init=True)
        else:
            self.out_proj = None

    def __call__(self, h: Tensor, cond: Tensor) -> Tensor:
        u = self.in_proj(h) if self.in_proj is not None else h
        p = cond.shape[1]
        s = nx.concat([cond, u + self.pos_emb], axis=1)
        for layer in self.layers:
            s = layer(s, causal=False)
        u = s[:, p:]
        if self.out_proj is None:
            return u
        out = self.out_proj(self.norm(u))
        return h + out if self.residual else out


class ReverseModel(Module):
    def __init__(self, cfg: ReverseConfig, rng: Rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        d, w, b = cfg.token_dim, cfg.width, cfg.blocks
        self.class_emb = parameter(
            (0.02 * rng.normal((cfg.num_classes + 1, cfg.class_tokens, w), dtype=np.float64)).astype(dtype))
        self.w_emb = GuidanceEmbed(w, rng.split(), dtype)
        self.wd_emb = GuidanceEmbed(w, rng.split(), dtype)
        # blocks[j] produces h^j from h^{j+1} (h^B = z); evaluated from j = B-1 down to 0
        dims = [self.state_dim(j) for j in range(b + 1)]
        self.blocks = [ReverseBlock(dims[j + 1], dims[j], cfg, rng.split(), dtype) for j in range(b)]
        if cfg.denoise:
            self.denoise_block = ReverseBlock(d, d, cfg, rng.split(), dtype)
        if cfg.proj_heads and cfg.hidden_space and b > 1:
            self.heads = [Linear(w, d, rng.split(), dtype, zero_init=True) for _ in range(1, b)]

    def state_dim(self, j: int) -> int:
        """Feature size of h^j (h^B is z, h^0 lives in token space)."""
        if not self.cfg.hidden_space or j == 0 or j == self.cfg.blocks:
            return self.cfg.token_dim
        return self.cfg.width

    @property
    def null_label(self) -> int:
        return self.cfg.num_classes

    @property
    def num_block_evals(self) -> int:
        return self.cfg.blocks + int(self.cfg.denoise)

    def head(self, i: int) -> Callable[[Tensor], Tensor]:
        """phi_i: identity for i = 0 and whenever states already live in token space."""
        if i == 0 or self.state_dim(i) == self.cfg.token_dim:
            return lambda h: h
        if not hasattr(self, "heads"):
            raise ValueError("model was built without projection heads")
        return self.heads[i - 1]

    def labels(self, label, n: int) -> np.ndarray:
        if label is None:
            return np.full(n, self.null_label, dtype=np.int64)
        lab = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,)).copy()
        if lab.size and (lab.min() < 0 or lab.max() > self.null_label):
            raise ValueError(f"labels must lie in [0, {self.null_label}]")
        return lab

    def cond_tokens(self, labels: np.ndarray, w: np.ndarray, wd: np.ndarray) -> Tensor:
        return nx.concat([self.class_emb[labels], self.w_emb(w), self.wd_emb(wd)], axis=1)

    def copy(self) -> ReverseModel:
        return copy.deepcopy(self)

    def with_weights(self, state: dict[str, np.ndarray]) -> ReverseModel:
        m = self.copy()
        m.load_state_dict(state)
        return m


@dataclass
class ReverseTrajectory:
    """hiddens[i] = h^i for i = 0 .. B-1, plus the final output x'."""

    hiddens: list[Tensor]
    x_prime: Tensor


def _scales(w, n: int, dtype) -> np.ndarray:
    return np.broadcast_to(np.asarray(w, dtype=dtype), (n,)).copy()


def reverse_pass(z, label, w, wd, model: ReverseModel,
                 counter: EvalCounter | None = None) -> ReverseTrajectory:
    """One feedforward pass from z through every block, guided by (w, w_d)."""
    z = nx.as_tensor(z, dtype=None if isinstance(z, Tensor) else model.dtype)
    n = z.shape[0]
    labels = model.labels(label, n)
    cond = model.cond_tokens(labels, _scales(w, n, model.dtype), _scales(wd, n, model.dtype))
    h, hiddens = z, [None] * model.cfg.blocks
    for j in reversed(range(model.cfg.blocks)):
        h = model.blocks[j](h, cond)
        hiddens[j] = h
        if counter is not None:
            counter.block_calls += 1
    x_prime = h
    if model.cfg.denoise:
        x_prime = model.denoise_block(h, cond)
        if counter is not None:
            counter.block_calls += 1
    return ReverseTrajectory(hiddens, x_prime)


def sample_reverse(model: ReverseModel, n: int, label, rng: Rng, w: float = 0.0,
                   wd: float = 0.0, counter: EvalCounter | None = None) -> np.ndarray:
    """1-NFE sampling: z ~ N(0, I), x' = G(z | c, w, w_d)."""
    cfg = model.cfg
    z = rng.normal((n, cfg.tokens, cfg.token_dim), dtype=model.dtype)
    if n == 0:
        return z
    with nx.no_grad():
        return reverse_pass(z, label, w, wd, model, counter).x_prime.data


# -- guidance algebra -------------------------------------------------------------

def guided_block(cond_out, uncond_out, w):
    """(1 + w) G(h|c) - w sg(G(h)); the unconditional branch carries no gradient."""
    if isinstance(uncond_out, Tensor):
        uncond_out = uncond_out.detach()
    return (1 + w) * cond_out - w * uncond_out


def unguided_recovery(guided_cond, guided_uncond, w):
    """Conditional unguided output from guided outputs: (G_cfg(h|c) + w G_cfg(h)) / (1 + w)."""
    return (guided_cond + w * guided_uncond) / (1 + w)


# -- distances and losses -----------------------------------------------------------

def _mse(a: Tensor, b: Tensor) -> Tensor:
    return nx.square(a - b).mean(axis=tuple(range(1, a.ndim)))


def _sse(a: Tensor, b: Tensor) -> Tensor:
    return nx.square(a - b).sum(axis=tuple(range(1, a.ndim)))


METRICS: dict[str, Callable[[Tensor, Tensor], Tensor]] = {"mse": _mse, "sse": _sse}


def register_metric(name: str, fn: Callable[[Tensor, Tensor], Tensor]) -> None:
    """Add a per-sample distance D(a, b) -> (N,). Feature-space metrics plug in here."""
    METRICS[name] = fn


def distance(a, b, metric: str = "mse") -> Tensor:
    """Per-sample distance, shape (N,)."""
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    try:
        fn = METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}") from None
    return fn(a, b)


def naive_loss(x, x_prime, metric: str = "mse") -> Tensor:
    return distance(x, x_prime, metric).mean()


def hidden_distill_loss(fwd_states, hiddens, metric: str = "mse") -> Tensor:
    """sum_i D(x^i, h^i), both lists ordered by i (h^0 is the block-0 output)."""
    if len(fwd_states) != len(hiddens):
        raise ValueError(f"{len(fwd_states)} forward states vs {len(hiddens)} reverse hiddens")
    total = None
    for x, h in zip(fwd_states, hiddens):
        term = naive_loss(x, h, metric)
        total = term if total is None else total + term
    return total


def hidden_align_loss(fwd_states, hiddens, heads, metric: str = "mse") -> Tensor:
    """sum_i D(x^i, phi_i(h^i)); ``heads[0]`` must be the identity (None)."""
    if not (len(fwd_states) == len(hiddens) == len(heads)):
        raise ValueError("states, hiddens and heads differ in length")
    if heads[0] is not None:
        raise ValueError("phi_0 is the identity; pass None")
    projected = []
    for x, h, phi in zip(fwd_states, hiddens, heads):
        p = h if phi is None else phi(nx.as_tensor(h))
        if p.shape != nx.as_tensor(x).shape:
            raise ValueError(f"head output {p.shape} does not match state {nx.as_tensor(x).shape}")
        projected.append(p)
    return hidden_distill_loss(fwd_states, projected, metric)


def adaptive_weight(d, c_hat: float = 1e-3, p: float = 1.0) -> np.ndarray:
    """(d + c_hat)^-p as a constant (no gradient flows through it)."""
    d = np.asarray(d.data if isinstance(d, Tensor) else d, dtype=np.float64)
    if c_hat <= 0 or p < 0:
        raise ValueError("need c_hat > 0 and p >= 0")
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    return (d + c_hat) ** (-p)


def weighted(d: Tensor, c_hat: float, p: float) -> Tensor:
    """Batch mean of sg(w_p) * D."""
    w = adaptive_weight(d, c_hat, p).astype(d.dtype)
    return (d * w).mean()


# -- trajectory normalisation -------------------------------------------------------

@dataclass
class TrajectoryStats:
    """Dataset mean of ||x^i||^2 for every state x^0 .. x^B."""

    mean_sq: np.ndarray

    def __post_init__(self):
        self.mean_sq = np.asarray(self.mean_sq, dtype=np.float64)
        if np.any(self.mean_sq <= 0):
            raise ValueError("trajectory statistics must be strictly positive")

    @classmethod
    def from_states(cls, states: list[np.ndarray]) -> TrajectoryStats:
        return cls([float(np.mean(np.sum(np.square(s, dtype=np.float64).reshape(len(s), -1), axis=1)))
                    for s in states])

    @classmethod
    def ones(cls, n: int) -> TrajectoryStats:
        return cls(np.ones(n))


def trajectory_normalize(states: list, stats: TrajectoryStats) -> list:
    """Divide state i by sqrt(E||x^i||^2)."""
    if len(states) > len(stats.mean_sq):
        raise ValueError("more states than statistics")
    out = []
    for s, m in zip(states, stats.mean_sq):
        scale = 1.0 / np.sqrt(m)
        if isinstance(s, Tensor):
            out.append(s * np.asarray(scale, dtype=s.dtype))
        else:
            out.append((np.asarray(s) * scale).astype(np.asarray(s).dtype))
    return out


def compute_trajectory_stats(fwd: ForwardModel, data: np.ndarray, labels: np.ndarray,
                             rng: Rng, batch: int = 2048) -> TrajectoryStats:
    sums, count = None, 0
    with nx.no_grad():
        for s in range(0, len(data), batch):
            traj = forward_trajectory(data[s:s + batch], labels[s:s + batch], fwd, rng)
            sq = [np.sum(np.square(a, dtype=np.float64).reshape(len(a), -1)) for a in traj.arrays()]
            sums = sq if sums is None else [u + v for u, v in zip(sums, sq)]
            count += len(traj.z.data)
    return TrajectoryStats(np.array(sums) / count)


# -- training -----------------------------------------------------------------------

@dataclass
class LossConfig:
    strategy: str = "hidden_align"
    metric: str = "mse"
    p: float = 2.0
    c_hat: float = 1e-3
    term_weights: tuple[float, ...] | None = None   # align terms 0..B-1, then recon
    trajectory_norm: str = "normalized"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.trajectory_norm not in NORM_MODES:
            raise ValueError(f"unknown trajectory_norm {self.trajectory_norm!r}")
        if self.p < 0 or self.c_hat <= 0:
            raise ValueError("need p >= 0 and c_hat > 0")


@dataclass
class ReverseTrainConfig:
    steps: int = 2000
    batch: int = 256
    lr: float = 1e-3
    warmup_steps: int = 100
    betas: tuple[float, float] = (0.9, 0.95)
    ema_decay: float = 0.999
    label_drop: float = 0.1
    w_max: float = 0.0
    wd_max: float = 0.0
    log_every: int = 100
    max_skips: int = 50


def training_pass(z: Tensor, labels: np.ndarray, w: np.ndarray, wd: np.ndarray,
                  model: ReverseModel) -> ReverseTrajectory:
    """Guided pass whose per-block outputs are turned back into unguided ones.

    Each block is evaluated with the label and with the null label (the latter
    without gradient); the recovered unguided output is what gets supervised
    and what feeds the next block.
    """
    n = z.shape[0]
    cond = model.cond_tokens(labels, w, wd)
    null = np.full(n, model.null_label, dtype=np.int64)
    guided = np.any(labels != model.null_label) and (np.any(w > 0) or np.any(wd > 0))
    if guided:
        with nx.no_grad():
            cond_u = model.cond_tokens(null, w, wd)

    def run(block, h, scale):
        out = block(h, cond)
        if not guided or not np.any(scale > 0):
            return out
        with nx.no_grad():
            out_u = block(h.detach(), cond_u)
        s = scale.reshape(-1, *([1] * (out.ndim - 1)))
        # rows with the null label have identical branches; recovery returns them unchanged
        return unguided_recovery(out, out_u.detach(), s)

    h, hiddens = z, [None] * model.cfg.blocks
    for j in reversed(range(model.cfg.blocks)):
        h = run(model.blocks[j], h, w)
        hiddens[j] = h
    x_prime = run(model.denoise_block, h, wd) if model.cfg.denoise else h
    return ReverseTrajectory(hiddens, x_prime)


def loss_terms(fwd_states: list[np.ndarray], x_clean: np.ndarray, traj: ReverseTrajectory,
               model: ReverseModel, cfg: LossConfig,
               stats: TrajectoryStats | None) -> dict[str, Tensor]:
    """Per-sample distances for every active term: align_i and recon."""
    b = model.cfg.blocks
    targets = fwd_states[:b]
    if cfg.trajectory_norm == "normalized" and stats is not None:
        targets = trajectory_normalize(targets, stats)
    terms = {}
    if cfg.strategy != "naive":
        # without a denoise block, h^0 is the output and is covered by the recon term
        first = 0 if model.cfg.denoise else 1
        for i in range(first, b):
            h = traj.hiddens[i]
            pred = model.head(i)(h) if cfg.strategy == "hidden_align" else h
            terms[f"align_{i}"] = distance(targets[i], pred, cfg.metric)
    recon_target = x_clean if model.cfg.denoise else fwd_states[0]
    terms["recon"] = distance(recon_target, traj.x_prime, cfg.metric)
    return terms


def combine(terms: dict[str, Tensor], cfg: LossConfig, blocks: int) -> Tensor:
    names = [f"align_{i}" for i in range(blocks)] + ["recon"]
    weights = dict(zip(names, cfg.term_weights)) if cfg.term_weights is not None else {}
    total = None
    for k, d in terms.items():
        t = weighted(d, cfg.c_hat, cfg.p) * weights.get(k, 1.0)
        total = t if total is None else total + t
    return total


@dataclass
class ReverseResult:
    model: ReverseModel
    ema: nx.EMA
    log: list[dict]
    stats: TrajectoryStats | None
    steps: int = 0
    skipped: int = 0

    def ema_model(self) -> ReverseModel:
        return self.model.with_weights(self.ema.shadow)


def reconstruct_mse(fwd: ForwardModel, rev: ReverseModel, data: np.ndarray, labels: np.ndarray,
                    rng: Rng, batch: int = 2048) -> float:
    """Held-out MSE between x and G(F(x + sigma eps)) at w = w_d = 0."""
    err, count = 0.0, 0
    with nx.no_grad():
        for s in range(0, len(data), batch):
            x, lab = data[s:s + batch], labels[s:s + batch]
            traj = forward_trajectory(x, lab, fwd, rng)
            target = x if rev.cfg.denoise else traj.states[0].data
            xp = reverse_pass(traj.z, lab, 0.0, 0.0, rev).x_prime.data
            err += float(np.sum(np.mean(np.square(xp - target, dtype=np.float64).reshape(len(x), -1), axis=1)))
            count += len(x)
    return err / count


def _fingerprint(model: Module) -> dict[str, bytes]:
    return {k: v.tobytes() for k, v in model.state_dict().items()}


def train_reverse(data: np.ndarray, labels: np.ndarray, fwd: ForwardModel, rev: ReverseModel,
                  loss_cfg: LossConfig, cfg: ReverseTrainConfig, rng: Rng,
                  eval_data: tuple[np.ndarray, np.ndarray] | None = None,
                  log_path: str | None = None) -> ReverseResult:
    """Fit the reverse model to trajectories of a frozen forward model."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    if rev.cfg.blocks != fwd.cfg.blocks:
        raise ValueError("reverse model must have as many inverse blocks as the forward model")
    data = np.asarray(data, dtype=fwd.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    frozen = _fingerprint(fwd)
    stats_rng, data_rng, noise_rng, drop_rng, w_rng, eval_rng = (rng.split() for _ in range(6))
    stats = None
    if loss_cfg.trajectory_norm == "normalized":
        stats = compute_trajectory_stats(fwd, data[:4096], labels[:4096], stats_rng)
    params = rev.parameters()
    opt = nx.Adam(params, lr=cfg.lr, betas=cfg.betas)
    ema = nx.EMA.of(rev.state_dict(), cfg.ema_decay)
    n, b = len(data), rev.cfg.blocks
    log, step, consecutive, skipped = [], 0, 0, 0
    perm, cursor = data_rng.permutation(n), 0
    while step < cfg.steps:
        if cursor + cfg.batch > n:
            perm, cursor = data_rng.permutation(n), 0
        idx = perm[cursor:cursor + cfg.batch]
        cursor += cfg.batch
        lab = drop_labels(labels[idx], cfg.label_drop, rev.null_label, drop_rng)
        with nx.no_grad():
            traj = forward_trajectory(data[idx], lab, fwd, noise_rng)
        states = traj.arrays()
        m = len(idx)
        w = w_rng.uniform(0.0, cfg.w_max, (m,), dtype=rev.dtype)
        wd = w_rng.uniform(0.0, cfg.wd_max, (m,), dtype=rev.dtype)
        rtraj = training_pass(Tensor(states[-1]), lab, w, wd, rev)
        terms = loss_terms(states, data[idx], rtraj, rev, loss_cfg, stats)
        loss = combine(terms, loss_cfg, b)
        ok = bool(np.isfinite(loss.data))
        if ok:
            ok = opt.step(nx.grad(loss, params), lr=lr_at(step + 1, cfg.lr, cfg.warmup_steps))
        if not ok:
            consecutive += 1
            skipped += 1
            if consecutive > cfg.max_skips:
                raise RuntimeError(f"{consecutive} consecutive non-finite steps")
            continue
        consecutive = 0
        step += 1
        ema.update(rev.state_dict())
        if step % cfg.log_every == 0 or step == cfg.steps:
            row = {"step": step, "loss_total": float(loss.data)}
            for i in range(b):
                row[f"loss_align_{i}"] = float(terms[f"align_{i}"].data.mean()) if f"align_{i}" in terms else 0.0
            row["loss_recon"] = float(terms["recon"].data.mean())
            row["w_mean"] = float(w.mean())
            row["wd_mean"] = float(wd.mean())
            row["recon_mse_eval"] = (reconstruct_mse(fwd, rev, *eval_data, eval_rng.split())
                                     if eval_data is not None else float("nan"))
            log.append(row)
    for p in fwd.parameters():
        assert p.grad is None, "forward model received a gradient"
    assert _fingerprint(fwd) == frozen, "forward model parameters changed during reverse training"
    if log_path is not None:
        write_csv(log_path, log)
    return ReverseResult(rev, ema, log, stats, step, skipped)

