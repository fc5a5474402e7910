"""Glue between an ExperimentConfig and the library: datasets, models,
training runs, checkpoints and the evaluation routines behind the CLI."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .checkpoint import EMA_PREFIX, Checkpoint
from .config import ExperimentConfig
from .data import Dataset, make_dataset
from .flow import FlowConfig, ForwardModel, ForwardResult, TrainConfig, forward_trajectory, log_prob, train_forward
from .inverse import GuidanceSpec, sample_exact
from .metrics import EvalReport, mmd, normalization_integral, prior_moment_check
from .numerics import Rng
from .reverse import (LossConfig, ReverseConfig, ReverseModel, ReverseResult, ReverseTrainConfig,
                      reconstruct_mse, sample_reverse, train_reverse)

FWD, REV = "fwd/", "rev/"

# independent streams per purpose, derived from the experiment seed
_STREAMS = {"data": 1, "eval_data": 2, "fwd_init": 3, "fwd_train": 4, "rev_init": 5,
            "rev_train": 6, "sample": 7, "eval": 8, "edit": 9}


def stream(cfg: ExperimentConfig, name: str) -> Rng:
    return Rng(cfg.seed * 1000 + _STREAMS[name])


def dtype_of(cfg: ExperimentConfig):
    return np.dtype(cfg.dtype)


def dataset(cfg: ExperimentConfig, n: int | None = None, held_out: bool = False) -> Dataset:
    kw = {"patch": cfg.patch} if cfg.dataset == "tiny_digits" else {}
    rng = stream(cfg, "eval_data" if held_out else "data")
    return make_dataset(cfg.dataset, cfg.data_size if n is None else n, rng, **kw)


def flow_config(cfg: ExperimentConfig, ds: Dataset) -> FlowConfig:
    return FlowConfig(tokens=ds.tokens, token_dim=ds.token_dim, blocks=cfg.blocks, layers=cfg.layers,
                      width=cfg.width, heads=cfg.heads, num_classes=ds.num_classes,
                      class_tokens=cfg.class_tokens, clip=cfg.clip_range, sigma=cfg.sigma)


def reverse_config(cfg: ExperimentConfig, ds: Dataset) -> ReverseConfig:
    return ReverseConfig.for_strategy(cfg.strategy, tokens=ds.tokens, token_dim=ds.token_dim,
                                      blocks=cfg.blocks, width=cfg.rev_width, layers=cfg.rev_layers,
                                      heads=cfg.heads, num_classes=ds.num_classes,
                                      class_tokens=cfg.class_tokens, denoise=cfg.denoise_block,
                                      proj_heads=cfg.proj_heads and cfg.strategy == "hidden_align")


def new_forward(cfg: ExperimentConfig, ds: Dataset) -> ForwardModel:
    return ForwardModel(flow_config(cfg, ds), stream(cfg, "fwd_init"), dtype_of(cfg))


def new_reverse(cfg: ExperimentConfig, ds: Dataset) -> ReverseModel:
    return ReverseModel(reverse_config(cfg, ds), stream(cfg, "rev_init"), dtype_of(cfg))


def run_forward(cfg: ExperimentConfig, ds: Dataset | None = None,
                log_path: str | None = None) -> ForwardResult:
    ds = dataset(cfg) if ds is None else ds
    tc = TrainConfig(epochs=cfg.epochs, batch=cfg.batch, lr=cfg.lr, warmup_steps=cfg.warmup_steps,
                     ema_decay=cfg.ema_decay, label_drop=cfg.label_drop)
    return train_forward(ds.samples, ds.labels, new_forward(cfg, ds), tc, stream(cfg, "fwd_train"), log_path)


def run_reverse(cfg: ExperimentConfig, fwd: ForwardModel, ds: Dataset | None = None,
                log_path: str | None = None, eval_size: int = 1024) -> ReverseResult:
    ds = dataset(cfg) if ds is None else ds
    ev = dataset(cfg, eval_size, held_out=True)
    lc = LossConfig(strategy=cfg.strategy, metric=cfg.metric, p=cfg.p, c_hat=cfg.c_hat,
                    trajectory_norm=cfg.trajectory_norm)
    tc = ReverseTrainConfig(steps=cfg.rev_steps, batch=cfg.rev_batch, lr=cfg.rev_lr,
                            warmup_steps=min(cfg.warmup_steps, cfg.rev_steps), ema_decay=cfg.rev_ema_decay,
                            label_drop=cfg.label_drop, w_max=cfg.w_max, wd_max=cfg.wd_max,
                            log_every=max(1, cfg.rev_steps // 10))
    return train_reverse(ds.samples, ds.labels, fwd, new_reverse(cfg, ds), lc, tc,
                         stream(cfg, "rev_train"), eval_data=(ev.samples, ev.labels), log_path=log_path)


# -- checkpoints ---------------------------------------------------------------------

def _prefixed(prefix: str, state: dict) -> dict:
    return {prefix + k: np.array(v, copy=True) for k, v in state.items()}


def to_checkpoint(cfg: ExperimentConfig, forward: ForwardResult | ForwardModel | None = None,
                  reverse: ReverseResult | ReverseModel | None = None, rng: Rng | None = None,
                  step: int = 0) -> Checkpoint:
    arrays = {}
    for prefix, item in ((FWD, forward), (REV, reverse)):
        if item is None:
            continue
        model = getattr(item, "model", item)
        arrays.update(_prefixed(prefix, model.state_dict()))
        if hasattr(item, "ema"):
            arrays.update(_prefixed(EMA_PREFIX + prefix, item.ema.shadow))
    return Checkpoint(cfg.to_dict(), arrays, rng.get_state() if rng is not None else None, step)


def config_of(ckpt: Checkpoint) -> ExperimentConfig:
    return ExperimentConfig.from_dict(ckpt.config)


def _state(ckpt: Checkpoint, prefix: str, ema: bool) -> dict:
    state = ckpt.ema(prefix) if ema else {}
    return state or ckpt.params(prefix)


def forward_from(ckpt: Checkpoint, ema: bool = True, dtype=None) -> ForwardModel:
    """Rebuild the forward model stored in a checkpoint (EMA weights when present)."""
    cfg = config_of(ckpt)
    state = _state(ckpt, FWD, ema)
    if not state:
        raise ValueError("checkpoint holds no forward model")
    ds = dataset(cfg, n=1)
    model = ForwardModel(flow_config(cfg, ds), Rng(0), dtype or next(iter(state.values())).dtype)
    model.load_state_dict(state)
    return model


def reverse_from(ckpt: Checkpoint, ema: bool = True, dtype=None) -> ReverseModel:
    cfg = config_of(ckpt)
    state = _state(ckpt, REV, ema)
    if not state:
        raise ValueError("checkpoint holds no reverse model")
    ds = dataset(cfg, n=1)
    model = ReverseModel(reverse_config(cfg, ds), Rng(0), dtype or next(iter(state.values())).dtype)
    model.load_state_dict(state)
    return model


# -- evaluation ----------------------------------------------------------------------

def balanced_labels(num_classes: int, n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64) % num_classes


def evaluate(cfg: ExperimentConfig, fwd: ForwardModel, rev: ReverseModel | None,
             n: int = 1000) -> EvalReport:
    """Held-out NLL, sample MMD^2, prior moments, reconstruction MSE, normalisation."""
    ev = dataset(cfg, n, held_out=True)
    rng = stream(cfg, "eval")
    with nx.no_grad():
        nll = -float(np.mean(log_prob(fwd, ev.samples, ev.labels).data)) / fwd.cfg.tokens / fwd.cfg.token_dim
    labels = balanced_labels(ev.num_classes, n)
    if rev is not None:
        xs = sample_reverse(rev, n, labels, rng.split(), w=cfg.cfg_scale, wd=cfg.denoise_scale)
        recon = reconstruct_mse(fwd, rev, ev.samples, ev.labels, rng.split())
    else:
        xs = sample_exact(fwd, n, labels, rng.split(), cfg.guidance(), denoise=cfg.denoise)
        recon = 0.0
    mean_err, cov_err = prior_moment_check(fwd, ev, rng.split())
    integral = normalization_integral(fwd) if ev.tokens * ev.token_dim == 2 else float("nan")
    return EvalReport(nll, mmd(xs.reshape(n, -1), ev.flat()), mean_err, cov_err, recon, integral)


ABLATION_SCALES = (0.25, 0.5, 1.0, 2.0)


def ablate_cfg(cfg: ExperimentConfig, fwd: ForwardModel, n: int = 1000,
               scales=ABLATION_SCALES) -> list[dict]:
    """Schedule x space x mode grid of inference-time guidance for the exact inverse.

    Each cell reports the scale with the lowest sample MMD^2 among ``scales``.
    All cells share the same prior draws.
    """
    ev = dataset(cfg, n, held_out=True)
    labels = balanced_labels(ev.num_classes, n)
    seed = int(stream(cfg, "sample").integers(0, 2 ** 31))
    rows = []
    for schedule in ("linear", "constant"):
        for space in ("parameter", "pixel"):
            for mode in ("online", "offline"):
                best = None
                for w in scales:
                    g = GuidanceSpec(w, schedule, space, mode, cfg.denoise_scale)
                    xs = sample_exact(fwd, n, labels, Rng(seed), g, denoise=cfg.denoise)
                    score = mmd(xs.reshape(n, -1), ev.flat()) if np.all(np.isfinite(xs)) else float("inf")
                    if best is None or score < best[1]:
                        best = (w, score)
                rows.append({"schedule": schedule, "space": space, "mode": mode,
                             "best_scale": best[0], "mmd": best[1]})
    return rows


def state_growth(states: list[np.ndarray]) -> float:
    """Largest ratio of consecutive trajectory-state RMS values."""
    rms = [float(np.sqrt(np.mean(np.square(s, dtype=np.float64)))) for s in states]
    return max(b / a for a, b in zip(rms[:-1], rms[1:]))


def trajectory_growth(fwd: ForwardModel, ds: Dataset, rng: Rng, n: int = 4096) -> float:
    with nx.no_grad():
        traj = forward_trajectory(ds.samples[:n], ds.labels[:n], fwd, rng)
    return state_growth(traj.arrays())
