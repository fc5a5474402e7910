"""Command line entry point: ``biflow <subcommand> [options]``.

Every subcommand reads an experiment config (``--config`` file plus
``--set key=value`` overrides), derives all randomness from the seed
(``--seed`` > ``BIFLOW_SEED`` > config) and writes CSV to ``--out`` or stdout.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys

import numpy as np

from . import experiments as ex
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import FIELD_TYPES, ConfigError, ExperimentConfig, coerce_value, load_config
from .editing import DEFAULT_W, DEFAULT_WD, Mask, class_edit, inpaint
from .inverse import GuidanceSpec, sample_exact
from .metrics import benchmark_sampling
from .reverse import sample_reverse

FORWARD_KEYS = ("dataset", "patch", "dtype", "blocks", "layers", "width", "heads", "class_tokens",
                "clip_range", "sigma")


# -- config assembly -----------------------------------------------------------------

def _overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        key = key.strip()
        if not sep or key not in FIELD_TYPES:
            raise ConfigError(f"bad override {pair!r}: expected known key=value")
        out[key] = coerce_value(key, raw.strip())
    return out


def _seed(args, cfg_seed: int) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("BIFLOW_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"BIFLOW_SEED must be an integer, got {env!r}") from None
    return cfg_seed


def build_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    if args.config is not None or base is None:
        cfg = load_config(args.config)
    else:
        cfg = base
    cfg = cfg.replace(**_overrides(args.set))
    return cfg.replace(seed=_seed(args, cfg.seed))


def _checkpoint(path: str | None):
    return load_checkpoint(path) if path else None


def _models(args, need_reverse: bool):
    """(config, forward, reverse) from --checkpoint, or untrained models from the config."""
    ckpt = _checkpoint(args.checkpoint)
    cfg = build_config(args, ex.config_of(ckpt) if ckpt else None)
    ds = ex.dataset(cfg, n=1)
    if ckpt is None:
        return cfg, ex.new_forward(cfg, ds), ex.new_reverse(cfg, ds) if need_reverse else None
    fwd = ex.forward_from(ckpt)
    rev = ex.reverse_from(ckpt) if need_reverse else None
    return cfg, fwd, rev


# -- CSV output ----------------------------------------------------------------------

def _emit(args, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(len(x), int(np.prod(x.shape[1:])))


def _sample_rows(labels: np.ndarray, xs: np.ndarray) -> tuple[list[str], list[list]]:
    flat = _flat(xs)
    header = ["label"] + [f"x_{j}" for j in range(flat.shape[1])]
    return header, [[int(l), *row] for l, row in zip(labels, flat)]


def _labels(spec: str, model, n: int) -> np.ndarray:
    """'all' cycles through the classes, 'none' is unconditional, else one class id."""
    if spec == "all":
        return ex.balanced_labels(model.cfg.num_classes, n)
    if spec == "none":
        return model.labels(None, n)
    return model.labels(int(spec), n)


def _guidance(args, cfg: ExperimentConfig) -> GuidanceSpec:
    return GuidanceSpec(cfg.cfg_scale if args.cfg_scale is None else args.cfg_scale,
                        args.cfg_schedule or cfg.cfg_schedule, args.cfg_space or cfg.cfg_space,
                        args.cfg_mode or cfg.cfg_mode,
                        cfg.denoise_scale if args.denoise_scale is None else args.denoise_scale)


# -- subcommands ---------------------------------------------------------------------

def cmd_train_forward(args) -> int:
    cfg = build_config(args)
    ds = ex.dataset(cfg)
    res = ex.run_forward(cfg, ds, log_path=args.log)
    save_checkpoint(ex.to_checkpoint(cfg, forward=res, rng=ex.stream(cfg, "fwd_train"), step=res.steps), args.out)
    print(f"trained forward flow: {res.steps} steps, final nll {res.log[-1]['nll']:.4f}", file=sys.stderr)
    return 0


def cmd_train_reverse(args) -> int:
    ckpt = load_checkpoint(args.forward)
    fwd_cfg = ex.config_of(ckpt)
    cfg = build_config(args, fwd_cfg)
    clash = [k for k in FORWARD_KEYS if getattr(cfg, k) != getattr(fwd_cfg, k)]
    if clash:
        raise ConfigError(f"config disagrees with the forward checkpoint on: {', '.join(clash)}")
    fwd = ex.forward_from(ckpt)
    res = ex.run_reverse(cfg, fwd, log_path=args.log)
    out = ex.to_checkpoint(cfg, forward=fwd, reverse=res, rng=ex.stream(cfg, "rev_train"), step=res.steps)
    save_checkpoint(out, args.out)
    print(f"trained reverse model: {res.steps} steps, final recon {res.log[-1]['recon_mse_eval']:.4f}",
          file=sys.stderr)
    return 0


def cmd_sample(args) -> int:
    cfg, fwd, rev = _models(args, need_reverse=True)
    labels = _labels(args.label, rev, args.n)
    w = DEFAULT_W if args.w is None else args.w
    wd = DEFAULT_WD if args.wd is None else args.wd
    xs = sample_reverse(rev, args.n, labels, ex.stream(cfg, "sample"), w=w, wd=wd)
    _emit(args, *_sample_rows(labels, xs))
    return 0


def cmd_invert(args) -> int:
    cfg, fwd, _ = _models(args, need_reverse=False)
    labels = _labels(args.label, fwd, args.n)
    g = _guidance(args, cfg)
    xs = sample_exact(fwd, args.n, labels, ex.stream(cfg, "sample"), g, denoise=args.denoise or cfg.denoise)
    _emit(args, *_sample_rows(labels, xs))
    return 0


def cmd_eval(args) -> int:
    cfg, fwd, rev = _models(args, need_reverse=args.sampler == "reverse")
    rep = ex.evaluate(cfg, fwd, rev, n=args.n)
    _emit(args, ["nll", "mmd", "mean_err", "cov_err", "recon_mse", "norm_integral"],
          [[rep.nll, rep.mmd, rep.mean_err, rep.cov_err, rep.recon_mse, rep.norm_integral]])
    return 0


def cmd_benchmark(args) -> int:
    cfg, fwd, rev = _models(args, need_reverse=True)
    w = 1.0 if args.w is None else args.w
    wd = 0.0 if args.wd is None else args.wd
    rep = benchmark_sampling(fwd, rev, args.n, args.batch, label=0, w=w, wd=wd, seed=cfg.seed)
    _emit(args, ["sampler", "nfe_blocks", "ms_per_sample", "speedup"],
          [[r.sampler, r.nfe_blocks, r.ms_per_sample, r.speedup] for r in rep.rows])
    return 0


def cmd_edit(args) -> int:
    cfg, fwd, rev = _models(args, need_reverse=True)
    ev = ex.dataset(cfg, args.n, held_out=True)
    x = ev.samples.astype(fwd.dtype)
    w = DEFAULT_W if args.w is None else args.w
    wd = DEFAULT_WD if args.wd is None else args.wd
    if args.kind == "inpaint":
        mask = Mask.parse(args.mask_spec, ev.tokens, ev.token_dim)
        out = inpaint(x, mask, ev.labels, fwd, rev, ex.stream(cfg, "edit"), w, wd)
        labels = ev.labels
    else:
        keep = ev.labels == args.from_label
        x = x[keep]
        out = class_edit(x, args.from_label, args.to_label, fwd, rev, w, wd)
        labels = np.full(len(x), args.to_label)
    before, after = _flat(x), _flat(out)
    d = before.shape[1]
    header = ["label"] + [f"before_{j}" for j in range(d)] + [f"after_{j}" for j in range(d)]
    _emit(args, header, [[int(l), *b, *a] for l, b, a in zip(labels, before, after)])
    return 0


def cmd_ablate_cfg(args) -> int:
    cfg, fwd, _ = _models(args, need_reverse=False)
    scales = [float(s) for s in args.scales.split(",")]
    rows = ex.ablate_cfg(cfg, fwd, n=args.n, scales=scales)
    _emit(args, ["schedule", "space", "mode", "best_scale", "mmd"],
          [[r["schedule"], r["space"], r["mode"], r["best_scale"], r["mmd"]] for r in rows])
    return 0


# -- parser --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="overrides BIFLOW_SEED and the config seed")
    p.add_argument("--out", help="output path (CSV, or checkpoint for train-*); default stdout")


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="checkpoint to load; untrained models when omitted")


def _cfg_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--cfg-schedule", choices=["linear", "const"])
    p.add_argument("--cfg-space", choices=["param", "pixel"])
    p.add_argument("--cfg-mode", choices=["online", "offline"])
    p.add_argument("--denoise", choices=["score", "none"])
    p.add_argument("--denoise-scale", type=float)


def _scale_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--w", type=float, help="reverse-model guidance scale")
    p.add_argument("--wd", type=float, help="denoise-block guidance scale")


def _nonneg(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="biflow",
        description="Train, sample, evaluate and edit with an autoregressive flow and its learned reverse model.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train-forward", help="train the forward flow by maximum likelihood")
    _common(p)
    p.add_argument("--log", help="per-epoch metric CSV")
    p.set_defaults(func=cmd_train_forward)

    p = sub.add_parser("train-reverse", help="train the reverse model against a frozen flow")
    _common(p)
    p.add_argument("--forward", required=True, help="forward-flow checkpoint")
    p.add_argument("--log", help="metric CSV")
    p.set_defaults(func=cmd_train_reverse)

    p = sub.add_parser("sample", help="1-NFE sampling with the reverse model")
    _common(p)
    _model_args(p)
    _scale_flags(p)
    p.add_argument("--n", type=_nonneg, default=1000)
    p.add_argument("--label", default="all", help="class id, 'all' (balanced) or 'none'")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("invert", help="sample through the exact sequential inverse")
    _common(p)
    _model_args(p)
    _cfg_flags(p)
    p.add_argument("--n", type=_nonneg, default=1000)
    p.add_argument("--label", default="all")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("eval", help="held-out metrics")
    _common(p)
    _model_args(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--sampler", choices=["reverse", "exact"], default="reverse")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("benchmark", help="sequential inverse vs 1-NFE wall clock")
    _common(p)
    _model_args(p)
    _scale_flags(p)
    p.add_argument("--n", type=_nonneg, default=256)
    p.add_argument("--batch", type=int, default=64)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("edit", help="training-free inpainting and class editing")
    esub = p.add_subparsers(dest="kind", required=True, metavar="kind")
    for kind in ("inpaint", "class"):
        q = esub.add_parser(kind)
        _common(q)
        _model_args(q)
        _scale_flags(q)
        q.add_argument("--n", type=int, default=256, help="held-out samples to edit")
        if kind == "inpaint":
            q.add_argument("--mask-spec", required=True, help="kept tokens, e.g. '0' or '0-3,8'")
        else:
            q.add_argument("--from", dest="from_label", type=int, required=True)
            q.add_argument("--to", dest="to_label", type=int, required=True)
        q.set_defaults(func=cmd_edit)

    p = sub.add_parser("ablate-cfg", help="schedule x space x mode guidance grid (8 rows)")
    _common(p)
    _model_args(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--scales", default=",".join(str(s) for s in ex.ABLATION_SCALES))
    p.set_defaults(func=cmd_ablate_cfg)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, FileNotFoundError) as e:
        print(f"biflow {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
