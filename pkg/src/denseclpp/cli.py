"""Command-line entry point: pretrain, probe, analyze, gradcheck, compare, reconstruct."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import METHODS, ExperimentConfig, apply_overrides, default_config, from_dict, load_config
from .data import load_or_generate, make_batch
from .decoder import KINDS, DecoderConfig, build_decoder, export_reconstructions
from .encoder import ConfigError, Model
from .evaluation import evaluate_probe, similarity_histograms
from .gradcheck_suite import TOLERANCE, run_suite
from .trainer import (
    TrainingDiverged,
    extract_features,
    fit_decoder,
    load_checkpoint,
    pretrain,
    reconstruct,
)

logger = logging.getLogger("denseclpp")

OUT_ENV = "DENSECLPP_OUT"
CACHE_ENV = "DENSECLPP_CACHE"


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------


def _resolve_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif base is not None:
        cfg = base
    else:
        cfg = default_config()
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"train.seed={args.seed}", f"eval.seed={args.seed}"]
    return apply_overrides(cfg, overrides) if overrides else cfg


def _out_dir(args, cfg: ExperimentConfig | None, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg is not None and cfg.out_dir:
        out = Path(cfg.out_dir)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / command
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, cfg: ExperimentConfig, command: str, **extra) -> None:
    (out / "config.json").write_text(cfg.to_json() + "\n")
    run = {"command": command, **extra}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")


def _dataset(cfg: ExperimentConfig):
    return load_or_generate(cfg.data, os.environ.get(CACHE_ENV) or None)


def _model_for(args, cfg_from_args: bool) -> tuple[Model, ExperimentConfig, str | None]:
    """Model plus the config it should be evaluated with."""
    if args.random_init:
        cfg = _resolve_config(args)
        return Model(cfg.encoder, seed=cfg.train.seed), cfg, None
    if not args.checkpoint:
        raise UsageError("either --checkpoint or --random-init is required")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    if cfg_from_args:
        cfg = _resolve_config(args)
    else:
        _, meta = load_checkpoint(ckpt)
        cfg = _resolve_config(args, from_dict(meta["config"]))
    model, _ = load_checkpoint(ckpt, cfg.encoder)
    return model, cfg, str(ckpt)


def write_metrics_csv(path: Path, record) -> None:
    header = ["map", "f1", "threshold"] + [f"ap_{k}" for k in range(len(record.per_class_ap))]
    row = [record.map, record.f1, record.threshold] + list(record.per_class_ap)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerow([repr(float(v)) for v in row])


def write_histogram_csv(path: Path, edges: list[float], counts: list[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for i, c in enumerate(counts):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])


def run_probe(model: Model, cfg: ExperimentConfig, images=None, labels=None):
    if images is None:
        images, labels = _dataset(cfg)
    ev = cfg.eval
    feats = extract_features(model, images, ev.aggregation, ev.feature_source)
    return evaluate_probe(
        feats, labels, ev.probe_epochs, ev.probe_lr, ev.probe_weight_decay, ev.threshold, ev.train_fraction, ev.seed
    )


# -- subcommands -----------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, cfg, "pretrain")
    _echo(out, cfg, "pretrain")
    images, _ = _dataset(cfg)
    summary = pretrain(cfg, out, images=images, progress=lambda e, m: print(f"epoch {e}: mean total {m:.4f}"))
    print(f"wrote {out / 'checkpoint.npz'} and {out / 'metrics.csv'} ({summary['steps']} steps)")
    return 0


def cmd_probe(args) -> int:
    model, cfg, ckpt = _model_for(args, bool(args.config))
    out = _out_dir(args, None, "probe")
    _echo(out, cfg, "probe", checkpoint=ckpt, random_init=bool(args.random_init))
    record = run_probe(model, cfg)
    (out / "metrics.json").write_text(json.dumps(record.as_dict(), indent=2, sort_keys=True) + "\n")
    write_metrics_csv(out / "metrics.csv", record)
    print(f"mAP {record.map:.4f}  F1 {record.f1:.4f}  (excluded classes: {record.excluded_classes})")
    return 0


def analysis_views(cfg: ExperimentConfig, images: np.ndarray) -> np.ndarray:
    n = min(cfg.eval.histogram_images, len(images))
    rng = np.random.default_rng([cfg.eval.seed, 13])
    return make_batch(images, n, cfg.augment, rng, indices=np.arange(n)).views


def cmd_analyze(args) -> int:
    model, cfg, ckpt = _model_for(args, bool(args.config))
    out = _out_dir(args, None, "analyze")
    _echo(out, cfg, "analyze", checkpoint=ckpt, random_init=bool(args.random_init))
    images, _ = _dataset(cfg)
    views = analysis_views(cfg, images)
    with ad.no_grad():
        dense, _ = model.encoder(views)
        feats = dense.features
        if cfg.train.pairing.pair_feature == "proj_head":
            feats = model.dense_head(feats)
    flat = feats.data.reshape(len(views), -1, feats.shape[-1])
    hist = similarity_histograms(flat[0::2], flat[1::2], cfg.eval.histogram_bins)
    write_histogram_csv(out / "intra.csv", hist["bin_edges"], hist["intra_counts"])
    write_histogram_csv(out / "inter.csv", hist["bin_edges"], hist["inter_counts"])
    print(f"wrote {out / 'intra.csv'} and {out / 'inter.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    results, seconds = run_suite(seeds=args.seeds, coords=args.coords, only=args.only)
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:34s} worst={r.worst:.3e} seeds={r.seeds}" + (f"  {r.error}" if r.error else ""))
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} cases below {TOLERANCE:g} in {seconds:.1f}s")
    return 1 if failed else 0


COMPARISON_FIELDS = ("method", "seed", "first_epoch_loss", "final_epoch_loss", "map", "f1")


def run_comparison(cfg: ExperimentConfig, out: Path, seeds: list[int], methods=METHODS, guided_m: int = 16) -> list[dict]:
    """Pretrain and probe every method under the same budget, plus a random-init baseline."""
    images, labels = _dataset(cfg)
    rows = []
    for seed in seeds:
        base = apply_overrides(cfg, [f"train.seed={seed}", f"eval.seed={seed}"])
        record = run_probe(Model(base.encoder, seed=seed), base, images, labels)
        rows.append(dict(method="random_init", seed=seed, first_epoch_loss="", final_epoch_loss="",
                         map=record.map, f1=record.f1))
        for method in methods:
            over = [f"train.method={json.dumps(method)}"]
            if method == "denseclpp_guided" and base.train.pairing.M == 1:
                over.append(f"train.pairing.M={guided_m}")
            run_cfg = apply_overrides(base, over)
            run_dir = out / method / f"seed{seed}"
            summary = pretrain(run_cfg, run_dir, images=images)
            record = run_probe(summary["state"].model, run_cfg, images, labels)
            losses = summary["epoch_mean_total"]
            rows.append(dict(method=method, seed=seed, first_epoch_loss=losses[0], final_epoch_loss=losses[-1],
                             map=record.map, f1=record.f1))
            logger.info("%s seed %d: mAP %.4f", method, seed, record.map)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, COMPARISON_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return rows


def cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args, None, "compare")
    _echo(out, cfg, "compare", seeds=args.seeds, guided_m=args.guided_m)
    rows = run_comparison(cfg, out, args.seeds, guided_m=args.guided_m)
    for row in rows:
        print(f"{row['method']:18s} seed={row['seed']} mAP={row['map']:.4f} F1={row['f1']:.4f}")
    return 0


def cmd_reconstruct(args) -> int:
    model, cfg, ckpt = _model_for(args, bool(args.config))
    out = _out_dir(args, None, "reconstruct")
    dec_cfg = cfg.train.decoder if cfg.train.decoder is not None else DecoderConfig()
    if args.kind:
        dec_cfg = DecoderConfig(**{**vars(dec_cfg), "kind": args.kind})
    _echo(out, cfg, "reconstruct", checkpoint=ckpt, random_init=bool(args.random_init),
          decoder=vars(dec_cfg), steps=args.steps, images=args.images)
    images, _ = _dataset(cfg)
    subset = images[: args.images]
    enc = cfg.encoder
    decoder = build_decoder(dec_cfg, enc.proj_out, enc.grid, enc.image_size, enc.channels, seed=cfg.train.seed + 1)
    history = fit_decoder(model, decoder, subset, steps=args.steps, lr=args.lr)
    with open(out / "recon_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "recon_loss"])
        w.writerows([i, repr(v)] for i, v in enumerate(history))
    values = export_reconstructions(out, subset, reconstruct(model, decoder, subset))
    print(f"final recon loss {history[-1]:.4f}; mean PSNR {np.mean(values):.2f} dB")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denseclpp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="JSON config file (default: bundled default config)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command> or runs/<command>)")
        p.add_argument("--seed", type=int, help="override train.seed and eval.seed")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. train.epochs=5")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint.npz written by pretrain")
            p.add_argument("--random-init", action="store_true", help="use a freshly initialised encoder")

    common(sub.add_parser("pretrain", help="self-supervised pretraining"))
    common(sub.add_parser("probe", help="linear-probe multi-label evaluation"), checkpoint=True)
    common(sub.add_parser("analyze", help="dense similarity histograms"), checkpoint=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator, loss and module")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--coords", type=int, default=12, help="sampled coordinates per tensor")
    p.add_argument("--only", help="run only cases whose name contains this string")

    p = sub.add_parser("compare", help="train and probe every method under one budget")
    common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--guided-m", type=int, default=16, help="candidate sets for the guided method when M=1")

    p = sub.add_parser("reconstruct", help="fit a decoder on frozen features and export reconstructions")
    common(p, checkpoint=True)
    p.add_argument("--kind", choices=KINDS)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--images", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-3)
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
    "reconstruct": cmd_reconstruct,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, FileNotFoundError, ValueError, TrainingDiverged) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2 if isinstance(err, UsageError) else 1


if __name__ == "__main__":
    sys.exit(main())
