"""Command line entry point: ``save-avs <subcommand> ...``.

Exit codes: 0 success, 1 invalid input, 2 runtime failure. Errors are printed
to stderr as one JSON line ``{"error": <code>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ConfigError, ModelConfig, TrainConfig
from .data import AVSDataset, SyntheticSpec, generate_synthetic
from .model import build_model
from .trainer import (MetricsLog, evaluate, gradient_check, load_checkpoint,
                      perturb_trainable_, predict_probs, train)
from .validation import DataError

logger = logging.getLogger("save_avs")

PRED_COLOR = (255, 40, 40)
GT_COLOR = (40, 255, 40)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> ModelConfig:
    config = ModelConfig.from_json(args.config) if args.config else ModelConfig()
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    return config


def _split_dir(data: Path, split: str) -> Path:
    return data / split if (data / split / "manifest.json").exists() else data


# -- subcommands ------------------------------------------------------------

def cmd_generate(args):
    spec = SyntheticSpec(num_videos=args.num_videos, frames_per_video=args.frames_per_video,
                         num_classes=args.num_classes, canvas=args.canvas,
                         objects_per_frame=args.objects_per_frame, noise_sigma=args.noise_sigma,
                         seed=args.seed or 0, audio_dim=args.audio_dim,
                         val_fraction=args.val_fraction)
    manifests = generate_synthetic(spec, args.out)
    for split, m in manifests.items():
        print(f"{split}: {len(m.samples)} samples -> {Path(args.out) / split}")


def cmd_train(args):
    config = _load_config(args)
    data = Path(args.data)
    train_set = AVSDataset.from_manifest(data / "train", config.input_resolution)
    val_set = AVSDataset.from_manifest(data / "val", config.input_resolution)
    if args.ablate_audio is not None:
        const = torch.full((config.audio_dim,), args.ablate_audio)
        train_set, val_set = train_set.with_audio(const), val_set.with_audio(const)
    tc = TrainConfig(epochs=args.epochs, base_lr=args.lr, batch_size=args.batch_size,
                     weight_decay=args.weight_decay, seed=config.seed,
                     eval_every=args.eval_every, checkpoint_dir=args.out,
                     clip_grad_norm=args.clip_grad_norm)
    _, log, _ = train(build_model(config), train_set, val_set, tc)
    last = log.rows[-1]
    print(f"final epoch {last['epoch']}: val mIoU {last['val_miou']:.4f} "
          f"F {last['val_fscore']:.4f}; checkpoints in {args.out}")


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    ds = AVSDataset.from_manifest(_split_dir(Path(args.data), "val"),
                                  model.config.input_resolution)
    result = evaluate(model, ds, per_category=True)
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)


def _boundary(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, mode="edge")
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def render_overlay(frame: np.ndarray, pred: np.ndarray, gt: np.ndarray | None) -> np.ndarray:
    out = frame.copy()
    if gt is not None:
        out[_boundary(gt)] = GT_COLOR
    out[_boundary(pred)] = PRED_COLOR
    return out


def cmd_predict(args):
    model = load_checkpoint(args.checkpoint)
    root = _split_dir(Path(args.data), "val")
    ds = AVSDataset.from_manifest(root, model.config.input_resolution)
    out = Path(args.out)
    for sub in ("masks", "overlays", "panels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    probs = predict_probs(model, ds, original_size=True)
    for rec, prob in zip(ds.records, probs):
        stem = Path(rec.image_path).stem
        pred = prob >= args.threshold
        frame = np.asarray(Image.open(root / rec.image_path).convert("RGB"))
        gt = np.asarray(Image.open(root / rec.mask_path)) > 0
        Image.fromarray(pred.astype(np.uint8) * 255).save(out / "masks" / f"{stem}.png")
        Image.fromarray(render_overlay(frame, pred, gt)).save(out / "overlays" / f"{stem}.png")
        gt_rgb = np.repeat(gt[..., None].astype(np.uint8) * 255, 3, axis=2)
        pred_rgb = np.repeat(pred[..., None].astype(np.uint8) * 255, 3, axis=2)
        panel = np.concatenate([frame, gt_rgb, pred_rgb], axis=1)
        Image.fromarray(panel).save(out / "panels" / f"{stem}.png")
    print(f"wrote {len(probs)} predictions to {out}")


def cmd_gradcheck(args):
    if args.config:
        config = _load_config(args)
    else:
        config = ModelConfig(embed_dim=8, num_blocks=2, num_heads=2, patch_size=4,
                             input_resolution=16, prompt_dim=8, audio_dim=6,
                             seed=args.seed or 0)
    model = build_model(config).double()
    perturb_trainable_(model, seed=config.seed)
    g = torch.Generator().manual_seed(config.seed)
    r = config.input_resolution
    sample = (torch.rand(3, r, r, generator=g, dtype=torch.float64),
              torch.randn(config.audio_dim, generator=g, dtype=torch.float64),
              (torch.rand(r, r, generator=g) > 0.5).double())
    report = gradient_check(model, sample, epsilon=args.epsilon, seed=config.seed)
    text = report.format() + f"\n{'PASS' if report.passed(args.tol) else 'FAIL'} (tol {args.tol:g})"
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if not report.passed(args.tol):
        raise RuntimeError(f"gradient check failed: max relative error {report.max_error:.3e}")


def cmd_plot(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = Path(args.metrics) if args.metrics else Path(args.checkpoint) / "metrics.csv"
    log = MetricsLog.from_csv(metrics)
    epochs = [r["epoch"] for r in log.rows]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "save-avs"
    for name, keys, ylabel in (("loss", ["mean_train_loss"], "train loss"),
                               ("miou", ["val_miou", "val_fscore"], "validation score")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for key in keys:
            ax.plot(epochs, [r[key] for r in log.rows], marker="o", label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"{name}.svg", format="svg", metadata={"Date": None})
        plt.close(fig)
    print(f"wrote {out / 'loss.svg'} and {out / 'miou.svg'}")


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="save-avs", description="Audio-visual segmentation with adapters.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, *flags):
        if "config" in flags:
            p.add_argument("--config", help="model config JSON")
        if "data" in flags:
            p.add_argument("--data", required=True, help="dataset directory")
        if "out" in flags:
            p.add_argument("--out", required=True)
        if "out?" in flags:
            p.add_argument("--out")
        if "checkpoint" in flags:
            p.add_argument("--checkpoint", required=True, help="checkpoint directory")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p, "out")
    p.add_argument("--num-videos", type=int, default=200)
    p.add_argument("--frames-per-video", type=int, default=2)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--objects-per-frame", type=int, default=2)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--audio-dim", type=int, default=32)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on <data>/train, validate on <data>/val")
    common(p, "config", "data", "out")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--clip-grad-norm", type=float)
    p.add_argument("--ablate-audio", type=float, metavar="VALUE",
                   help="replace every audio feature with this constant (control run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics JSON for a checkpoint")
    common(p, "data", "checkpoint", "out?")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="mask, overlay and panel PNGs")
    common(p, "data", "checkpoint", "out")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check (float64)")
    common(p, "config", "out?")
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="loss / mIoU curves as SVG")
    common(p, "out")
    p.add_argument("--metrics", help="metrics.csv (default: <checkpoint>/metrics.csv)")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_plot)
    return parser


def _fail(code: str, message: str, status: int) -> int:
    print(json.dumps({"error": code, "message": " ".join(str(message).split())}), file=sys.stderr)
    return status


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "plot" and not (args.metrics or args.checkpoint):
        return _fail("usage", "plot needs --metrics or --checkpoint", 1)
    try:
        args.func(args)
    except ConfigError as exc:
        return _fail("invalid_config", exc, 1)
    except DataError as exc:
        return _fail("invalid_data", exc, 1)
    except (ValueError, FileNotFoundError) as exc:
        return _fail("invalid_input", exc, 1)
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        return _fail("runtime_error", f"{type(exc).__name__}: {exc}", 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
