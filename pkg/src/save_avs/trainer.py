"""Training loop, evaluation, checkpoints and the finite-difference harness."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from .data import AVSDataset, batch_order, read_raw_tensor, write_raw_tensor
from .decoder import upscale_to_input
from .losses import fscore, miou, total_loss
from .model import SaveModel, build_model, partition_parameters
from .validation import NonFiniteError

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "mean_train_loss", "val_miou", "val_fscore", "lr")
EVAL_BATCH = 32


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, mean_train_loss, val_miou, val_fscore, lr):
        if self.rows and epoch <= self.rows[-1]["epoch"]:
            raise ValueError("metrics log is append-only, one row per epoch")
        self.rows.append({"epoch": epoch, "mean_train_loss": mean_train_loss,
                          "val_miou": val_miou, "val_fscore": val_fscore, "lr": lr})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for row in self.rows:
                writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRICS_HEADER[1:]])

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != METRICS_HEADER:
                raise ValueError(f"unexpected metrics header {header}")
            for row in reader:
                log.append(int(row[0]), *(float(v) for v in row[1:]))
        return log


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(model: SaveModel, path) -> Path:
    """Config JSON plus one raw tensor file per parameter."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    model.config.to_json(path / "config.json")
    for name, p in model.named_parameters():
        write_raw_tensor(path / "params" / f"{name}.savt", p.detach().cpu().float().numpy())
    return path


def load_checkpoint(path) -> SaveModel:
    path = Path(path)
    model = build_model(ModelConfig.from_json(path / "config.json"))
    with torch.no_grad():
        for name, p in model.named_parameters():
            value = torch.from_numpy(read_raw_tensor(path / "params" / f"{name}.savt"))
            if value.shape != p.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {tuple(value.shape)}, "
                                 f"expected {tuple(p.shape)}")
            p.copy_(value)
    return model


# -- evaluation -------------------------------------------------------------

@torch.no_grad()
def predict_probs(model: SaveModel, dataset: AVSDataset, original_size: bool = False) -> list:
    """Per-sample mask probabilities at network resolution (or original size)."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(dataset), EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        logits = model.predict_logits(dataset.images[sl].to(dtype), dataset.audio[sl].to(dtype))
        for i, lg in enumerate(logits, start=start):
            if original_size:
                prov = dataset.provenance[i]
                lg = upscale_to_input(lg, prov.padded_size, prov.original_size)
            out.append(torch.sigmoid(lg).cpu().numpy())
    model.train(was_training)
    return out


def evaluate(model: SaveModel, dataset: AVSDataset, beta_sq: float | None = None,
             per_category: bool = False) -> dict:
    """mIoU and F-score over a whole dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    beta_sq = model.config.fscore_beta_sq if beta_sq is None else beta_sq
    probs = predict_probs(model, dataset)
    gts = dataset.masks.numpy()
    pairs = list(zip(probs, gts))
    result = {"miou": miou(pairs), "fscore": fscore(pairs, beta_sq=beta_sq)}
    if per_category:
        groups = {}
        for pair, cat in zip(pairs, dataset.categories):
            groups.setdefault(cat, []).append(pair)
        result["per_category"] = {
            cat: {"miou": miou(ps), "fscore": fscore(ps, beta_sq=beta_sq)}
            for cat, ps in sorted(groups.items())}
    return result


# -- training ---------------------------------------------------------------

def train(model: SaveModel, train_set: AVSDataset, val_set: AVSDataset, tc: TrainConfig):
    """AdamW on the trainable partition with per-step cosine decay to zero.

    Returns ``(model, MetricsLog, checkpoints)`` where ``checkpoints`` maps
    ``"last"`` / ``"best"`` to directories (empty without ``checkpoint_dir``).
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    partition = partition_parameters(model)
    partition.apply(model)
    params = partition.trainable_parameters(model)
    optimizer = torch.optim.AdamW(params, lr=tc.base_lr, betas=tuple(tc.betas),
                                  weight_decay=tc.weight_decay)
    steps_per_epoch = math.ceil(len(train_set) / tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch
    ckpt_dir = Path(tc.checkpoint_dir) if tc.checkpoint_dir else None
    checkpoints, best = {}, -1.0
    log = MetricsLog()
    dtype = next(model.parameters()).dtype
    val_metrics = {"miou": float("nan"), "fscore": float("nan")}

    step = 0
    model.train()
    for epoch in range(1, tc.epochs + 1):
        order = batch_order(len(train_set), tc.seed, epoch)
        losses = []
        lr = tc.base_lr
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            images, audio, masks = (t[idx].to(dtype) for t in
                                    (train_set.images, train_set.audio, train_set.masks))
            lr = cosine_lr(step, total_steps, tc.base_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            try:
                loss = total_loss(model.predict_logits(images, audio), masks)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {b}: {exc}") from exc
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if tc.clip_grad_norm:
                torch.nn.utils.clip_grad_norm_(params, tc.clip_grad_norm)
            optimizer.step()
            losses.append(loss.item())
            step += 1

        if epoch % tc.eval_every == 0 or epoch == tc.epochs:
            val_metrics = evaluate(model, val_set)
        log.append(epoch, float(np.mean(losses)), val_metrics["miou"], val_metrics["fscore"], lr)
        logger.info("epoch %d loss %.4f val mIoU %.4f F %.4f", epoch, np.mean(losses),
                    val_metrics["miou"], val_metrics["fscore"])
        if ckpt_dir is not None:
            checkpoints["last"] = save_checkpoint(model, ckpt_dir / "last")
            if val_metrics["miou"] > best:
                best = val_metrics["miou"]
                checkpoints["best"] = save_checkpoint(model, ckpt_dir / "best")
            log.to_csv(ckpt_dir / "metrics.csv")
    return model, log, checkpoints


# -- gradient check ---------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict  # parameter name -> max relative error
    checked: dict  # parameter name -> number of scalar entries checked

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error <= tol

    def format(self) -> str:
        width = max((len(n) for n in self.errors), default=10)
        lines = [f"{name:<{width}}  n={self.checked[name]:<4d} rel_err={err:.3e}"
                 for name, err in self.errors.items()]
        lines.append(f"max relative error: {self.max_error:.3e}")
        return "\n".join(lines)


def perturb_trainable_(model: SaveModel, scale: float = 0.1, seed: int = 0) -> SaveModel:
    """Add seeded Gaussian noise to every trainable tensor.

    Zero-initialized adapter layers otherwise block gradients to everything
    upstream of them, which would make a gradient check vacuous.
    """
    g = torch.Generator().manual_seed(seed)
    partition = partition_parameters(model)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name in partition.trainable:
                p.add_(scale * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
    return model


def sample_loss(model: SaveModel, sample) -> torch.Tensor:
    image, audio, mask = sample
    dtype = next(model.parameters()).dtype
    logits = model.predict_logits(image.unsqueeze(0).to(dtype), audio.unsqueeze(0).to(dtype))
    return total_loss(logits[0], mask.to(dtype))


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-5) -> float:
    """Max abs difference over a tensor, scaled by its largest gradient magnitude.

    The scale never drops below ``floor``: gradients that are zero in exact
    arithmetic (e.g. key biases under softmax) leave only roundoff on both sides.
    """
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), floor)
    return (analytic - numeric).abs().max().item() / scale


def gradient_check(model: SaveModel, sample, epsilon: float = 1e-6, max_per_tensor: int = 200,
                   seed: int = 0, loss_fn=sample_loss, analytic_hook=None) -> GradCheckReport:
    """Compare autograd gradients with central differences on trainable tensors.

    Tensors with more than ``max_per_tensor`` entries are checked on a seeded
    random subset of that size. ``analytic_hook`` may rewrite the analytic
    gradients before comparison (used to test the harness itself).
    """
    if next(model.parameters()).dtype != torch.float64:
        raise ValueError("gradient_check needs a float64 model (call model.double())")
    partition = partition_parameters(model)
    partition.apply(model)
    named = [(n, p) for n, p in model.named_parameters() if n in partition.trainable]

    model.zero_grad(set_to_none=True)
    loss_fn(model, sample).backward()
    analytic = {n: torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
                for n, p in named}
    if analytic_hook is not None:
        analytic = analytic_hook(analytic)

    rng = np.random.default_rng(seed)
    errors, checked = {}, {}
    with torch.no_grad():
        for name, p in named:
            flat = p.view(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= max_per_tensor else np.sort(
                rng.choice(n, size=max_per_tensor, replace=False))
            numeric = torch.empty(len(idx), dtype=torch.float64)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn(model, sample).item()
                flat[i] = orig - epsilon
                down = loss_fn(model, sample).item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * epsilon)
            errors[name] = relative_error(analytic[name].view(-1)[idx], numeric)
            checked[name] = len(idx)
    return GradCheckReport(errors, checked)
