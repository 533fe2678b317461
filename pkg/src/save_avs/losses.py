"""Segmentation objectives and the M_J / M_F evaluation metrics."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .validation import check_binary_mask, check_same_shape

IOU_EPS = 1e-6


def bce_loss(pred_logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy, computed in the logit domain."""
    check_same_shape(pred_logits, gt)
    check_binary_mask(gt)
    return F.binary_cross_entropy_with_logits(pred_logits, gt.to(pred_logits.dtype))


def iou_loss(pred_probs: torch.Tensor, gt: torch.Tensor, eps: float = IOU_EPS) -> torch.Tensor:
    """``1 - soft IoU``. Leading dimensions beyond the last two are averaged."""
    check_same_shape(pred_probs, gt)
    check_binary_mask(gt)
    if pred_probs.numel() and (pred_probs.min() < 0 or pred_probs.max() > 1):
        raise ValueError("pred_probs must lie in [0, 1]")
    gt = gt.to(pred_probs.dtype)
    inter = (pred_probs * gt).sum(dim=(-2, -1))
    union = pred_probs.sum(dim=(-2, -1)) + gt.sum(dim=(-2, -1)) - inter
    return (1 - (inter + eps) / (union + eps)).mean()


def total_loss(pred_logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return bce_loss(pred_logits, gt) + iou_loss(torch.sigmoid(pred_logits), gt)


def _binarize_pairs(pairs, threshold):
    if len(pairs) == 0:
        raise ValueError("metric needs at least one (pred, gt) pair")
    out = []
    for pred, gt in pairs:
        pred, gt = np.asarray(pred), np.asarray(gt)
        check_same_shape(pred, gt)
        check_binary_mask(torch.as_tensor(gt))
        out.append((pred >= threshold, gt.astype(bool)))
    return out


def pair_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """IoU of two boolean masks; two empty masks score 1."""
    inter = np.count_nonzero(pred & gt)
    union = np.count_nonzero(pred | gt)
    return 1.0 if union == 0 else inter / union


def pair_fscore(pred: np.ndarray, gt: np.ndarray, beta_sq: float) -> float:
    tp = np.count_nonzero(pred & gt)
    n_pred, n_gt = np.count_nonzero(pred), np.count_nonzero(gt)
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_gt
    return (1 + beta_sq) * precision * recall / (beta_sq * precision + recall)


def miou(pairs, threshold: float = 0.5) -> float:
    """Mean IoU over ``(pred_probs, gt)`` pairs after thresholding."""
    scores = [pair_iou(p, g) for p, g in _binarize_pairs(pairs, threshold)]
    return float(np.mean(scores))


def fscore(pairs, threshold: float = 0.5, beta_sq: float = 0.3) -> float:
    """Mean F-measure over pairs. ``beta_sq=1`` is the plain harmonic mean (F1)."""
    scores = [pair_fscore(p, g, beta_sq) for p, g in _binarize_pairs(pairs, threshold)]
    return float(np.mean(scores))
