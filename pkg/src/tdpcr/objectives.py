"""Reconstruction / segmentation losses and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError, ShapeError

IGNORE_INDEX = 255
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_TABLE_CAP = 100.0


@dataclass
class LossWeights:
    lambda_ssim: float = 0.1
    lambda_rec: float = 1.0
    lambda_seg: float = 1.0
    label_smoothing: float = 0.1

    def __post_init__(self):
        if min(self.lambda_ssim, self.lambda_rec, self.lambda_seg) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


def _check_same(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float32) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return (g / g.sum()).to(dtype)


def effective_window(h: int, w: int, size: int = SSIM_WINDOW) -> int:
    """Largest odd window no bigger than ``size`` that fits inside an h x w image."""
    size = min(size, h, w)
    return size if size % 2 else size - 1


def ssim_map(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0, win_size: int = SSIM_WINDOW) -> torch.Tensor:
    """Per-band SSIM map over the valid (unpadded) interior, shape (B, C, H-w+1, W-w+1).

    Images smaller than the window use the largest odd window that fits.
    """
    _check_same(x, y)
    if x.ndim != 4:
        raise ShapeError(f"expected (B,C,H,W), got {tuple(x.shape)}")
    c = x.shape[1]
    size = effective_window(x.shape[-2], x.shape[-1], win_size)
    if size < 1:
        raise ShapeError("image too small for SSIM")
    g = gaussian_window(size, SSIM_SIGMA, x.dtype).to(x.device)
    kh = g.view(1, 1, size, 1).expand(c, 1, size, 1)
    kw = g.view(1, 1, 1, size).expand(c, 1, 1, size)

    def blur(t):
        return F.conv2d(F.conv2d(t, kh, groups=c), kw, groups=c)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x**2
    syy = blur(y * y) - mu_y**2
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM over bands and batch (differentiable)."""
    return ssim_map(x, y, data_range).mean()


def rec_loss(restored: torch.Tensor, target: torch.Tensor, w: LossWeights | None = None) -> torch.Tensor:
    """L1 + lambda_ssim * (1 - SSIM)."""
    w = w or LossWeights()
    _check_same(restored, target)
    loss = (restored - target).abs().mean()
    if w.lambda_ssim:
        loss = loss + w.lambda_ssim * (1 - ssim(restored, target))
    return loss


def check_labels(labels: torch.Tensor, num_classes: int):
    valid = labels != IGNORE_INDEX
    if valid.any():
        v = labels[valid]
        if int(v.min()) < 0 or int(v.max()) >= num_classes:
            raise DataError(f"labels must lie in [0, {num_classes - 1}] or equal {IGNORE_INDEX}")


def seg_loss(logits: torch.Tensor, labels: torch.Tensor, w: LossWeights | None = None) -> torch.Tensor:
    """Label-smoothed pixel-wise cross-entropy.

    Target puts 1 - eps on the true class and eps / (K - 1) on each other
    class; pixels labelled 255 are ignored.
    """
    w = w or LossWeights()
    if logits.ndim != 4 or labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    k = logits.shape[1]
    labels = labels.long()
    check_labels(labels, k)
    valid = labels != IGNORE_INDEX
    if not valid.any():
        return logits.sum() * 0.0
    logp = F.log_softmax(logits, dim=1)
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    true_lp = logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    eps = w.label_smoothing
    if eps > 0 and k > 1:
        other = logp.sum(1) - true_lp
        per_pixel = -((1 - eps) * true_lp + eps / (k - 1) * other)
    else:
        per_pixel = -true_lp
    return per_pixel[valid].mean()


def joint_loss(restored, target, logits, labels, w: LossWeights | None = None) -> torch.Tensor:
    w = w or LossWeights()
    return w.lambda_rec * rec_loss(restored, target, w) + w.lambda_seg * seg_loss(logits, labels, w)


# ---------------------------------------------------------------- metrics


def psnr(restored: torch.Tensor, target: torch.Tensor, data_range: float = 1.0) -> float:
    """PSNR in dB over all bands; ``inf`` when the images are identical."""
    _check_same(restored, target)
    mse = float(((restored.double() - target.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def ssim_metric(restored: torch.Tensor, target: torch.Tensor, data_range: float = 1.0) -> float:
    with torch.no_grad():
        return float(ssim(restored.double(), target.double(), data_range))


def confusion_matrix(pred, target, num_classes: int) -> np.ndarray:
    """K x K counts, rows = truth, columns = prediction; ignore-labelled pixels dropped."""
    pred = np.asarray(pred.cpu() if isinstance(pred, torch.Tensor) else pred).astype(np.int64).ravel()
    target = np.asarray(target.cpu() if isinstance(target, torch.Tensor) else target).astype(np.int64).ravel()
    if pred.shape != target.shape:
        raise ShapeError("prediction and truth sizes differ")
    keep = target != IGNORE_INDEX
    pred, target = pred[keep], target[keep]
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise DataError("truth labels out of range")
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise DataError("predicted labels out of range")
    return np.bincount(target * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


@dataclass
class SegScores:
    pa: float
    miou: float
    iou: np.ndarray  # per class, nan where the class is absent from truth and prediction


def scores_from_confusion(cm: np.ndarray) -> SegScores:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    iou = np.full(len(cm), np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    pa = float(tp.sum() / total) if total else float("nan")
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return SegScores(pa, miou, iou)


def seg_metrics(pred, target, num_classes: int) -> SegScores:
    """Pixel accuracy, mIoU and per-class IoU of a label prediction (argmax already applied)."""
    return scores_from_confusion(confusion_matrix(pred, target, num_classes))


class ConfusionAccumulator:
    """Accumulates a confusion matrix over an evaluation set."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.cm = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, target):
        self.cm += confusion_matrix(pred, target, self.num_classes)

    def scores(self) -> SegScores:
        return scores_from_confusion(self.cm)


def table_psnr(value: float) -> float:
    return min(value, PSNR_TABLE_CAP)


def write_metric_records(path: str | Path, records: list[tuple[str, float, int]]):
    """One record per line: ``name<TAB>value<TAB>count``."""
    with open(path, "w") as fh:
        for name, value, count in records:
            fh.write(f"{name}\t{value!r}\t{int(count)}\n")


def read_metric_records(path: str | Path) -> dict[str, tuple[float, int]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        name, value, count = line.split("\t")
        out[name] = (float(value), int(count))
    return out
