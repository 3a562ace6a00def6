"""Two-phase training: reconstruction pretraining, then task-driven fine-tuning
under a freeze policy (peft / fpft / none)."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, load_into, load_optimizer_state, read_manifest, save_checkpoint
from .data import SceneBank, augment
from .errors import NumericError
from .network import GROUPS, NetworkConfig, TDPCR
from .objectives import (
    ConfusionAccumulator,
    LossWeights,
    joint_loss,
    psnr,
    rec_loss,
    seg_loss,
    ssim_metric,
)
from .rng import substream, substream_seed

log = logging.getLogger(__name__)

FREEZE_POLICIES = ("none", "peft", "fpft")
PEFT_TRAINABLE = ("prompt_generator", "pgf_blocks", "seg_head")


@dataclass
class RunConfig:
    phase: int = 1
    freeze_policy: str = "none"
    branch_mode: str = "both"
    lambda_ssim: float = 0.1
    lambda_rec: float = 1.0
    lambda_seg: float = 1.0
    label_smoothing: float = 0.1
    lr: float = 2e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    steps: int = 5000
    batch_size: int = 8
    crop: int | None = 128
    seed: int = 0
    val_every: int = 100
    val_limit: int | None = None
    log_every: int = 10
    out_dir: str | None = None
    init_checkpoint: str | None = None
    resume: str | None = None
    stop_at: int | None = None

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise ValueError(f"phase must be 1 or 2, got {self.phase}")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"freeze_policy must be one of {FREEZE_POLICIES}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_ssim, self.lambda_rec, self.lambda_seg, self.label_smoothing)


def freeze_manifest(phase: int, policy: str) -> dict[str, bool]:
    """Group name -> trainable flag."""
    if phase == 1:
        return {g: g != "seg_head" for g in GROUPS}
    if policy == "peft":
        return {g: g in PEFT_TRAINABLE for g in GROUPS}
    if policy in ("fpft", "none"):
        return {g: True for g in GROUPS}
    raise ValueError(f"unknown freeze policy {policy!r}")


def apply_freeze(model: TDPCR, manifest: dict[str, bool]) -> list[nn.Parameter]:
    trainable = []
    for group in GROUPS:
        for _, p in model.named_group_parameters(group):
            p.requires_grad_(manifest[group])
            if manifest[group]:
                trainable.append(p)
    return trainable


def group_checksums(model: TDPCR) -> dict[str, str]:
    out = {}
    for group in GROUPS:
        h = hashlib.sha256()
        for name, p in model.named_group_parameters(group):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        out[group] = h.hexdigest()
    return out


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    if total <= 0:
        return lr
    return lr_min + (lr - lr_min) * 0.5 * (1 + math.cos(math.pi * min(step, total) / total))


def to_tensors(bank: SceneBank, idx=None):
    sl = slice(None) if idx is None else idx
    return (torch.from_numpy(np.ascontiguousarray(bank.cloudy[sl])),
            torch.from_numpy(np.ascontiguousarray(bank.sar[sl])),
            torch.from_numpy(np.ascontiguousarray(bank.clear[sl])),
            torch.from_numpy(np.ascontiguousarray(bank.labels[sl])).long())


def make_batch(bank: SceneBank, step: int, batch_size: int, seed: int, crop: int | None):
    """Deterministic batch for ``step``: epoch-wise permutation plus per-sample augmentation."""
    n = len(bank)
    recs = []
    for j in range(batch_size):
        pos = step * batch_size + j
        perm = substream(seed, "order", pos // n).permutation(n)
        rec = bank.record(int(perm[pos % n]))
        recs.append(augment(rec, substream_seed(seed, "aug", step, j), crop))
    stack = lambda attr: torch.from_numpy(np.stack([getattr(r, attr) for r in recs]))
    return stack("cloudy"), stack("sar"), stack("clear"), stack("labels").long()


@torch.no_grad()
def evaluate(model: TDPCR, bank: SceneBank, with_seg: bool = True, batch_size: int = 8, limit: int | None = None,
             restoration: bool = True) -> dict[str, float]:
    """Mean per-image PSNR / SSIM; PA and mIoU from a confusion matrix over the whole set."""
    model.eval()
    n = len(bank) if limit is None else min(limit, len(bank))
    psnrs, ssims = [], []
    acc = ConfusionAccumulator(model.cfg.num_classes)
    for start in range(0, n, batch_size):
        idx = list(range(start, min(n, start + batch_size)))
        cloudy, sar, clear, labels = to_tensors(bank, idx)
        restored, logits = model(cloudy, sar, with_seg=with_seg)
        if restoration:
            for i in range(len(idx)):
                psnrs.append(psnr(restored[i : i + 1], clear[i : i + 1]))
                ssims.append(ssim_metric(restored[i : i + 1], clear[i : i + 1]))
        if with_seg:
            acc.update(logits.argmax(1), labels)
    model.train()
    out = {"count": n}
    if restoration:
        out["psnr"] = float(np.mean(psnrs))
        out["ssim"] = float(np.mean(ssims))
    if with_seg:
        s = acc.scores()
        out["pa"], out["miou"] = s.pa, s.miou
    return out


@dataclass
class TrainResult:
    model: TDPCR
    history: list[dict] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    best_metrics: dict = field(default_factory=dict)
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None
    checksums_before: dict = field(default_factory=dict)
    checksums_after: dict = field(default_factory=dict)


class JsonlLog:
    """Append-only line-delimited training log."""

    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict):
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def build_model(cfg: RunConfig, net_cfg: NetworkConfig | None = None) -> TDPCR:
    net_cfg = net_cfg or NetworkConfig(branch_mode=cfg.branch_mode)
    torch.manual_seed(substream_seed(cfg.seed, "init"))
    return TDPCR(net_cfg)


def _abort_nan(step, loss_parts, restored, logits):
    stats = {k: float(v.detach()) for k, v in loss_parts.items()}
    desc = f"restored min/max/mean {restored.min().item():.4g}/{restored.max().item():.4g}/{restored.mean().item():.4g}"
    if logits is not None:
        desc += f"; logits min/max {logits.min().item():.4g}/{logits.max().item():.4g}"
    raise NumericError(f"non-finite loss at step {step}: {stats}; {desc}")


def _fit(model: TDPCR, cfg: RunConfig, train: SceneBank, val: SceneBank | None, with_seg: bool) -> TrainResult:
    w = cfg.weights
    manifest = freeze_manifest(cfg.phase, cfg.freeze_policy)
    params = apply_freeze(model, manifest)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    start = 0
    if cfg.resume:
        load_into(model, cfg.resume)
        load_optimizer_state(opt, model, cfg.resume)
        start = int(read_manifest(cfg.resume)["step"])

    out = Path(cfg.out_dir) if cfg.out_dir else None
    logger = JsonlLog(out / "train_log.jsonl" if out else None)
    result = TrainResult(model, checksums_before=group_checksums(model))
    select = "miou" if cfg.phase == 2 else "psnr"
    best = -math.inf
    t0 = time.time()
    end = cfg.steps if cfg.stop_at is None else min(cfg.steps, cfg.stop_at)
    model.train()

    def validate(step):
        nonlocal best
        if val is None:
            return
        metrics = evaluate(model, val, with_seg=with_seg, limit=cfg.val_limit)
        rec = {"step": step, "phase": cfg.phase, "split": "val", **metrics, "wall": time.time() - t0}
        logger.write(rec)
        result.history.append(rec)
        if metrics[select] > best:
            best = metrics[select]
            result.best_metrics = dict(metrics, step=step)
            if out:
                result.best_checkpoint = save_checkpoint(out / "best.ckpt", model, phase=cfg.phase, step=step,
                                                         seed=cfg.seed, extra={"metrics": metrics})

    for step in range(start, end):
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)
        for g in opt.param_groups:
            g["lr"] = lr
        cloudy, sar, clear, labels = make_batch(train, step, cfg.batch_size, cfg.seed, cfg.crop)
        restored, logits = model(cloudy, sar, with_seg=with_seg)
        lrec = rec_loss(restored, clear, w)
        parts = {"rec": lrec}
        if with_seg:
            lseg = seg_loss(logits, labels, w)
            parts["seg"] = lseg
            loss = w.lambda_rec * lrec + w.lambda_seg * lseg
        else:
            loss = lrec
        if not torch.isfinite(loss):
            _abort_nan(step, parts, restored, logits)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == end - 1:
            rec = {"step": step, "phase": cfg.phase, "split": "train", "loss": float(loss.detach()),
                   **{k: float(v.detach()) for k, v in parts.items()}, "lr": lr, "wall": time.time() - t0}
            logger.write(rec)
            result.history.append(rec)
        if cfg.val_every and (step + 1) % cfg.val_every == 0:
            validate(step + 1)

    if val is not None and (not cfg.val_every or end % cfg.val_every):
        validate(end)
    if val is not None:
        result.final_metrics = evaluate(model, val, with_seg=with_seg, limit=cfg.val_limit)
    if out:
        result.last_checkpoint = save_checkpoint(out / "last.ckpt", model, phase=cfg.phase, step=end, seed=cfg.seed,
                                                 optimizer=opt, extra={"run": asdict(cfg)})
    result.checksums_after = group_checksums(model)
    return result


def train_phase1(cfg: RunConfig, train: SceneBank, val: SceneBank | None = None,
                 net_cfg: NetworkConfig | None = None) -> TrainResult:
    """Reconstruction pretraining on L_rec; the segmentation head stays detached and frozen."""
    if cfg.phase != 1:
        raise ValueError("train_phase1 needs cfg.phase == 1")
    model = build_model(cfg, net_cfg)
    return _fit(model, cfg, train, val, with_seg=False)


def train_phase2(cfg: RunConfig, train: SceneBank, val: SceneBank | None = None,
                 phase1_ckpt: str | Path | None = None, net_cfg: NetworkConfig | None = None) -> TrainResult:
    """Joint fine-tuning on L_joint with the segmentation head attached.

    ``freeze_policy="none"`` is the joint-training ablation: a fresh model,
    every group trainable, no phase-1 weights.
    """
    if cfg.phase != 2:
        raise ValueError("train_phase2 needs cfg.phase == 2")
    ckpt = phase1_ckpt or cfg.init_checkpoint
    if cfg.freeze_policy == "none":
        model = build_model(cfg, net_cfg)
    else:
        if not ckpt or not Path(ckpt).exists():
            raise ValueError(f"phase 2 with freeze_policy={cfg.freeze_policy!r} needs a phase-1 checkpoint")
        model, _ = load_checkpoint(ckpt)
    return _fit(model, cfg, train, val, with_seg=True)


# ----------------------------------------------------- segmentation probe


class SegProbe(nn.Module):
    """Small fully convolutional classifier used as the fixed downstream segmenter."""

    def __init__(self, in_bands: int = 13, num_classes: int = 6, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_bands, width, 3, padding=1), nn.GELU(),
            nn.Conv2d(width, width, 3, padding=1), nn.GELU(),
            nn.Conv2d(width, width, 3, padding=1), nn.GELU(),
            nn.Conv2d(width, num_classes, 1),
        )

    def forward(self, x):
        return self.net(x)


def train_probe(train: SceneBank, num_classes: int, steps: int = 500, batch_size: int = 8, crop: int | None = 32,
                lr: float = 1e-3, seed: int = 0, label_smoothing: float = 0.1) -> SegProbe:
    """Fit the probe on clear imagery, then freeze it."""
    torch.manual_seed(substream_seed(seed, "probe-init"))
    probe = SegProbe(train.clear.shape[1], num_classes)
    opt = torch.optim.AdamW(probe.parameters(), lr=lr, weight_decay=1e-4)
    w = LossWeights(label_smoothing=label_smoothing)
    for step in range(steps):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(step, steps, lr, 1e-6)
        _, _, clear, labels = make_batch(train, step, batch_size, substream_seed(seed, "probe"), crop)
        loss = seg_loss(probe(clear), labels, w)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    probe.eval()
    for p in probe.parameters():
        p.requires_grad_(False)
    return probe


@torch.no_grad()
def probe_scores(probe: SegProbe, images: torch.Tensor, labels: torch.Tensor, num_classes: int,
                 batch_size: int = 16) -> dict[str, float]:
    acc = ConfusionAccumulator(num_classes)
    for s in range(0, len(images), batch_size):
        acc.update(probe(images[s : s + batch_size]).argmax(1), labels[s : s + batch_size])
    sc = acc.scores()
    return {"pa": sc.pa, "miou": sc.miou}


@torch.no_grad()
def predict(model: TDPCR, bank: SceneBank, batch_size: int = 8, with_seg: bool = True):
    """Restored images and (optionally) argmax label maps for every scene in ``bank``."""
    model.eval()
    restored, labels = [], []
    for s in range(0, len(bank), batch_size):
        cloudy, sar, _, _ = to_tensors(bank, list(range(s, min(len(bank), s + batch_size))))
        r, logits = model(cloudy, sar, with_seg=with_seg)
        restored.append(r)
        if with_seg:
            labels.append(logits.argmax(1))
    model.train()
    return torch.cat(restored), (torch.cat(labels) if with_seg else None)


def restore_all(model: TDPCR, bank: SceneBank, batch_size: int = 8) -> torch.Tensor:
    return predict(model, bank, batch_size, with_seg=False)[0]
