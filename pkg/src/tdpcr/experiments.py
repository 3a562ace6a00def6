"""Desk-scale experiments: the training-strategy / fusion-branch ablation matrix
and the direct vs multi-stage vs multi-task segmentation comparison."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .data import SceneBank
from .network import TDPCR, count_parameters
from .objectives import write_metric_records
from .trainer import (
    RunConfig,
    evaluate,
    probe_scores,
    restore_all,
    to_tensors,
    train_phase1,
    train_phase2,
    train_probe,
)

log = logging.getLogger(__name__)

# (row name, branch mode, phase-2 freeze policy)
ABLATION_ROWS = (
    ("global_only", "global_only", "peft"),
    ("local_only", "local_only", "peft"),
    ("joint", "both", "none"),
    ("fpft", "both", "fpft"),
    ("peft", "both", "peft"),
)
ROW_TITLES = {
    "global_only": "Global branch only",
    "local_only": "Local branch only",
    "peft": "CR pretrain + PEFT",
    "joint": "Joint training",
    "fpft": "CR pretrain + FPFT",
}


@dataclass
class BenchmarkConfig:
    scene_size: int = 64
    n_train: int = 512
    n_val: int = 64
    n_test: int = 64
    phase1_steps: int = 1500
    phase2_steps: int = 600
    batch_size: int = 8
    crop: int | None = 32
    lr: float = 1e-3
    val_every: int = 300
    val_limit: int | None = None
    probe_steps: int = 800
    seed: int = 0

    def run_config(self, phase: int, policy: str, branch_mode: str, steps: int, out_dir=None) -> RunConfig:
        return RunConfig(phase=phase, freeze_policy=policy, branch_mode=branch_mode, steps=steps, lr=self.lr,
                         batch_size=self.batch_size, crop=self.crop, seed=self.seed, val_every=self.val_every,
                         val_limit=self.val_limit, log_every=50, out_dir=str(out_dir) if out_dir else None)


@dataclass
class AblationReport:
    rows: dict[str, dict] = field(default_factory=dict)
    phase1: dict[str, dict] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    models: dict[str, TDPCR] = field(default_factory=dict)
    phase1_checkpoints: dict[str, Path] = field(default_factory=dict)
    params: dict[str, int] = field(default_factory=dict)

    def check_directions(self):
        r = self.rows
        self.violations = []
        if {"peft", "global_only", "local_only"} <= set(r):
            for single in ("global_only", "local_only"):
                if r["peft"]["psnr"] < r[single]["psnr"]:
                    self.violations.append(
                        f"both-branch PSNR {r['peft']['psnr']:.2f} < {single} {r[single]['psnr']:.2f}")
        if {"peft", "joint"} <= set(r) and r["peft"]["miou"] < r["joint"]["miou"]:
            self.violations.append(f"PEFT mIoU {r['peft']['miou']:.4f} < joint training {r['joint']['miou']:.4f}")
        return self.violations

    def table(self) -> str:
        lines = [f"{'Configuration':<24}{'PSNR':>8}{'SSIM':>8}{'PA':>8}{'mIoU':>8}"]
        for name in ("global_only", "local_only", "peft", "joint", "fpft"):
            if name in self.rows:
                m = self.rows[name]
                lines.append(f"{ROW_TITLES[name]:<24}{m['psnr']:>8.2f}{m['ssim']:>8.3f}"
                             f"{100 * m['pa']:>8.1f}{100 * m['miou']:>8.1f}")
            elif name in self.errors:
                lines.append(f"{ROW_TITLES[name]:<24}  failed: {self.errors[name]}")
        for v in self.violations:
            lines.append(f"FLAG: {v}")
        return "\n".join(lines)

    def records(self) -> list[tuple[str, float, int]]:
        out = []
        for name, m in self.rows.items():
            for k in ("psnr", "ssim", "pa", "miou"):
                out.append((f"{name}.{k}", m[k], m["count"]))
        return out


def run_ablation(bench: BenchmarkConfig, train: SceneBank, val: SceneBank, out_dir: str | Path,
                 rows=ABLATION_ROWS) -> AblationReport:
    """Run each (branch mode, strategy) row with shared seeds; failed rows are recorded and skipped."""
    out_dir = Path(out_dir)
    report = AblationReport()
    for name, mode, policy in rows:
        t0 = time.time()
        try:
            if policy == "none":
                steps = bench.phase1_steps + bench.phase2_steps
                res = train_phase2(bench.run_config(2, "none", mode, steps, out_dir / name), train, val)
            else:
                if mode not in report.phase1_checkpoints:
                    p1 = train_phase1(bench.run_config(1, "none", mode, bench.phase1_steps,
                                                       out_dir / f"phase1_{mode}"), train, val)
                    report.phase1_checkpoints[mode] = p1.last_checkpoint
                    report.phase1[mode] = p1.final_metrics
                    report.models[f"phase1_{mode}"] = p1.model
                res = train_phase2(bench.run_config(2, policy, mode, bench.phase2_steps, out_dir / name), train,
                                   val, report.phase1_checkpoints[mode])
        except Exception as e:  # noqa: BLE001 - the matrix keeps going
            log.exception("ablation row %s failed", name)
            report.errors[name] = f"{type(e).__name__}: {e}"
            continue
        report.rows[name] = dict(res.final_metrics, minutes=(time.time() - t0) / 60)
        report.models[name] = res.model
        report.params[name] = count_parameters(res.model)
        log.info("ablation %s: %s", name, report.rows[name])
    report.check_directions()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.txt").write_text(report.table() + "\n")
    write_metric_records(out_dir / "ablation.tsv", report.records())
    return report


@dataclass
class SemanticGainReport:
    rows: dict[str, dict]
    violations: list[str]

    def table(self) -> str:
        lines = [f"{'Paradigm':<34}{'mIoU':>8}{'PA':>8}"]
        titles = {"direct_clear": "Direct (clear, upper bound)", "direct_cloudy": "Direct (cloudy)",
                  "multi_stage": "Multi-stage (CR-only -> probe)", "multi_task": "Multi-task (phase 2)"}
        for k, t in titles.items():
            if k in self.rows:
                lines.append(f"{t:<34}{100 * self.rows[k]['miou']:>8.1f}{100 * self.rows[k]['pa']:>8.1f}")
        lines += [f"FLAG: {v}" for v in self.violations]
        return "\n".join(lines)


def semantic_gain(bench: BenchmarkConfig, train: SceneBank, test: SceneBank, cr_model: TDPCR,
                  full_model: TDPCR, min_gap: float = 0.01, probe=None) -> SemanticGainReport:
    """Compare segmentation paradigms on the test split.

    A probe segmenter is fitted once on clear training imagery and then kept
    fixed; it scores the cloudy input (direct) and the phase-1 restoration
    (multi-stage). The multi-task row uses the phase-2 model's own head.
    """
    k = full_model.cfg.num_classes
    if probe is None:
        probe = train_probe(train, k, steps=bench.probe_steps, batch_size=bench.batch_size, crop=bench.crop,
                            seed=bench.seed)
    cloudy, _, clear, labels = to_tensors(test)
    rows = {
        "direct_clear": probe_scores(probe, clear, labels, k),
        "direct_cloudy": probe_scores(probe, cloudy, labels, k),
        "multi_stage": probe_scores(probe, restore_all(cr_model, test), labels, k),
    }
    m = evaluate(full_model, test, with_seg=True, restoration=False)
    rows["multi_task"] = {"pa": m["pa"], "miou": m["miou"]}
    violations = []
    order = ("direct_cloudy", "multi_stage", "multi_task")
    for lo, hi in zip(order, order[1:]):
        gap = rows[hi]["miou"] - rows[lo]["miou"]
        if not gap > min_gap:
            violations.append(f"{hi} - {lo} mIoU gap {100 * gap:.2f} points (expected > {100 * min_gap:.0f})")
    return SemanticGainReport(rows, violations)


