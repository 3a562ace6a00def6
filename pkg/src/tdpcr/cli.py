"""Command line entry point: ``tdpcr {gen-data,train,eval,ablate,viz-prompt}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .checkpoint import load_checkpoint
from .config import ProjectConfig, load_config
from .errors import ConfigError, DataError, NumericError
from .experiments import run_ablation, semantic_gain
from .network import CR_GROUPS, count_parameters
from .objectives import psnr, ssim_metric, table_psnr, write_metric_records
from .trainer import evaluate, predict, probe_scores, restore_all, to_tensors, train_phase1, train_phase2, train_probe
from .viz import gray_rgb, hstack, label_rgb, optical_rgb, pca_basis, prompt_pca_rgb, write_ppm

log = logging.getLogger("tdpcr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _out_dir(args, cfg: ProjectConfig, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg: ProjectConfig, out: Path, command: str):
    cfg.dump(out / "resolved_config.yaml")
    (out / "command.txt").write_text(command + "\n")


def _data_root(cfg: ProjectConfig, override: str | None = None) -> Path:
    return Path(override) if override else cfg.data.resolved_root()


def _bank(cfg: ProjectConfig, split: str) -> D.SceneBank:
    root = _data_root(cfg)
    if not (root / "splits.json").exists():
        raise DataError(f"{root} has no splits.json; run gen-data first")
    return D.SceneBank.load(root, split)


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, cfg: ProjectConfig) -> int:
    dc = cfg.data
    root = Path(args.out) if args.out else dc.resolved_root()
    counts = {"train": dc.n_train, "val": dc.n_val, "test": dc.n_test}
    splits = {}
    for split, n in counts.items():
        seeds = D.split_seeds(split, n, dc.base_seed)
        splits[split] = seeds
        for seed in seeds:
            cov = D.scene_coverage(seed, dc.coverage_min, dc.coverage_max)
            rec = D.generate_scene(D.SceneSpec(seed, (dc.size, dc.size), dc.num_classes, cov, dc.speckle_looks))
            D.write_sample(rec, root / split / f"{seed:07d}")
        log.info("%s: %d scenes", split, n)
    root.mkdir(parents=True, exist_ok=True)
    (root / "splits.json").write_text(json.dumps(splits))
    _echo(cfg, root, "gen-data")
    return EXIT_OK


def cmd_train(args, cfg: ProjectConfig) -> int:
    out = _out_dir(args, cfg, f"runs/phase{cfg.train.phase}")
    run = dataclasses.replace(cfg.train, out_dir=str(out))
    _echo(cfg, out, "train")
    train, val = _bank(cfg, "train"), _bank(cfg, "val")
    if run.phase == 1:
        res = train_phase1(run, train, val, cfg.network)
    else:
        res = train_phase2(run, train, val, args.ckpt or run.init_checkpoint, cfg.network)
    write_metric_records(out / "final_metrics.tsv", [(k, v, res.final_metrics.get("count", 0))
                                                    for k, v in res.final_metrics.items() if k != "count"])
    print(json.dumps({"final": res.final_metrics, "best": res.best_metrics}, indent=1))
    return EXIT_OK


def _strip(cloudy, restored, clear, labels, pred) -> np.ndarray:
    panels = [optical_rgb(cloudy)]
    if restored is not None:
        panels.append(optical_rgb(restored))
    panels += [optical_rgb(clear), label_rgb(labels)]
    if pred is not None:
        panels.append(label_rgb(pred))
    return hstack(panels)


def cmd_eval(args, cfg: ProjectConfig) -> int:
    ec = cfg.eval
    out = _out_dir(args, cfg, "runs/eval")
    _echo(cfg, out, "eval")
    bank = _bank(cfg, ec.split)
    k = cfg.data.num_classes
    needs_model = ec.mode in ("full", "cr-only", "multi-stage")
    model = None
    if needs_model:
        if not args.ckpt:
            raise ConfigError(f"eval mode {ec.mode!r} needs --ckpt")
        model, _ = load_checkpoint(args.ckpt)
    records, restored, pred = [], None, None
    n = len(bank)
    cloudy, _, clear, labels = to_tensors(bank)

    if ec.mode in ("full", "cr-only"):
        m = evaluate(model, bank, with_seg=ec.mode == "full", batch_size=ec.batch_size)
        for key in ("psnr", "ssim", "pa", "miou"):
            if key in m:
                records.append((key, m[key], n))
        restored, pred = predict(model, bank, ec.batch_size, with_seg=ec.mode == "full")
    else:
        probe = train_probe(_bank(cfg, "train"), k, steps=ec.probe_steps, batch_size=ec.batch_size,
                            crop=ec.probe_crop, seed=cfg.train.seed)
        if ec.mode == "direct-seg":
            images = {"cloudy": cloudy, "clear": clear}.get(ec.direct_input)
            if images is None:
                raise ConfigError("eval.direct_input must be 'cloudy' or 'clear'")
        else:
            restored = restore_all(model, bank, ec.batch_size)
            images = restored
            records += [("psnr", float(np.mean([psnr(restored[i:i + 1], clear[i:i + 1]) for i in range(n)])), n),
                        ("ssim", float(np.mean([ssim_metric(restored[i:i + 1], clear[i:i + 1]) for i in range(n)])), n)]
        s = probe_scores(probe, images, labels, k)
        records += [("pa", s["pa"], n), ("miou", s["miou"], n)]
        with torch.no_grad():
            pred = probe(images).argmax(1)

    write_metric_records(out / "metrics.tsv", records)
    lines = [f"mode: {ec.mode}  split: {ec.split}  scenes: {n}"]
    for name, value, _ in records:
        shown = table_psnr(value) if name == "psnr" else value
        lines.append(f"{name:>6}: {shown:.4f}")
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    for i in range(min(ec.strips, n)):
        strip = _strip(bank.cloudy[i], None if restored is None else restored[i].numpy(), bank.clear[i],
                       bank.labels[i], None if pred is None else pred[i].numpy())
        write_ppm(out / "strips" / f"{bank.seeds[i]:07d}.ppm", strip)
    return EXIT_OK


def cmd_ablate(args, cfg: ProjectConfig) -> int:
    out = _out_dir(args, cfg, "runs/ablation")
    _echo(cfg, out, "ablate")
    b = cfg.bench
    size = (b.scene_size, b.scene_size)
    train = D.SceneBank.generate(D.split_seeds("train", b.n_train, cfg.data.base_seed), size, cfg.data.num_classes)
    val = D.SceneBank.generate(D.split_seeds("val", b.n_val, cfg.data.base_seed), size, cfg.data.num_classes)
    test = D.SceneBank.generate(D.split_seeds("test", b.n_test, cfg.data.base_seed), size, cfg.data.num_classes)
    report = run_ablation(b, train, val, out)
    print(report.table())
    if "peft" in report.models and "phase1_both" in report.models:
        sg = semantic_gain(b, train, test, report.models["phase1_both"], report.models["peft"])
        (out / "semantic_gain.txt").write_text(sg.table() + "\n")
        write_metric_records(out / "semantic_gain.tsv",
                             [(f"{r}.{m}", v[m], len(test)) for r, v in sg.rows.items() for m in ("pa", "miou")])
        print(sg.table())
    full = report.models.get("peft")
    if full is not None:
        total, cr = count_parameters(full), count_parameters(full, CR_GROUPS)
        (out / "params.txt").write_text(f"full\t{total}\ncr_only\t{cr}\nseg_head\t{total - cr}\n")
    return EXIT_OK


def cmd_viz_prompt(args, cfg: ProjectConfig) -> int:
    vc = cfg.viz
    if not args.ckpt:
        raise ConfigError("viz-prompt needs --ckpt")
    model, _ = load_checkpoint(args.ckpt)
    if model.cfg.prompt_channels < 3:
        raise ValueError("PCA visualisation needs at least 3 prompt channels")
    out = _out_dir(args, cfg, "runs/viz")
    _echo(cfg, out, "viz-prompt")
    if args.sample:
        records = [D.read_sample(args.sample)]
    else:
        bank = _bank(cfg, vc.split)
        if vc.scope == "dataset":
            records = [bank.record(i) for i in range(min(vc.dataset_limit, len(bank)))]
        else:
            records = [bank.record(vc.index)]
    prompts = [model.prompt(torch.from_numpy(np.ascontiguousarray(r.cloudy))[None])[0].double().numpy()
               for r in records]
    basis = None
    if vc.scope == "dataset" and len(prompts) > 1:
        basis = pca_basis(np.concatenate([p.reshape(p.shape[0], -1).T for p in prompts]))
    for i, (rec, prompt) in enumerate(zip(records, prompts)):
        pca = prompt_pca_rgb(prompt, basis)
        tag = f"{i:03d}"
        write_ppm(out / f"prompt_pca_{tag}.ppm", pca)
        write_ppm(out / f"input_{tag}.ppm", optical_rgb(rec.cloudy))
        write_ppm(out / f"cloud_alpha_{tag}.ppm", gray_rgb(rec.cloud_alpha))
        write_ppm(out / f"strip_{tag}.ppm", hstack([optical_rgb(rec.cloudy), pca, gray_rgb(rec.cloud_alpha)]))
    print(f"wrote {len(records)} prompt visualisation(s) to {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "viz-prompt": cmd_viz_prompt,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdpcr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.steps=200 (repeatable)")
        p.add_argument("--out", help="output directory (dataset root for gen-data)")
        p.add_argument("--seed", type=int, help="run seed (train.seed)")
        p.add_argument("--ckpt", help="checkpoint to load")
        if name == "viz-prompt":
            p.add_argument("--sample", help="sample directory to visualise instead of a dataset split")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"train.seed={args.seed}")
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except NumericError as e:
        log.error("numeric abort: %s", e)
        return EXIT_NUMERIC
    except ValueError as e:
        log.error("invalid argument: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
