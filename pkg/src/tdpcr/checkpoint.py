"""Checkpoint archive: ``manifest.json`` plus raw little-endian float32 buffers.

Layout inside the zip::

    manifest.json
    params/<group>/<name>.raw
    optim/<group>/<name>/<exp_avg|exp_avg_sq>.raw     (optional)
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .network import GROUPS, NetworkConfig, TDPCR

FORMAT_VERSION = 1
LE_F32 = np.dtype("<f4")


def _to_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype=LE_F32).tobytes()


def _split(name: str) -> tuple[str, str]:
    group, rest = name.split(".", 1)
    return group, rest


def save_checkpoint(path, model: TDPCR, *, phase: int, step: int, seed: int,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = {}
    optim_entries = {}
    name_of = {id(p): n for n, p in model.named_parameters()}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, p in model.named_parameters():
            group, rest = _split(name)
            params[name] = {"group": group, "shape": list(p.shape)}
            zf.writestr(f"params/{group}/{rest}.raw", _to_bytes(p))
        if optimizer is not None:
            for pg in optimizer.param_groups:
                for p in pg["params"]:
                    state = optimizer.state.get(p)
                    if not state:
                        continue
                    name = name_of[id(p)]
                    group, rest = _split(name)
                    optim_entries[name] = {"step": float(state["step"])}
                    for key in ("exp_avg", "exp_avg_sq"):
                        zf.writestr(f"optim/{group}/{rest}/{key}.raw", _to_bytes(state[key]))
        manifest = {
            "format_version": FORMAT_VERSION,
            "dtype": "float32",
            "endianness": "little",
            "config": model.cfg.to_dict(),
            "groups": list(GROUPS),
            "params": params,
            "optimizer": optim_entries,
            "phase": phase,
            "step": step,
            "seed": seed,
            "extra": extra or {},
        }
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
    return path


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        try:
            return json.loads(zf.read("manifest.json"))
        except KeyError as e:
            raise DataError(f"{path}: checkpoint has no manifest") from e


def _read_tensor(zf: zipfile.ZipFile, member: str, shape) -> torch.Tensor:
    try:
        raw = zf.read(member)
    except KeyError as e:
        raise DataError(f"checkpoint missing buffer {member}") from e
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != n * 4:
        raise DataError(f"{member}: {len(raw)} bytes, expected {n * 4}")
    return torch.from_numpy(np.frombuffer(raw, dtype=LE_F32).astype(np.float32).reshape(shape))


def load_into(model: TDPCR, path) -> dict:
    """Load parameters into ``model``; names and shapes must match exactly."""
    manifest = read_manifest(path)
    stored = manifest["params"]
    own = dict(model.named_parameters())
    if set(stored) != set(own):
        missing = sorted(set(own) - set(stored))[:5]
        unexpected = sorted(set(stored) - set(own))[:5]
        raise DataError(f"parameter names differ; missing {missing}, unexpected {unexpected}")
    with zipfile.ZipFile(path) as zf, torch.no_grad():
        for name, p in own.items():
            shape = tuple(stored[name]["shape"])
            if shape != tuple(p.shape):
                raise DataError(f"{name}: checkpoint shape {shape} vs model {tuple(p.shape)}")
            group, rest = _split(name)
            p.copy_(_read_tensor(zf, f"params/{group}/{rest}.raw", shape).to(p.dtype))
    return manifest


def load_checkpoint(path) -> tuple[TDPCR, dict]:
    manifest = read_manifest(path)
    model = TDPCR(NetworkConfig(**manifest["config"]))
    load_into(model, path)
    return model, manifest


def load_optimizer_state(optimizer: torch.optim.Optimizer, model: TDPCR, path):
    manifest = read_manifest(path)
    entries = manifest.get("optimizer", {})
    name_of = {id(p): n for n, p in model.named_parameters()}
    with zipfile.ZipFile(path) as zf:
        for pg in optimizer.param_groups:
            for p in pg["params"]:
                name = name_of[id(p)]
                if name not in entries:
                    continue
                group, rest = _split(name)
                optimizer.state[p] = {
                    "step": torch.tensor(entries[name]["step"]),
                    "exp_avg": _read_tensor(zf, f"optim/{group}/{rest}/exp_avg.raw", tuple(p.shape)).to(p.dtype),
                    "exp_avg_sq": _read_tensor(zf, f"optim/{group}/{rest}/exp_avg_sq.raw", tuple(p.shape)).to(p.dtype),
                }
