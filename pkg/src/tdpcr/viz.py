"""Portable-pixmap output and PCA projection of prompt maps to RGB."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# Sentinel-2 band order B1..B12 with B8A; true colour is B4, B3, B2
RGB_BANDS = (3, 2, 1)
PALETTE = np.array(
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
     [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128], [170, 110, 40]],
    dtype=np.uint8,
)


def write_ppm(path: str | Path, rgb: np.ndarray) -> Path:
    """Write an (H, W, 3) uint8 array as binary P6."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb).tobytes())
    return path


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError("not an 8-bit P6 pixmap")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def to_uint8(img: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    return np.clip(np.round((np.asarray(img, dtype=np.float64) - lo) / (hi - lo) * 255), 0, 255).astype(np.uint8)


def optical_rgb(bands: np.ndarray, gain: float = 2.5) -> np.ndarray:
    """(13, H, W) reflectance -> (H, W, 3) uint8 true-colour preview."""
    return to_uint8(np.stack([bands[b] for b in RGB_BANDS], axis=-1) * gain)


def gray_rgb(img: np.ndarray) -> np.ndarray:
    g = to_uint8(img)
    return np.repeat(g[..., None], 3, axis=-1)


def label_rgb(labels: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(labels) % len(PALETTE)]


def hstack(images: list[np.ndarray], gap: int = 2) -> np.ndarray:
    h = max(i.shape[0] for i in images)
    sep = np.full((h, gap, 3), 255, dtype=np.uint8)
    parts = []
    for i, img in enumerate(images):
        if i:
            parts.append(sep)
        parts.append(img)
    return np.concatenate(parts, axis=1)


def pca_basis(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, eigenvalues (descending) and eigenvectors (columns) of an (N, C) sample matrix."""
    x = np.asarray(samples, dtype=np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    return mean, vals[order], vecs[:, order]


def prompt_pca_rgb(prompt: np.ndarray, basis=None, eps: float = 1e-12) -> np.ndarray:
    """Project a (C_p, H, W) prompt onto its top three principal components.

    Each component is min-max scaled to [0, 1]. A prompt with no variance
    gives a mid-gray image. ``basis`` (mean, eigenvalues, eigenvectors) lets
    several prompts share one dataset-wide projection.
    """
    c, h, w = prompt.shape
    if c < 3:
        raise ValueError(f"PCA to RGB needs at least 3 prompt channels, got {c}")
    flat = prompt.reshape(c, -1).T
    mean, vals, vecs = basis if basis is not None else pca_basis(flat)
    if vals.sum() <= eps:
        log.warning("prompt map has zero variance; emitting mid-gray image")
        return np.full((h, w, 3), 128, dtype=np.uint8)
    proj = (flat - mean) @ vecs[:, :3]
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi - lo > eps, hi - lo, 1.0)
    scaled = np.where(hi - lo > eps, (proj - lo) / span, 0.5)
    return to_uint8(scaled.reshape(h, w, 3))
