"""Procedural satellite-like scenes (13-band optical, 2-band SAR, labels, clouds),
the on-disk sample format and training-time augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .rng import substream

OPTICAL_BANDS = 13
SAR_BANDS = 2
SCHEMA_VERSION = 1
LIBRARY_SEED = 20240611

ARRAY_FILES = {
    "opt_cloudy": ("cloudy", "float32"),
    "sar": ("sar", "float32"),
    "opt_clear": ("clear", "float32"),
    "labels": ("labels", "uint8"),
    "cloud_alpha": ("cloud_alpha", "float32"),
}

# SAR dB range mapped to [0, 1]
SAR_DB_RANGE = (-25.0, 5.0)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: tuple[int, int] = (256, 256)
    num_classes: int = 6
    cloud_coverage: float = 0.5
    speckle_looks: int = 4

    def __post_init__(self):
        h, w = self.size
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise ValueError(f"scene size must be positive multiples of 8, got {self.size}")
        if not 0.0 <= self.cloud_coverage <= 1.0:
            raise ValueError("cloud_coverage must lie in [0, 1]")
        if self.num_classes < 1 or self.speckle_looks < 1:
            raise ValueError("num_classes and speckle_looks must be positive")


@dataclass
class SampleRecord:
    cloudy: np.ndarray  # (13, H, W) float32
    sar: np.ndarray  # (2, H, W) float32
    clear: np.ndarray  # (13, H, W) float32
    labels: np.ndarray  # (H, W) uint8
    cloud_alpha: np.ndarray  # (H, W) float32, diagnostics only
    meta: dict = field(default_factory=dict)

    @property
    def hw(self) -> tuple[int, int]:
        return tuple(self.labels.shape)

    def arrays(self) -> dict[str, np.ndarray]:
        return {key: getattr(self, attr) for key, (attr, _) in ARRAY_FILES.items()}

    def equals(self, other: "SampleRecord") -> bool:
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays().values(), other.arrays().values())
        )


@dataclass(frozen=True)
class SpectralLibrary:
    optical: np.ndarray  # (K, 13) class mean reflectance
    sar_db: np.ndarray  # (K, 2) class mean backscatter in dB
    texture_loading: np.ndarray  # (13,) band loadings of the shared texture field


_LIBRARIES: dict[int, SpectralLibrary] = {}


def spectral_library(num_classes: int) -> SpectralLibrary:
    """Fixed per-class spectra shared by every scene with this class count."""
    if num_classes not in _LIBRARIES:
        rng = substream(LIBRARY_SEED, "library", num_classes)
        wl = np.linspace(0.0, 1.0, OPTICAL_BANDS)
        optical = np.empty((num_classes, OPTICAL_BANDS))
        for k in range(num_classes):
            base = rng.uniform(0.08, 0.45)
            slope = rng.uniform(-0.25, 0.35)
            # a red-edge-like step placed at a class-specific wavelength
            edge = rng.uniform(-0.2, 0.3) / (1 + np.exp(-(wl - rng.uniform(0.3, 0.7)) * 25))
            optical[k] = np.clip(base + slope * wl + edge + rng.normal(0, 0.02, OPTICAL_BANDS), 0.02, 0.85)
        sar_db = np.stack(
            [np.linspace(-20, -4, num_classes), np.linspace(-24, -9, num_classes)], axis=1
        )
        sar_db = sar_db[rng.permutation(num_classes)] + rng.normal(0, 0.5, (num_classes, 2))
        loading = rng.uniform(0.5, 1.0, OPTICAL_BANDS)
        _LIBRARIES[num_classes] = SpectralLibrary(optical, sar_db, loading)
    return _LIBRARIES[num_classes]


def smooth_field(rng: np.random.Generator, hw, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(hw), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def value_noise(rng: np.random.Generator, hw, octaves: int = 4, base_cells: int = 3) -> np.ndarray:
    """Multi-octave value noise in [0, 1]."""
    h, w = hw
    out = np.zeros(hw)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base_cells * 2**o
        grid = rng.random((cells + 1, cells + 1))
        out += amp * ndimage.zoom(grid, (h / (cells + 1), w / (cells + 1)), order=3, mode="nearest")[:h, :w]
        total += amp
        amp *= 0.5
    out /= total
    return (out - out.min()) / (out.max() - out.min() + 1e-12)


def label_map(rng: np.random.Generator, hw, num_classes: int) -> np.ndarray:
    sigma = max(hw) / 14
    fields = np.stack([smooth_field(rng, hw, sigma) for _ in range(num_classes)])
    return np.argmax(fields, axis=0).astype(np.uint8)


def cloud_field(rng: np.random.Generator, hw, coverage: float, edge: float = 0.12) -> np.ndarray:
    """Cloud thickness in [0, 1] whose nonzero fraction is ``coverage``."""
    if coverage <= 0:
        return np.zeros(hw, dtype=np.float32)
    n = value_noise(rng, hw)
    if coverage >= 1:
        thresh = n.min() - edge * 0.25
    else:
        thresh = np.quantile(n, 1 - coverage)
    alpha = np.clip((n - thresh) / edge, 0.0, 1.0)
    alpha[n <= thresh] = 0.0
    return alpha.astype(np.float32)


def generate_scene(spec: SceneSpec) -> SampleRecord:
    """Deterministic scene for ``spec``.

    Each component (labels, texture, SAR, clouds) draws from its own substream
    of ``spec.seed``, so changing the cloud coverage leaves the clear image and
    the SAR image unchanged bit for bit.
    """
    hw = tuple(spec.size)
    k = spec.num_classes
    lib = spectral_library(k)

    labels = label_map(substream(spec.seed, "labels"), hw, k)

    rng = substream(spec.seed, "optical")
    gain = 1.0 + rng.normal(0, 0.03, (k, 1))
    spectra = lib.optical * gain
    clear = spectra[labels].transpose(2, 0, 1)
    tex = smooth_field(rng, hw, 1.5)
    clear = clear + 0.025 * lib.texture_loading[:, None, None] * tex[None]
    clear = clear + rng.normal(0, 0.004, clear.shape)
    clear = np.clip(clear, 0.0, 1.0).astype(np.float32)

    rng = substream(spec.seed, "sar")
    sigma0 = 10 ** (lib.sar_db[labels].transpose(2, 0, 1) / 10)
    looks = spec.speckle_looks
    speckle = rng.gamma(shape=looks, scale=1.0 / looks, size=sigma0.shape)
    db = 10 * np.log10(sigma0 * speckle)
    lo, hi = SAR_DB_RANGE
    sar = np.clip((db - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)

    rng = substream(spec.seed, "clouds", round(spec.cloud_coverage, 6))
    alpha = cloud_field(rng, hw, spec.cloud_coverage)
    cloud_spec = np.clip(0.82 + 0.06 * np.linspace(-1, 1, OPTICAL_BANDS) + rng.normal(0, 0.02, OPTICAL_BANDS), 0, 1)
    brightness = 0.92 + 0.08 * value_noise(rng, hw, octaves=3, base_cells=5)
    cloud = cloud_spec[:, None, None] * brightness[None]
    a = alpha[None].astype(np.float64)
    haze = 0.06 * np.sqrt(a)
    cloudy = (1 - a) * clear + a * cloud + haze
    cloudy = np.clip(cloudy, 0.0, 1.0).astype(np.float32)
    clear_px = alpha == 0
    cloudy[:, clear_px] = clear[:, clear_px]

    meta = {"seed": int(spec.seed), "coverage": float(spec.cloud_coverage), "num_classes": k,
            "speckle_looks": looks}
    return SampleRecord(cloudy, sar, clear, labels, alpha, meta)


def augment(sample: SampleRecord, seed: int, crop: int | None = 128) -> SampleRecord:
    """Random horizontal/vertical flips and a random square crop, identical for every array."""
    rng = np.random.default_rng(seed)
    hflip, vflip = rng.random(2) < 0.5
    h, w = sample.hw
    if crop is None:
        top = left = 0
        ch, cw = h, w
    else:
        if crop > h or crop > w:
            raise ValueError(f"crop {crop} larger than sample {h}x{w}")
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        ch = cw = crop

    def op(a):
        if hflip:
            a = a[..., ::-1]
        if vflip:
            a = a[..., ::-1, :]
        return np.ascontiguousarray(a[..., top : top + ch, left : left + cw])

    return SampleRecord(op(sample.cloudy), op(sample.sar), op(sample.clear), op(sample.labels),
                        op(sample.cloud_alpha), dict(sample.meta))


# ----------------------------------------------------------- on-disk format


def write_sample(sample: SampleRecord, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for key, arr in sample.arrays().items():
        dtype = ARRAY_FILES[key][1]
        arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
        (directory / f"{key}.raw").write_bytes(arr.tobytes(order="C"))
        arrays[key] = {"shape": list(arr.shape), "dtype": dtype}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "endianness": "little",
        "arrays": arrays,
        "seed": sample.meta.get("seed"),
        "coverage": sample.meta.get("coverage"),
        "num_classes": sample.meta.get("num_classes"),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def read_sample(directory: str | Path) -> SampleRecord:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"no manifest.json in {directory}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"corrupted manifest in {directory}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported or missing schema_version in {directory}")
    order = {"little": "<", "big": ">"}.get(manifest.get("endianness"))
    if order is None:
        raise DataError(f"bad endianness {manifest.get('endianness')!r}")
    entries = manifest.get("arrays")
    if not isinstance(entries, dict) or set(entries) != set(ARRAY_FILES):
        raise DataError(f"manifest must list arrays {sorted(ARRAY_FILES)}")
    loaded = {}
    for key, (attr, dtype) in ARRAY_FILES.items():
        entry = entries[key]
        try:
            shape = tuple(int(s) for s in entry["shape"])
            if entry["dtype"] != dtype:
                raise DataError(f"{key}: expected dtype {dtype}, manifest says {entry['dtype']}")
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed manifest entry for {key}") from e
        raw = (directory / f"{key}.raw").read_bytes()
        dt = np.dtype(dtype).newbyteorder(order)
        if len(raw) != int(np.prod(shape)) * dt.itemsize:
            raise DataError(f"{key}.raw has {len(raw)} bytes, manifest implies shape {shape}")
        loaded[attr] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.dtype(dtype), copy=True)
    meta = {k: manifest.get(k) for k in ("seed", "coverage", "num_classes")}
    rec = SampleRecord(meta=meta, **loaded)
    hw = rec.labels.shape
    if rec.cloudy.shape[1:] != hw or rec.sar.shape[1:] != hw or rec.clear.shape[1:] != hw or rec.cloud_alpha.shape != hw:
        raise DataError("arrays do not share a spatial size")
    return rec


# ------------------------------------------------------------ datasets

SPLITS = ("train", "val", "test")
SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


def split_seeds(split: str, count: int, base_seed: int = 0) -> list[int]:
    """Disjoint seed intervals per split."""
    start = base_seed + SPLIT_OFFSETS[split]
    return list(range(start, start + count))


def scene_coverage(seed: int, low: float = 0.1, high: float = 0.9) -> float:
    return float(substream(seed, "coverage").uniform(low, high))


def scene_for_seed(seed: int, size, num_classes: int = 6, coverage_range=(0.1, 0.9), speckle_looks: int = 4):
    cov = scene_coverage(seed, *coverage_range)
    return generate_scene(SceneSpec(seed, tuple(size), num_classes, cov, speckle_looks))


@dataclass
class SceneBank:
    """Stacked in-memory arrays for a list of scenes."""

    cloudy: np.ndarray
    sar: np.ndarray
    clear: np.ndarray
    labels: np.ndarray
    cloud_alpha: np.ndarray
    seeds: list[int]

    def __len__(self):
        return len(self.seeds)

    @classmethod
    def from_records(cls, records: list[SampleRecord], seeds=None) -> "SceneBank":
        if not records:
            raise ValueError("empty scene list")
        seeds = list(seeds) if seeds is not None else [r.meta.get("seed") for r in records]
        return cls(*(np.stack([getattr(r, a) for r in records]) for a in
                     ("cloudy", "sar", "clear", "labels", "cloud_alpha")), seeds)

    @classmethod
    def generate(cls, seeds, size, num_classes: int = 6, coverage_range=(0.1, 0.9)) -> "SceneBank":
        seeds = list(seeds)
        return cls.from_records([scene_for_seed(s, size, num_classes, coverage_range) for s in seeds], seeds)

    @classmethod
    def load(cls, root: str | Path, split: str) -> "SceneBank":
        root = Path(root)
        seeds = json.loads((root / "splits.json").read_text())[split]
        return cls.from_records([read_sample(root / split / f"{s:07d}") for s in seeds], seeds)

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(self.cloudy[i], self.sar[i], self.clear[i], self.labels[i], self.cloud_alpha[i],
                            {"seed": self.seeds[i]})

    def subset(self, idx) -> "SceneBank":
        idx = list(idx)
        return SceneBank(self.cloudy[idx], self.sar[idx], self.clear[idx], self.labels[idx],
                         self.cloud_alpha[idx], [self.seeds[i] for i in idx])
