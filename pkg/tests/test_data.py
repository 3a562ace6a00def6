import json

import numpy as np
import pytest

from tdpcr.data import (
    SceneBank,
    SceneSpec,
    augment,
    generate_scene,
    read_sample,
    split_seeds,
    write_sample,
)
from tdpcr.errors import DataError


def scene(seed=1, cov=0.5, size=(64, 64)):
    return generate_scene(SceneSpec(seed, size, cloud_coverage=cov))


def test_zero_coverage_is_clear():
    s = scene(cov=0.0)
    assert np.array_equal(s.cloudy, s.clear)
    assert not s.cloud_alpha.any()


def test_full_coverage_decorrelates():
    worst = 0.0
    for seed in range(32):
        s = scene(seed, 1.0)
        for b in range(13):
            worst = max(worst, np.corrcoef(s.cloudy[b].ravel(), s.clear[b].ravel())[0, 1])
    assert worst < 0.2


def test_sar_unaffected_by_clouds():
    a, b = scene(7, 0.0), scene(7, 1.0)
    assert np.array_equal(a.sar, b.sar)
    assert np.array_equal(a.clear, b.clear)
    assert np.array_equal(a.labels, b.labels)


def test_deterministic():
    assert scene(3, 0.4).equals(scene(3, 0.4))


@pytest.mark.parametrize("cov", [0.1, 0.3, 0.5, 0.8])
def test_coverage_hits_target(cov):
    for seed in range(5):
        assert abs((scene(seed, cov).cloud_alpha > 0).mean() - cov) <= 0.05


def test_ranges_and_clear_identity():
    for seed in range(6):
        s = scene(seed, 0.6)
        for a in (s.cloudy, s.sar, s.clear, s.cloud_alpha):
            assert a.dtype == np.float32 and a.min() >= 0 and a.max() <= 1
        assert s.labels.dtype == np.uint8 and s.labels.max() < 6
        clear_px = s.cloud_alpha == 0
        assert np.array_equal(s.cloudy[:, clear_px], s.clear[:, clear_px])


def test_labels_have_coherent_regions():
    s = scene(2, 0.5)
    same = (s.labels[:, 1:] == s.labels[:, :-1]).mean()
    assert same > 0.85
    assert len(np.unique(s.labels)) >= 3


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(0, (60, 64))
    with pytest.raises(ValueError):
        SceneSpec(0, (64, 64), cloud_coverage=1.5)


def test_double_flip_identity():
    s = scene()
    # same seed -> same flips; full-size crop keeps everything
    once = augment(s, 11, crop=None)
    twice = augment(once, 11, crop=None)
    assert twice.equals(s)


def test_crop_bounds():
    s = scene()
    for seed in range(20):
        a = augment(s, seed, crop=32)
        assert a.cloudy.shape == (13, 32, 32) and a.labels.shape == (32, 32)
    with pytest.raises(ValueError):
        augment(s, 0, crop=128)


def test_tracer_pixel_alignment():
    s = scene()
    s.labels[:] = 0
    s.labels[10, 20] = 5
    s.clear[:, 10, 20] = 0.987
    s.sar[:, 10, 20] = 0.123
    for seed in range(40):
        a = augment(s, seed, crop=48)
        hits = np.argwhere(a.labels == 5)
        if len(hits) == 0:
            continue
        (y, x), = hits
        assert np.all(a.clear[:, y, x] == np.float32(0.987))
        assert np.all(a.sar[:, y, x] == np.float32(0.123))
        assert (a.clear == np.float32(0.987)).all(axis=0).sum() == 1


def test_roundtrip_bit_exact(tmp_path):
    s = scene(9, 0.35)
    write_sample(s, tmp_path / "s")
    assert read_sample(tmp_path / "s").equals(s)


def test_manifest_declares_format(tmp_path):
    write_sample(scene(), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["endianness"] == "little" and m["schema_version"] == 1
    assert m["arrays"]["labels"] == {"shape": [64, 64], "dtype": "uint8"}
    assert (tmp_path / "opt_cloudy.raw").stat().st_size == 13 * 64 * 64 * 4


def test_corrupted_manifest(tmp_path):
    write_sample(scene(), tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataError):
        read_sample(tmp_path)


def test_truncated_buffer(tmp_path):
    write_sample(scene(), tmp_path)
    raw = (tmp_path / "sar.raw").read_bytes()
    (tmp_path / "sar.raw").write_bytes(raw[:-4])
    with pytest.raises(DataError):
        read_sample(tmp_path)


def test_big_endian_fixture(tmp_path):
    s = scene(4, 0.5, (16, 16))
    write_sample(s, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    for key, arr in s.arrays().items():
        (tmp_path / f"{key}.raw").write_bytes(arr.astype(arr.dtype.newbyteorder(">")).tobytes())
    m["endianness"] = "big"
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    back = read_sample(tmp_path)
    assert back.equals(s)
    # reading swapped bytes as little-endian would not reproduce the data
    m["endianness"] = "little"
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    assert not read_sample(tmp_path).equals(s)


def test_split_seeds_disjoint():
    sets = [set(split_seeds(s, 512)) for s in ("train", "val", "test")]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])


def test_scene_bank_stacks():
    bank = SceneBank.generate([1, 2, 3], (32, 32))
    assert bank.cloudy.shape == (3, 13, 32, 32) and bank.labels.shape == (3, 32, 32)
    assert bank.subset([2]).seeds == [3]
