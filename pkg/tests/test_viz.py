import numpy as np
import pytest

from tdpcr.viz import hstack, label_rgb, optical_rgb, pca_basis, prompt_pca_rgb, read_ppm, write_ppm


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    path = write_ppm(tmp_path / "x.ppm", img)
    assert path.read_bytes().startswith(b"P6\n5 7\n255\n")
    assert np.array_equal(read_ppm(path), img)


def test_ppm_rejects_bad_arrays(tmp_path):
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "x.ppm", np.zeros((4, 4), dtype=np.uint8))


def test_pca_constant_prompt_mid_gray(caplog):
    rgb = prompt_pca_rgb(np.full((8, 6, 6), 0.3))
    assert rgb.shape == (6, 6, 3) and (rgb == 128).all()
    assert "zero variance" in caplog.text


def test_pca_output_size():
    assert prompt_pca_rgb(np.random.default_rng(1).normal(size=(8, 12, 20))).shape == (12, 20, 3)


def test_pca_needs_three_channels():
    with pytest.raises(ValueError):
        prompt_pca_rgb(np.zeros((2, 4, 4)))


def test_pca_completeness():
    gen = np.random.default_rng(2)
    x = gen.normal(size=(400, 8)) @ gen.normal(size=(8, 8))
    mean, vals, vecs = pca_basis(x)
    xc = x - mean
    recon = (xc @ vecs) @ vecs.T
    assert np.abs(recon - xc).max() < 1e-5
    assert np.all(np.diff(vals) <= 1e-12)


def test_pca_first_component_dominates_red():
    # prompt varying along one direction only: red channel carries the ramp
    ramp = np.linspace(0, 1, 64).reshape(8, 8)
    prompt = np.stack([ramp * (k + 1) for k in range(8)]) + 1e-3 * np.random.default_rng(3).normal(size=(8, 8, 8))
    rgb = prompt_pca_rgb(prompt)
    corr = abs(np.corrcoef(rgb[..., 0].ravel().astype(float), ramp.ravel())[0, 1])
    assert corr > 0.99


def test_previews():
    bands = np.random.default_rng(4).random((13, 6, 6)).astype(np.float32)
    assert optical_rgb(bands).shape == (6, 6, 3)
    assert label_rgb(np.zeros((6, 6), dtype=np.uint8)).shape == (6, 6, 3)
    assert hstack([optical_rgb(bands)] * 3).shape == (6, 22, 3)
