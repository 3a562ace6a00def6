import pytest
import torch

from tdpcr.checkpoint import load_checkpoint, load_into, read_manifest, save_checkpoint
from tdpcr.errors import DataError, ShapeError
from tdpcr.network import (
    CR_GROUPS,
    GROUPS,
    NetworkConfig,
    SegHead,
    TDPCR,
    conv_flops,
    count_parameters,
    estimate_flops,
)
from tdpcr.objectives import LossWeights, joint_loss, rec_loss, seg_loss
from tdpcr.trainer import apply_freeze, freeze_manifest

from conftest import central_diff, randomize_zero_inits, rel_err


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return TDPCR(NetworkConfig())


def inputs(b=2, hw=16, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 13, hw, hw, generator=g, dtype=dtype), torch.rand(b, 2, hw, hw, generator=g, dtype=dtype)


def test_forward_shapes(model):
    c, s = inputs(2, 128)
    with torch.no_grad():
        restored, logits = model(c, s)
    assert restored.shape == (2, 13, 128, 128)
    assert logits.shape == (2, 6, 128, 128)
    assert model(c[:, :, :16, :16], s[:, :, :16, :16], with_seg=False)[1] is None


def test_identity_at_init(model):
    c, s = inputs(2, 32)
    with torch.no_grad():
        restored, _ = model(c, s)
    assert torch.equal(restored, c)


def test_bad_inputs(model):
    c, s = inputs(1, 16)
    with pytest.raises(ValueError):
        model(c[..., :12, :12], s[..., :12, :12])
    with pytest.raises(ShapeError):
        model(c[:, :3], s)
    with pytest.raises(ShapeError):
        model(c, s[:, :1])


def test_deterministic(model):
    c, s = inputs(1, 16)
    with torch.no_grad():
        a = model(c, s)
        b = model(c, s)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_sar_reaches_output_only_through_fusion():
    torch.manual_seed(1)
    m = TDPCR(NetworkConfig())
    randomize_zero_inits(m)
    c, s = inputs(1, 16)
    with torch.no_grad():
        base = m(c, s)[0]
        assert not torch.equal(base, m(c, s * 0.3 + 0.5)[0])
        m.set_optical_only(True)
        a, b = m(c, s)[0], m(c, torch.rand_like(s))[0]
    assert torch.equal(a, b)


def test_parameter_partition(model):
    names = [n for n, _ in model.named_parameters()]
    grouped = [n for g in GROUPS for n, _ in model.named_group_parameters(g)]
    assert sorted(names) == sorted(grouped) and len(set(grouped)) == len(grouped)
    assert count_parameters(model) == sum(p.numel() for p in model.parameters())
    assert sum(count_parameters(model, [g]) for g in GROUPS) == count_parameters(model)
    assert count_parameters(model, []) == 0
    with pytest.raises(ValueError):
        count_parameters(model, ["backbone"])


def test_parameter_count_band(model):
    total = count_parameters(model)
    assert 0.75 * 5.95e6 <= total <= 1.25 * 5.95e6
    assert count_parameters(model, CR_GROUPS) < total


def test_global_only_is_subset():
    both = dict(TDPCR(NetworkConfig(branch_mode="both")).named_parameters())
    glob = dict(TDPCR(NetworkConfig(branch_mode="global_only")).named_parameters())
    loc = dict(TDPCR(NetworkConfig(branch_mode="local_only")).named_parameters())
    for sub in (glob, loc):
        assert set(sub) < set(both)
        assert all(both[n].shape == p.shape for n, p in sub.items())


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(stage_channels=[32, 64], naf_depths=[2])
    with pytest.raises(ValueError):
        NetworkConfig(stage_channels=[32, 48, 96, 192])


def test_seg_head_concat_width():
    head = SegHead([256, 128, 64, 32], 32, 6)
    assert head.classifier.in_channels == 128
    feats = [torch.randn(1, c, 16 // 2**i, 16 // 2**i) for i, c in zip(range(3, -1, -1), [256, 128, 64, 32])]
    assert head(feats, (16, 16)).shape == (1, 6, 16, 16)
    with pytest.raises(ValueError):
        head([])


def test_seg_head_single_scale_identity_upsample():
    head = SegHead([8], 4, 3)
    f = torch.randn(1, 8, 10, 10)
    assert torch.allclose(head([f]), head.classifier(head.proj[0](f)))


def test_seg_gradient_reaches_pgf_under_peft():
    torch.manual_seed(2)
    m = TDPCR(NetworkConfig())
    randomize_zero_inits(m, std=0.05)
    apply_freeze(m, freeze_manifest(2, "peft"))
    c, s = inputs(2, 16)
    _, logits = m(c, s)
    seg_loss(logits, torch.randint(0, 6, (2, 16, 16))).backward()
    norm = sum(float(p.grad.norm()) for _, p in m.named_group_parameters("pgf_blocks") if p.grad is not None)
    assert norm > 0
    assert all(p.grad is None for _, p in m.named_group_parameters("optical_encoder"))


def test_conv_flops_definition():
    assert conv_flops(3, 16, 32, 10, 10) == 2 * 9 * 16 * 32 * 100


def test_flops_scale_quadratically():
    cfg = NetworkConfig()
    f1, f2 = estimate_flops(cfg, (64, 64)), estimate_flops(cfg, (128, 128))
    # only the tiny FC layers of the global branch do not scale with area
    assert f2 / f1 == pytest.approx(4.0, rel=1e-3)


def test_flops_full_model_report():
    g = estimate_flops(NetworkConfig(), (256, 256)) / 1e9
    print(f"estimated FLOPs at 256x256: {g:.1f} G (reported for the original: 38.2 G)")
    assert g > 0


@pytest.mark.parametrize("group", GROUPS)
def test_parameter_gradient_per_group(group):
    torch.manual_seed(3)
    m = TDPCR(NetworkConfig()).double()
    randomize_zero_inits(m, std=0.1)
    c, s = inputs(1, 16, torch.float64, seed=4)
    target = torch.rand(1, 13, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    labels = torch.randint(0, 6, (1, 16, 16), generator=torch.Generator().manual_seed(6))
    w = LossWeights()

    def loss():
        r, logits = m(c, s, with_seg=group == "seg_head")
        if group == "seg_head":
            return joint_loss(r, target, logits, labels, w)
        return rec_loss(r, target, w)

    params = list(m.named_group_parameters(group))
    gen = torch.Generator().manual_seed(7)
    name, p = params[int(torch.randint(0, len(params), (1,), generator=gen))]
    m.zero_grad()
    loss().backward()
    analytic = p.grad.detach().clone()
    idx = tuple(int(torch.randint(0, d, (1,), generator=gen)) for d in p.shape)
    fd = central_diff(loss, p.data, idx, 1e-5)
    assert rel_err(fd, analytic[idx].item()) < 1e-3, name


def test_checkpoint_roundtrip(tmp_path, model):
    path = save_checkpoint(tmp_path / "m.ckpt", model, phase=1, step=12, seed=3)
    back, manifest = load_checkpoint(path)
    assert manifest["phase"] == 1 and manifest["step"] == 12 and manifest["seed"] == 3
    assert manifest["groups"] == list(GROUPS)
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)


def test_checkpoint_shape_validation(tmp_path, model):
    path = save_checkpoint(tmp_path / "m.ckpt", model, phase=1, step=0, seed=0)
    other = TDPCR(NetworkConfig(num_classes=4))
    with pytest.raises(DataError):
        load_into(other, path)
    with pytest.raises(DataError):
        load_into(TDPCR(NetworkConfig(branch_mode="global_only")), path)
    assert read_manifest(path)["params"]["seg_head.classifier.weight"]["shape"] == [6, 128, 1, 1]
