import pytest
import torch

from tdpcr.backbone import BlockConfig, NAFBlock, simple_gate
from tdpcr.errors import ShapeError

from conftest import check_grad, randomize_zero_inits


def test_simple_gate_ones():
    assert torch.equal(simple_gate(torch.ones(2, 6, 3, 3)), torch.ones(2, 3, 3, 3))


def test_simple_gate_zero_half():
    x = torch.cat([torch.randn(1, 4, 5, 5), torch.zeros(1, 4, 5, 5)], dim=1)
    assert torch.equal(simple_gate(x), torch.zeros(1, 4, 5, 5))


def test_simple_gate_product():
    x = torch.tensor([2.0, 3.0]).view(1, 2, 1, 1).expand(1, 2, 4, 4)
    assert torch.equal(simple_gate(x), torch.full((1, 1, 4, 4), 6.0))


def test_simple_gate_odd_channels():
    with pytest.raises(ShapeError):
        simple_gate(torch.ones(1, 3, 2, 2))


def test_block_config_validation():
    with pytest.raises(ValueError):
        BlockConfig(0)
    with pytest.raises(ValueError):
        BlockConfig(3, dw_expansion=1)


def test_identity_at_init():
    blk = NAFBlock(16)
    x = torch.randn(2, 16, 9, 7)
    assert torch.equal(blk(x), x)


@pytest.mark.parametrize("shape", [(1, 8, 4, 4), (3, 8, 16, 5), (2, 8, 1, 1)])
def test_shape_preserved(shape):
    blk = NAFBlock(8)
    randomize_zero_inits(blk)
    assert blk(torch.randn(shape)).shape == shape


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        NAFBlock(8)(torch.randn(1, 6, 4, 4))


def test_only_gate_nonlinearity():
    blk = NAFBlock(8)
    kinds = {type(m).__name__ for m in blk.modules()}
    assert kinds <= {"NAFBlock", "LayerNorm2d", "Conv2d", "SimpleGate", "Sequential", "AdaptiveAvgPool2d"}


def test_gradient_matches_finite_differences():
    blk = NAFBlock(8).double()
    randomize_zero_inits(blk, std=0.5)
    x = torch.randn(2, 8, 6, 6, dtype=torch.float64, requires_grad=True)
    assert check_grad(lambda: blk(x).mean(), x, n_entries=10) < 1e-4
