"""NAFBlock and its pieces (layer norm over channels, SimpleGate, simplified channel attention)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    dw_expansion: int = 2
    ffn_expansion: int = 2

    def __post_init__(self):
        if self.channels < 1 or self.dw_expansion < 1 or self.ffn_expansion < 1:
            raise ValueError(f"invalid block config {self}")
        if (self.channels * self.dw_expansion) % 2 or (self.channels * self.ffn_expansion) % 2:
            raise ValueError("expanded widths must be even for SimpleGate")


def simple_gate(x: torch.Tensor) -> torch.Tensor:
    """Split channels in half and multiply the halves."""
    if x.shape[1] % 2:
        raise ShapeError(f"simple_gate needs an even channel count, got {x.shape[1]}")
    a, b = x.chunk(2, dim=1)
    return a * b


class SimpleGate(nn.Module):
    def forward(self, x):
        return simple_gate(x)


class LayerNorm2d(nn.Module):
    """Per-sample, per-pixel normalization over the channel axis."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class NAFBlock(nn.Module):
    """Nonlinear-activation-free block.

    Two residual paths, each scaled by a learnable per-channel scalar that
    starts at zero, so a fresh block is the identity map.
    """

    def __init__(self, cfg: BlockConfig | int):
        super().__init__()
        if isinstance(cfg, int):
            cfg = BlockConfig(cfg)
        self.cfg = cfg
        c = cfg.channels
        dw = c * cfg.dw_expansion
        ffn = c * cfg.ffn_expansion

        self.norm1 = LayerNorm2d(c)
        self.conv1 = nn.Conv2d(c, dw, 1)
        self.conv2 = nn.Conv2d(dw, dw, 3, padding=1, groups=dw)
        self.sg = SimpleGate()
        self.sca = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(dw // 2, dw // 2, 1))
        self.conv3 = nn.Conv2d(dw // 2, c, 1)

        self.norm2 = LayerNorm2d(c)
        self.conv4 = nn.Conv2d(c, ffn, 1)
        self.conv5 = nn.Conv2d(ffn // 2, c, 1)

        self.beta = nn.Parameter(torch.zeros(1, c, 1, 1))
        self.gamma = nn.Parameter(torch.zeros(1, c, 1, 1))

    def forward(self, inp: torch.Tensor) -> torch.Tensor:
        if inp.shape[1] != self.cfg.channels:
            raise ShapeError(f"NAFBlock expects {self.cfg.channels} channels, got {inp.shape[1]}")
        x = self.conv2(self.conv1(self.norm1(inp)))
        x = self.sg(x)
        x = x * self.sca(x)
        y = inp + self.conv3(x) * self.beta

        x = self.sg(self.conv4(self.norm2(y)))
        return y + self.conv5(x) * self.gamma


def naf_stack(channels: int, depth: int) -> nn.Sequential:
    return nn.Sequential(*[NAFBlock(channels) for _ in range(depth)])
