"""Prompt-Guided Fusion: blend optical and SAR features with modality weights
built from a global channel branch and a local prompt-conditioned branch."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import NumericError, ShapeError

BRANCH_MODES = ("both", "global_only", "local_only")
OPT, SAR = 0, 1


def bottleneck_width(channels: int, ratio: int = 16, floor: int = 4) -> int:
    return max(channels // ratio, floor)


class GlobalBranch(nn.Module):
    """GAP of the summed streams -> FC bottleneck -> per-modality channel logits (B, 2, C)."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        hidden = bottleneck_width(channels)
        self.fc = nn.Sequential(nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, 2 * channels))

    def forward(self, f_opt, f_sar):
        if f_opt.shape != f_sar.shape:
            raise ShapeError(f"optical {tuple(f_opt.shape)} vs SAR {tuple(f_sar.shape)}")
        z = (f_opt + f_sar).mean(dim=(2, 3))
        return self.fc(z).view(-1, 2, self.channels)


class LocalBranch(nn.Module):
    """Depthwise 3x3 over the prompt channels, then 1x1 to per-modality logits (B, 2, C, H, W)."""

    def __init__(self, prompt_channels: int, channels: int):
        super().__init__()
        self.channels = channels
        self.dw = nn.Conv2d(prompt_channels, prompt_channels, 3, padding=1, groups=prompt_channels)
        self.proj = nn.Conv2d(prompt_channels, 2 * channels, 1)

    def forward(self, prompt):
        b, _, h, w = prompt.shape
        return self.proj(self.dw(prompt)).view(b, 2, self.channels, h, w)


@dataclass
class FusionTrace:
    """Intermediates of one fusion call, for inspection and tests."""

    global_logits: torch.Tensor | None
    local_logits: torch.Tensor | None
    logits: torch.Tensor
    alpha: torch.Tensor
    fused: torch.Tensor
    out: torch.Tensor


class PGFBlock(nn.Module):
    """Refines the optical stream: ``f_opt + psi(alpha_opt * f_opt + alpha_sar * f_sar)``.

    ``branch_mode`` selects which logit branches exist (``both``, ``global_only``,
    ``local_only``). ``psi`` ends in a zero-initialized 1x1 conv so a fresh
    block passes the optical stream through unchanged.

    Setting ``optical_only`` forces the SAR logits to -inf; it is a test hook
    for checking that SAR reaches the output only through fusion.
    """

    def __init__(self, channels: int, prompt_channels: int = 8, branch_mode: str = "both"):
        super().__init__()
        if branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}, got {branch_mode!r}")
        self.channels = channels
        self.branch_mode = branch_mode
        self.global_branch = GlobalBranch(channels) if branch_mode != "local_only" else None
        self.local_branch = LocalBranch(prompt_channels, channels) if branch_mode != "global_only" else None
        self.psi = nn.Sequential(nn.Conv2d(channels, channels, 1), nn.GELU(), nn.Conv2d(channels, channels, 1))
        nn.init.zeros_(self.psi[2].weight)
        nn.init.zeros_(self.psi[2].bias)
        self.optical_only = False

    def logits(self, f_opt, f_sar, prompt):
        g = self.global_branch(f_opt, f_sar) if self.global_branch is not None else None
        loc = self.local_branch(prompt) if self.local_branch is not None else None
        if g is None:
            total = loc
        elif loc is None:
            total = g[..., None, None].expand(-1, -1, -1, *f_opt.shape[-2:])
        else:
            total = g[..., None, None] + loc
        if self.optical_only:
            total = total.clone()
            total[:, SAR] = float("-inf")
        return g, loc, total

    def trace(self, f_opt, f_sar, prompt) -> FusionTrace:
        if f_opt.shape != f_sar.shape or f_opt.shape[1] != self.channels:
            raise ShapeError(
                f"PGF({self.channels}) got optical {tuple(f_opt.shape)} and SAR {tuple(f_sar.shape)}"
            )
        if prompt.shape[-2:] != f_opt.shape[-2:] or prompt.shape[0] != f_opt.shape[0]:
            raise ShapeError(
                f"prompt {tuple(prompt.shape)} does not match features {tuple(f_opt.shape)}; resize it first"
            )
        g, loc, total = self.logits(f_opt, f_sar, prompt)
        if not total.is_meta and torch.isnan(total).any():
            raise NumericError("NaN in fusion logits")
        # torch.softmax subtracts the max internally
        alpha = torch.softmax(total, dim=1)
        fused = alpha[:, OPT] * f_opt + alpha[:, SAR] * f_sar
        out = f_opt + self.psi(fused)
        return FusionTrace(g, loc, total, alpha, fused, out)

    def forward(self, f_opt, f_sar, prompt):
        return self.trace(f_opt, f_sar, prompt).out
