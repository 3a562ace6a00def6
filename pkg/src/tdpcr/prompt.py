"""Degradation prompt generator and per-stage prompt resizing."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

HIDDEN = 16


class PromptGenerator(nn.Module):
    """Three 3x3 convs with GELU after the first two; maps cloudy optical bands to a prompt map."""

    def __init__(self, in_bands: int = 13, prompt_channels: int = 8):
        super().__init__()
        self.in_bands = in_bands
        self.prompt_channels = prompt_channels
        self.body = nn.Sequential(
            nn.Conv2d(in_bands, HIDDEN, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(HIDDEN, HIDDEN, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(HIDDEN, prompt_channels, 3, padding=1),
        )

    def forward(self, cloudy: torch.Tensor) -> torch.Tensor:
        if cloudy.ndim != 4 or cloudy.shape[1] != self.in_bands:
            raise ShapeError(f"prompt generator expects (B,{self.in_bands},H,W), got {tuple(cloudy.shape)}")
        return self.body(cloudy)


def resize_prompt(prompt: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
    h, w = target_hw
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {target_hw}")
    if tuple(prompt.shape[-2:]) == (h, w):
        return prompt
    return F.interpolate(prompt, size=(h, w), mode="bilinear", align_corners=False)
