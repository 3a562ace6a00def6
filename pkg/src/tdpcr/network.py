"""TDP-CR network: decoupled optical/SAR encoders with per-stage prompt-guided
fusion, a shared reconstruction decoder and a multi-scale segmentation head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import naf_stack
from .errors import ShapeError
from .pgf import PGFBlock
from .prompt import PromptGenerator, resize_prompt

GROUPS = ("optical_encoder", "sar_encoder", "prompt_generator", "pgf_blocks", "shared_decoder", "seg_head")
# groups that exist for the reconstruction-only model
CR_GROUPS = GROUPS[:-1]


@dataclass
class NetworkConfig:
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    naf_depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    prompt_channels: int = 8
    optical_bands: int = 13
    sar_bands: int = 2
    num_classes: int = 6
    seg_unified_channels: int = 32
    branch_mode: str = "both"

    def __post_init__(self):
        self.stage_channels = list(self.stage_channels)
        self.naf_depths = list(self.naf_depths)
        if len(self.stage_channels) != len(self.naf_depths) or not self.stage_channels:
            raise ValueError("stage_channels and naf_depths must be non-empty and the same length")
        for a, b in zip(self.stage_channels, self.stage_channels[1:]):
            if b != 2 * a:
                raise ValueError(f"stage channels must double per stage, got {self.stage_channels}")
        if self.num_classes < 1 or self.seg_unified_channels < 1:
            raise ValueError("num_classes and seg_unified_channels must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.stage_channels) - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class StreamEncoder(nn.Module):
    """Input conv plus per-stage NAFBlocks and stride-2 downsamplers for one modality."""

    def __init__(self, in_bands: int, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.stage_channels
        self.stem = nn.Conv2d(in_bands, ch[0], 3, padding=1)
        self.stages = nn.ModuleList(naf_stack(c, d) for c, d in zip(ch, cfg.naf_depths))
        self.downs = nn.ModuleList(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1) for c in ch[:-1])


class SharedDecoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.stage_channels[::-1]
        depths = cfg.naf_depths[::-1]
        self.stages = nn.ModuleList(naf_stack(c, d) for c, d in zip(ch, depths))
        # 1x1 to 2C then pixel shuffle: net halving of channels, doubling of resolution
        self.ups = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, 2 * c, 1, bias=False), nn.PixelShuffle(2)) for c in ch[:-1]
        )
        self.tail = nn.Conv2d(ch[-1], cfg.optical_bands, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, skips: list[torch.Tensor]) -> list[torch.Tensor]:
        """Decode from the deepest skip; returns per-scale outputs, deepest first."""
        feats = []
        x = self.stages[0](skips[-1])
        feats.append(x)
        for up, stage, skip in zip(self.ups, self.stages[1:], skips[-2::-1]):
            x = stage(up(x) + skip)
            feats.append(x)
        return feats


class SegHead(nn.Module):
    """3x3 conv per scale to a common width, bilinear upsample, concat, 1x1 to class logits."""

    def __init__(self, in_channels: Iterable[int], unified: int, num_classes: int):
        super().__init__()
        in_channels = list(in_channels)
        self.proj = nn.ModuleList(nn.Conv2d(c, unified, 3, padding=1) for c in in_channels)
        self.classifier = nn.Conv2d(unified * len(in_channels), num_classes, 1)

    def forward(self, feats: list[torch.Tensor], size: tuple[int, int] | None = None) -> torch.Tensor:
        if not feats:
            raise ValueError("segmentation head needs at least one feature map")
        if len(feats) != len(self.proj):
            raise ShapeError(f"expected {len(self.proj)} scales, got {len(feats)}")
        if size is None:
            size = max((f.shape[-2:] for f in feats), key=lambda s: s[0] * s[1])
        size = tuple(size)
        ups = []
        for conv, f in zip(self.proj, feats):
            y = conv(f)
            if tuple(y.shape[-2:]) != size:
                y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
            ups.append(y)
        return self.classifier(torch.cat(ups, dim=1))


class TDPCR(nn.Module):
    """Joint cloud-removal / segmentation network.

    Submodule names equal the parameter group names in ``GROUPS``, so every
    parameter's group is the first component of its qualified name.
    """

    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        self.cfg = cfg
        self.optical_encoder = StreamEncoder(cfg.optical_bands, cfg)
        self.sar_encoder = StreamEncoder(cfg.sar_bands, cfg)
        self.prompt_generator = PromptGenerator(cfg.optical_bands, cfg.prompt_channels)
        self.pgf_blocks = nn.ModuleList(
            PGFBlock(c, cfg.prompt_channels, cfg.branch_mode) for c in cfg.stage_channels
        )
        self.shared_decoder = SharedDecoder(cfg)
        self.seg_head = SegHead(cfg.stage_channels[::-1], cfg.seg_unified_channels, cfg.num_classes)

    def _check_inputs(self, cloudy, sar):
        cfg = self.cfg
        if cloudy.ndim != 4 or cloudy.shape[1] != cfg.optical_bands:
            raise ShapeError(f"optical input must be (B,{cfg.optical_bands},H,W), got {tuple(cloudy.shape)}")
        if sar.ndim != 4 or sar.shape[1] != cfg.sar_bands:
            raise ShapeError(f"SAR input must be (B,{cfg.sar_bands},H,W), got {tuple(sar.shape)}")
        if cloudy.shape[0] != sar.shape[0] or cloudy.shape[-2:] != sar.shape[-2:]:
            raise ShapeError(f"optical {tuple(cloudy.shape)} and SAR {tuple(sar.shape)} are not aligned")
        h, w = cloudy.shape[-2:]
        if h % cfg.divisor or w % cfg.divisor:
            raise ValueError(f"spatial size {h}x{w} must be divisible by {cfg.divisor}")

    def encode(self, cloudy, sar):
        """Run prompt generation and both encoders; returns (prompt, fused skips)."""
        self._check_inputs(cloudy, sar)
        prompt = self.prompt_generator(cloudy)
        enc_o, enc_s = self.optical_encoder, self.sar_encoder
        x_o, x_s = enc_o.stem(cloudy), enc_s.stem(sar)
        skips = []
        n = len(self.pgf_blocks)
        for i in range(n):
            x_o = enc_o.stages[i](x_o)
            x_s = enc_s.stages[i](x_s)
            x_o = self.pgf_blocks[i](x_o, x_s, resize_prompt(prompt, tuple(x_o.shape[-2:])))
            skips.append(x_o)
            if i < n - 1:
                x_o = enc_o.downs[i](x_o)
                x_s = enc_s.downs[i](x_s)
        return prompt, skips

    def forward(self, cloudy, sar, with_seg: bool = True):
        """Returns ``(restored, seg_logits)``; ``seg_logits`` is None when ``with_seg`` is False."""
        _, skips = self.encode(cloudy, sar)
        feats = self.shared_decoder(skips)
        restored = cloudy + self.shared_decoder.tail(feats[-1])
        logits = self.seg_head(feats, tuple(cloudy.shape[-2:])) if with_seg else None
        return restored, logits

    @torch.no_grad()
    def prompt(self, cloudy: torch.Tensor) -> torch.Tensor:
        return self.prompt_generator(cloudy)

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def named_group_parameters(self, group: str):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}; known: {GROUPS}")
        module = getattr(self, group)
        for name, p in module.named_parameters():
            yield f"{group}.{name}", p

    def set_optical_only(self, flag: bool = True):
        for blk in self.pgf_blocks:
            blk.optical_only = flag


def count_parameters(model: TDPCR, groups: Iterable[str] | None = None) -> int:
    """Scalar parameter count over the selected groups (all groups when ``groups`` is None)."""
    selected = GROUPS if groups is None else list(groups)
    return sum(p.numel() for g in selected for _, p in model.named_group_parameters(g))


def estimate_flops(cfg: NetworkConfig, input_hw: tuple[int, int] = (256, 256), with_seg: bool = True) -> float:
    """Analytic FLOPs (2 x multiply-accumulates) of every conv and linear layer.

    Shapes are traced on the meta device, so no real arithmetic happens.
    """
    with torch.device("meta"):
        model = TDPCR(cfg)
        cloudy = torch.empty(1, cfg.optical_bands, *input_hw)
        sar = torch.empty(1, cfg.sar_bands, *input_hw)
    total = [0.0]

    def conv_hook(mod: nn.Conv2d, _inp, out):
        k = mod.kernel_size[0] * mod.kernel_size[1]
        total[0] += 2.0 * k * (mod.in_channels // mod.groups) * mod.out_channels * out.shape[-2] * out.shape[-1]

    def linear_hook(mod: nn.Linear, _inp, out):
        total[0] += 2.0 * mod.in_features * mod.out_features

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    with torch.no_grad():
        model(cloudy, sar, with_seg=with_seg)
    for h in handles:
        h.remove()
    return total[0]


def conv_flops(k: int, c_in: int, c_out: int, h: int, w: int, groups: int = 1) -> float:
    return 2.0 * k * k * (c_in // groups) * c_out * h * w
