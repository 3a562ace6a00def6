"""Joint SAR-optical cloud removal and land-cover segmentation with prompt-guided fusion."""

from .network import GROUPS, NetworkConfig, TDPCR, count_parameters, estimate_flops
from .pgf import PGFBlock
from .prompt import PromptGenerator, resize_prompt

__all__ = [
    "GROUPS",
    "NetworkConfig",
    "PGFBlock",
    "PromptGenerator",
    "TDPCR",
    "count_parameters",
    "estimate_flops",
    "resize_prompt",
]
__version__ = "0.1.0"
