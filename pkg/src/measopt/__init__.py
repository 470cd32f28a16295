"""Measurement optimisation for diffusion-prior inverse problems.

The prior is the exact posterior-mean denoiser of a finite image dataset, so
every sampler runs at desk scale without trained networks.
"""

from .grid import RngStream, gaussian_grid
from .metrics import ambiguity_psnr, psnr, ssim
from .mo import MoConfig, mo
from .prior import PriorDataset, denoise
from .samplers import SamplerRun, dps_baseline, dps_mo, red_diff_mo
from .schedule import EdmSchedule, LrDecay

__version__ = "0.1.0"

__all__ = [
    "EdmSchedule",
    "LrDecay",
    "MoConfig",
    "PriorDataset",
    "RngStream",
    "SamplerRun",
    "ambiguity_psnr",
    "denoise",
    "dps_baseline",
    "dps_mo",
    "gaussian_grid",
    "mo",
    "psnr",
    "red_diff_mo",
    "ssim",
]
