"""Image quality scores on the ``[-1, 1]`` scale and best-of-k selection."""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["PSNR_CAP", "ScoreRow", "ambiguity_psnr", "best_of", "psnr", "rot180", "ssim"]

PSNR_CAP = 100.0


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} != {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB."""
    a, b = _same_shape(a, b)
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    peak = data_range * data_range
    if mse < peak * 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak / mse))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _local_mean(img, g):
    # valid-mode separable weighted average over each window position
    rows = np.einsum("ijk,k->ij", sliding_window_view(img, len(g), axis=0), g)
    return np.einsum("ijk,k->ij", sliding_window_view(rows, len(g), axis=1), g)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 2.0, win_size: int = 11) -> float:
    """Mean SSIM over all full 11x11 Gaussian (sigma 1.5) windows and channels."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {win_size}x{win_size} window")
    g = _gaussian_window(win_size)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _local_mean(x, g), _local_mean(y, g)
        vx = _local_mean(x * x, g) - mx * mx
        vy = _local_mean(y * y, g) - my * my
        cxy = _local_mean(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def rot180(x: np.ndarray) -> np.ndarray:
    """Point reflection of the spatial axes."""
    return np.asarray(x)[::-1, ::-1, ...].copy()


def ambiguity_psnr(x_hat: np.ndarray, x_true: np.ndarray, allow_rot: bool = True,
                   data_range: float = 2.0) -> float:
    """PSNR after undoing a 180 degree rotation when that scores higher."""
    plain = psnr(x_hat, x_true, data_range)
    if not allow_rot:
        return plain
    return max(plain, psnr(rot180(x_hat), x_true, data_range))


@dataclasses.dataclass(frozen=True)
class ScoreRow:
    psnr_db: float
    ssim: float
    runtime_ms: float = 0.0
    seed: int = 0
    replica: int = 0
    rotated: bool = False


def best_of(rows: Sequence[ScoreRow]) -> ScoreRow:
    """Row with the highest PSNR; ties go to the lowest replica index."""
    if not rows:
        raise ValueError("best_of needs at least one row")
    return min(rows, key=lambda r: (-r.psnr_db, r.replica))
