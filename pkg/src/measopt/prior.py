"""Exact denoiser of a finite image dataset.

For a dataset ``z_1..z_n`` the noisy marginal at level ``sigma`` is the
Gaussian mixture ``p(x; sigma) = 1/n sum_i N(x; z_i, sigma^2 I)`` and the
minimum-MSE denoiser is its posterior mean

    D(x; sigma) = sum_i w_i(x) z_i,   w = softmax_i(-|x - z_i|^2 / (2 sigma^2)).

All functions work on flattened items and stabilise the softmax by subtracting
the maximal logit.  Reductions are numpy pairwise sums over fixed axes, so
results are deterministic.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .grid import as_grid

__all__ = [
    "PriorDataset",
    "denoise",
    "denoiser_vjp",
    "mixture_log_density",
    "posterior_weights",
    "score",
]


class PriorDataset:
    """Immutable stack of same-shape images acting as a Dirac-mixture prior."""

    def __init__(self, items: Sequence[np.ndarray] | np.ndarray):
        if isinstance(items, np.ndarray) and items.ndim == 4:
            stack = np.array(items, dtype=np.float64)
        else:
            items = [as_grid(z) for z in items]
            if not items:
                raise ValueError("a prior dataset needs at least one item")
            shapes = {z.shape for z in items}
            if len(shapes) != 1:
                raise ValueError(f"dataset items have mixed shapes: {sorted(shapes)}")
            stack = np.stack(items).astype(np.float64)
        if stack.shape[0] < 1:
            raise ValueError("a prior dataset needs at least one item")
        if not np.all(np.isfinite(stack)):
            raise FloatingPointError("dataset contains non-finite values")
        stack.setflags(write=False)
        self.items = stack
        self.flat = stack.reshape(stack.shape[0], -1)

    @property
    def n(self) -> int:
        return self.items.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.items.shape[1:])

    @property
    def d(self) -> int:
        return self.flat.shape[1]

    def mean(self) -> np.ndarray:
        return self.items.mean(axis=0)

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"PriorDataset(n={self.n}, shape={self.shape})"


def _check(ds: PriorDataset, x: np.ndarray, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != ds.shape:
        raise ValueError(f"query shape {x.shape} does not match dataset {ds.shape}")
    return x.reshape(-1)


def _logits(ds: PriorDataset, xf: np.ndarray, sigma: float) -> np.ndarray:
    # Direct differences rather than |x|^2 - 2<x,z> + |z|^2: the expansion
    # cancels catastrophically when x sits close to an item and sigma is small.
    diff = ds.flat - xf
    return -(diff * diff).sum(axis=1) / (2.0 * sigma * sigma)


def _softmax(logits: np.ndarray) -> np.ndarray:
    w = np.exp(logits - logits.max())
    return w / w.sum()


def posterior_weights(ds: PriorDataset, x: np.ndarray, sigma: float) -> np.ndarray:
    """Posterior responsibilities ``w_i`` of each item for the noisy query ``x``."""
    xf = _check(ds, x, sigma)
    return _softmax(_logits(ds, xf, sigma))


def _combine(w: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return (w[:, None] * rows).sum(axis=0)


def denoise(ds: PriorDataset, x: np.ndarray, sigma: float) -> np.ndarray:
    """Posterior mean ``E[x0 | x]``, a convex combination of dataset items."""
    w = posterior_weights(ds, x, sigma)
    return _combine(w, ds.flat).reshape(ds.shape)


def mixture_log_density(ds: PriorDataset, x: np.ndarray, sigma: float) -> float:
    """``log p(x; sigma)`` of the noised dataset distribution."""
    xf = _check(ds, x, sigma)
    logits = _logits(ds, xf, sigma)
    top = logits.max()
    lse = top + math.log(np.exp(logits - top).sum())
    return float(lse - math.log(ds.n) - 0.5 * ds.d * math.log(2.0 * math.pi * sigma * sigma))


def score(ds: PriorDataset, x: np.ndarray, sigma: float) -> np.ndarray:
    """Gradient of :func:`mixture_log_density` in ``x``: ``(D(x) - x) / sigma^2``."""
    return (denoise(ds, x, sigma) - np.asarray(x, dtype=np.float64)) / (sigma * sigma)


def denoiser_vjp(ds: PriorDataset, x: np.ndarray, sigma: float, v: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product ``v^T dD/dx`` in O(n d).

    The Jacobian is ``(1/sigma^2) sum_i w_i (z_i - D)(z_i - D)^T``, the weighted
    item covariance, so it is symmetric and the product never needs the matrix.
    """
    xf = _check(ds, x, sigma)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != ds.shape:
        raise ValueError(f"cotangent shape {v.shape} does not match dataset {ds.shape}")
    w = _softmax(_logits(ds, xf, sigma))
    centred = ds.flat - _combine(w, ds.flat)
    coeff = w * (centred * v.reshape(-1)).sum(axis=1)
    return (_combine(coeff, centred) / (sigma * sigma)).reshape(ds.shape)
