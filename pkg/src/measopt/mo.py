"""Measurement optimisation: fit the measurement, then pull back onto the prior.

One MO call runs ``n_sgld`` Langevin (or Adam) steps on
``|y - A(x)|^2 / (2 tau^2)`` starting from ``x_init``, then re-noises the
result at the current diffusion level and denoises it with the dataset prior.
Only the final prior query costs a denoiser evaluation.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable

import numpy as np

from . import prior
from .grid import RngStream, gaussian_grid
from .operators import ForwardOperator, residual_and_grad
from .schedule import LrDecay

__all__ = [
    "DivergenceError",
    "MoConfig",
    "mo",
    "prior_query",
    "run_inner_opt",
    "sgld_step",
]

OPTIMIZERS = ("sgld", "adam")


class DivergenceError(RuntimeError):
    """The inner optimiser blew up (residual norm above the configured limit)."""


@dataclasses.dataclass(frozen=True)
class MoConfig:
    n_sgld: int = 100
    base_eta: float = 5e-5
    tau: float = 0.01
    optimizer: str = "sgld"
    decay_r: float = 0.01
    decay_p: float = 2.0
    adam_lr: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.n_sgld < 0:
            raise ValueError(f"n_sgld must be >= 0, got {self.n_sgld}")
        if not self.base_eta > 0:
            raise ValueError(f"base_eta must be positive, got {self.base_eta}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.adam_lr > 0:
            raise ValueError(f"adam_lr must be positive, got {self.adam_lr}")
        self.decay  # validates r and p

    @property
    def decay(self) -> LrDecay:
        return LrDecay(self.base_eta, self.decay_r, self.decay_p)


def sgld_step(x: np.ndarray, grad: np.ndarray, eta_i: float, noise) -> np.ndarray:
    """One Langevin step ``x - eta * grad + sqrt(2 eta) * eps``.

    ``noise`` is either a standard-normal array or an :class:`RngStream` to
    draw it from.
    """
    if eta_i < 0:
        raise ValueError(f"eta_i must be non-negative, got {eta_i}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    if isinstance(noise, RngStream):
        noise = gaussian_grid(np.shape(x), noise)
    return x - eta_i * grad + math.sqrt(2.0 * eta_i) * noise


StepCallback = Callable[[int, np.ndarray, np.ndarray], None]


def run_inner_opt(
    op: ForwardOperator,
    y,
    x_init: np.ndarray,
    cfg: MoConfig,
    eta_i: float,
    stream: RngStream,
    callback: StepCallback | None = None,
) -> np.ndarray:
    """Run ``cfg.n_sgld`` optimiser steps on the data-fit objective.

    With Adam the rate is ``adam_lr`` scaled by the same decay factor
    ``eta_i / base_eta`` that SGLD receives, and no noise is injected.
    ``callback(k, x, residual)`` is invoked before every step.
    """
    x = np.array(x_init, dtype=np.float64)
    if cfg.n_sgld == 0:
        return x
    draw = stream.normal_source()
    adam = cfg.optimizer == "adam"
    if adam:
        m = np.zeros_like(x)
        v = np.zeros_like(x)
        lr = cfg.adam_lr * eta_i / cfg.base_eta
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    limit_sq = cfg.divergence_limit**2
    for k in range(cfg.n_sgld):
        resid, grad = residual_and_grad(op, x, y, cfg.tau)
        if float((resid * resid).sum()) > limit_sq:
            raise DivergenceError(
                f"residual norm exceeded {cfg.divergence_limit:g} at inner step {k}"
            )
        if callback is not None:
            callback(k, x, resid)
        if adam:
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            m_hat = m / (1 - b1 ** (k + 1))
            v_hat = v / (1 - b2 ** (k + 1))
            x = x - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        else:
            x = sgld_step(x, grad, eta_i, draw(x.shape))
    return x


def prior_query(
    ds: prior.PriorDataset, x_sgld: np.ndarray, sigma_t: float, stream: RngStream
) -> np.ndarray:
    """Re-noise ``x_sgld`` at level ``sigma_t`` and return the denoised estimate."""
    if not sigma_t > 0:
        raise ValueError(f"sigma_t must be positive, got {sigma_t}")
    x_t = x_sgld + sigma_t * gaussian_grid(np.shape(x_sgld), stream)
    return prior.denoise(ds, x_t, sigma_t)


def mo(
    ds: prior.PriorDataset,
    op: ForwardOperator,
    y,
    x_init: np.ndarray,
    cfg: MoConfig,
    sigma_t: float,
    eta_i: float,
    stream: RngStream,
) -> np.ndarray:
    """Inner optimisation from ``x_init`` followed by one prior query.

    ``stream`` identifies the (seed, run, step); the two stages use the
    purposes ``"sgld"`` and ``"prior"`` under it.
    """
    x_sgld = run_inner_opt(op, y, x_init, cfg, eta_i, stream.at(purpose="sgld"))
    return prior_query(ds, x_sgld, sigma_t, stream.at(purpose="prior"))
