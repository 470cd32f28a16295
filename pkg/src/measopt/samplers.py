"""Outer diffusion loops: DPS-MO, Red-diff-MO and a plain DPS baseline.

All three walk the EDM grid from ``sigma_max`` down to the terminal ``t = 0``
with one denoiser call per outer step (plus one initial call for the MO
variants).  Random draws are keyed by ``(seed, replica, outer step, purpose)``.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from . import prior
from .grid import RngStream, gaussian_grid
from .mo import MoConfig, mo, prior_query, run_inner_opt
from .operators import ForwardOperator
from .schedule import EdmSchedule, s_dot, s_of, sgld_lr, sigma_dot, sigma_of

__all__ = [
    "SAMPLERS",
    "SamplerRun",
    "dps_baseline",
    "dps_guidance_grad",
    "dps_mo",
    "euler_slope",
    "red_diff_grad",
    "red_diff_mo",
    "sample",
]

SAMPLERS = ("dps-mo", "red-diff-mo", "dps")
MU_OPTIMIZERS = ("adam", "sgd", "momentum")


@dataclasses.dataclass(frozen=True)
class SamplerRun:
    schedule: EdmSchedule = EdmSchedule()
    mo_cfg: MoConfig = MoConfig()
    kind: str = "dps-mo"
    guidance_scale: float = 0.3
    mu_optimizer: str = "adam"
    mu_lr: float = 0.1
    mu_momentum: float = 0.9
    per_step_init: bool = True
    seed: int = 0
    replica: int = 0
    zero_noise: bool = False

    def __post_init__(self):
        if self.kind not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.kind!r}")
        if self.mu_optimizer not in MU_OPTIMIZERS:
            raise ValueError(f"mu_optimizer must be one of {MU_OPTIMIZERS}")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be non-negative")
        if not self.mu_lr > 0:
            raise ValueError("mu_lr must be positive")

    def stream(self, step: int, purpose: str) -> RngStream:
        return RngStream(self.seed, self.replica, step, purpose, zeroed=self.zero_noise)


Trace = Callable[[dict], None]


def euler_slope(x: np.ndarray, x_hat0: np.ndarray, t: float) -> np.ndarray:
    """Probability-flow ODE slope ``(sig'/sig + s'/s) x - (sig' s / sig) x_hat0``."""
    sig, s = sigma_of(t), s_of(t)
    return (sigma_dot(t) / sig + s_dot(t) / s) * x - (sigma_dot(t) * s / sig) * x_hat0


def _euler_step(x, x_hat0, t, t_next):
    if t_next == 0.0:
        # with s = 1, sigma = t the step to t = 0 lands on x_hat0 exactly
        return x_hat0.copy()
    return x + (t_next - t) * euler_slope(x, x_hat0, t)


def _check_finite(x, what, k):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite {what} at outer step {k}")


def _initial_estimate(ds, run: SamplerRun, grid):
    t_top = grid[0]
    x = sigma_of(t_top) * s_of(t_top) * gaussian_grid(ds.shape, run.stream(0, "init"))
    x_hat0 = prior.denoise(ds, x / s_of(t_top), sigma_of(t_top))
    return x, x_hat0


def dps_mo(
    ds: prior.PriorDataset,
    op: ForwardOperator,
    y,
    run: SamplerRun,
    trace: Trace | None = None,
) -> np.ndarray:
    """DPS with an MO call at every outer step; returns ``x_0``.

    With ``run.per_step_init`` off the inner optimisation is solved once from
    the initial estimate and every step only re-queries the prior with that
    fixed solution.
    """
    grid = run.schedule.time_grid()
    n_outer = len(grid) - 1
    x, x_hat0 = _initial_estimate(ds, run, grid)
    cfg = run.mo_cfg
    fixed = None
    if not run.per_step_init:
        eta = sgld_lr(cfg.decay, n_outer, n_outer)
        fixed = run_inner_opt(op, y, x_hat0, cfg, eta, run.stream(0, "sgld"))
    for k in range(n_outer):
        i = n_outer - k
        t, t_next = grid[k], grid[k + 1]
        eta = sgld_lr(cfg.decay, i, n_outer)
        if fixed is None:
            x_hat0 = mo(ds, op, y, x_hat0, cfg, sigma_of(t), eta, run.stream(k, ""))
        else:
            x_hat0 = prior_query(ds, fixed, sigma_of(t), run.stream(k, "prior"))
        x = _euler_step(x, x_hat0, t, t_next)
        _check_finite(x, "iterate", k)
        if trace is not None:
            trace({"k": k, "i": i, "t": t, "eta": eta, "x": x, "x_hat0": x_hat0})
    return x


def red_diff_grad(mu, x_hat0, eps, sigma, s=1.0) -> np.ndarray:
    """Gradient in ``mu`` of ``sigma * sg(eps_hat - eps)^T mu``."""
    x_t = s * mu + s * sigma * eps
    eps_hat = (x_t - s * x_hat0) / (s * sigma)
    return sigma * (eps_hat - eps)


class _MuOptimizer:
    def __init__(self, kind, lr, momentum=0.9, beta2=0.999, eps=1e-8):
        self.kind, self.lr, self.momentum, self.beta2, self.eps = kind, lr, momentum, beta2, eps
        self.m = self.v = None
        self.k = 0

    def step(self, mu, grad):
        self.k += 1
        if self.kind == "sgd":
            return mu - self.lr * grad
        if self.m is None:
            self.m = np.zeros_like(mu)
            self.v = np.zeros_like(mu)
        if self.kind == "momentum":
            self.m = self.momentum * self.m + grad
            return mu - self.lr * self.m
        b1 = self.momentum
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - b1**self.k)
        v_hat = self.v / (1 - self.beta2**self.k)
        return mu - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def red_diff_mo(
    ds: prior.PriorDataset,
    op: ForwardOperator,
    y,
    run: SamplerRun,
    trace: Trace | None = None,
) -> np.ndarray:
    """Red-diff with MO estimates; optimises and returns the mean image ``mu``."""
    grid = run.schedule.time_grid()
    n_outer = len(grid) - 1
    mu = gaussian_grid(ds.shape, run.stream(0, "mu-init"))
    _, x_hat0 = _initial_estimate(ds, run, grid)
    cfg = run.mo_cfg
    opt = _MuOptimizer(run.mu_optimizer, run.mu_lr, run.mu_momentum)
    for k in range(n_outer):
        i = n_outer - k
        t = grid[k]
        sig, s = sigma_of(t), s_of(t)
        eta = sgld_lr(cfg.decay, i, n_outer)
        x_hat0 = mo(ds, op, y, x_hat0, cfg, sig, eta, run.stream(k, ""))
        eps = gaussian_grid(ds.shape, run.stream(k, "red-diff-eps"))
        mu = opt.step(mu, red_diff_grad(mu, x_hat0, eps, sig, s))
        _check_finite(mu, "mu", k)
        if trace is not None:
            trace({"k": k, "i": i, "t": t, "eta": eta, "mu": mu, "x_hat0": x_hat0})
    return mu


def dps_guidance_grad(ds, op: ForwardOperator, y, x_t, sigma):
    """Return ``(x_hat0, grad, residual_norm)`` for ``grad = d|y - A(D(x_t))|^2 / dx_t``."""
    x_hat0 = prior.denoise(ds, x_t, sigma)
    ax, pullback = op.linearize(x_hat0)
    yv = getattr(y, "values", y)
    resid = ax - yv
    grad = 2.0 * prior.denoiser_vjp(ds, x_t, sigma, pullback(resid))
    return x_hat0, grad, float(np.sqrt((resid * resid).sum()))


def dps_baseline(
    ds: prior.PriorDataset,
    op: ForwardOperator,
    y,
    run: SamplerRun,
    trace: Trace | None = None,
) -> np.ndarray:
    """Euler sampling with one likelihood-gradient correction per denoiser call.

    The correction is ``guidance_scale / |y - A(x_hat0)|`` times the gradient
    of the squared residual with respect to ``x_t``.
    """
    grid = run.schedule.time_grid()
    n_outer = len(grid) - 1
    t_top = grid[0]
    x = sigma_of(t_top) * s_of(t_top) * gaussian_grid(ds.shape, run.stream(0, "init"))
    for k in range(n_outer):
        t, t_next = grid[k], grid[k + 1]
        if run.guidance_scale > 0:
            x_hat0, grad, rnorm = dps_guidance_grad(ds, op, y, x, sigma_of(t))
        else:
            x_hat0, grad, rnorm = prior.denoise(ds, x, sigma_of(t)), None, 0.0
        x_next = _euler_step(x, x_hat0, t, t_next)
        if grad is not None:
            scale = run.guidance_scale / rnorm if rnorm > 0 else run.guidance_scale
            x_next = x_next - scale * grad
        x = x_next
        _check_finite(x, "iterate", k)
        if trace is not None:
            trace({"k": k, "i": n_outer - k, "t": t, "x": x, "x_hat0": x_hat0})
    return x


_DISPATCH = {"dps-mo": dps_mo, "red-diff-mo": red_diff_mo, "dps": dps_baseline}


def sample(ds, op, y, run: SamplerRun, trace: Trace | None = None) -> np.ndarray:
    return _DISPATCH[run.kind](ds, op, y, run, trace)
