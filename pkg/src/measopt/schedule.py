"""EDM noise schedule (``s(t) = 1``, ``sigma(t) = t``) and SGLD step-size decay.

The time grid is stored in descending order: position 0 holds ``sigma_max``
and the samplers walk it front to back.  In the outer-loop numbering used by
the samplers the first step is ``i = N`` and the last is ``i = 1``, so grid
position ``k`` corresponds to ``i = N - k``.
"""

from __future__ import annotations

import dataclasses

import numpy as np

__all__ = [
    "EdmSchedule",
    "LrDecay",
    "s_dot",
    "s_of",
    "sgld_lr",
    "sigma_dot",
    "sigma_of",
    "time_grid",
]


@dataclasses.dataclass(frozen=True)
class EdmSchedule:
    sigma_max: float = 80.0
    sigma_min: float = 0.05
    rho: float = 7.0
    n_steps: int = 50
    terminal_zero: bool = True

    def __post_init__(self):
        if not self.sigma_max > self.sigma_min > 0:
            raise ValueError(
                f"need sigma_max > sigma_min > 0, got {self.sigma_max}, {self.sigma_min}"
            )
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.n_steps < 2:
            raise ValueError(f"n_steps must be at least 2, got {self.n_steps}")

    def time_grid(self) -> list[float]:
        return time_grid(self)


def time_grid(s: EdmSchedule) -> list[float]:
    """Descending rho-warped grid from ``sigma_max`` to ``sigma_min`` (+ a final 0)."""
    inv = 1.0 / s.rho
    hi, lo = s.sigma_max**inv, s.sigma_min**inv
    frac = np.arange(s.n_steps, dtype=np.float64) / (s.n_steps - 1)
    grid = ((hi + frac * (lo - hi)) ** s.rho).tolist()
    # pin the endpoints; (a**(1/rho))**rho does not round-trip exactly
    grid[0] = float(s.sigma_max)
    grid[-1] = float(s.sigma_min)
    if s.terminal_zero:
        grid.append(0.0)
    return grid


def _check_t(t: float) -> None:
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")


def sigma_of(t: float) -> float:
    _check_t(t)
    return float(t)


def s_of(t: float) -> float:
    _check_t(t)
    return 1.0


def sigma_dot(t: float) -> float:
    _check_t(t)
    return 1.0


def s_dot(t: float) -> float:
    _check_t(t)
    return 0.0


@dataclasses.dataclass(frozen=True)
class LrDecay:
    """Polynomial decay of the SGLD rate from ``base_eta`` down to ``r * base_eta``."""

    base_eta: float = 5e-5
    r: float = 0.01
    p: float = 2.0

    def __post_init__(self):
        if not self.base_eta > 0:
            raise ValueError(f"base_eta must be positive, got {self.base_eta}")
        if not 0 < self.r <= 1:
            raise ValueError(f"r must lie in (0, 1], got {self.r}")
        if not self.p >= 1:
            raise ValueError(f"p must be >= 1, got {self.p}")


def sgld_lr(d: LrDecay, i: int, n_diffusion: int) -> float:
    """Step size at outer index ``i``: ``eta * (1 + (N-i)/N * (r^(1/p) - 1))^p``.

    ``i = N`` (the first, noisiest step) gives ``eta`` and ``i = 0`` gives
    ``eta * r``.
    """
    if n_diffusion < 1:
        raise ValueError(f"n_diffusion must be positive, got {n_diffusion}")
    if not 0 <= i <= n_diffusion:
        raise ValueError(f"i must lie in [0, {n_diffusion}], got {i}")
    if i == n_diffusion:
        return d.base_eta
    if i == 0:
        # (r^(1/p))^p == r algebraically; avoid the rounding of the power
        return d.base_eta * d.r
    frac = (n_diffusion - i) / n_diffusion
    # written as 1 - frac*c so every operation is monotone in frac under rounding;
    # the clamp keeps it between the pinned endpoints, which the power can miss by an ulp
    value = d.base_eta * (1.0 - frac * (1.0 - d.r ** (1.0 / d.p))) ** d.p
    return min(max(value, d.base_eta * d.r), d.base_eta)
