"""Dense image grids, deterministic reductions and keyed random streams.

Images are plain ``float64`` numpy arrays of shape ``(height, width, channels)``
with pixel values in ``[-1, 1]``.  Every random draw in the package comes from
an :class:`RngStream`, a counter-based Philox generator keyed by
``(seed, run, step, purpose)`` so that results do not depend on call order or
on how work is spread across threads.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "RngStream",
    "as_grid",
    "axpy",
    "check_finite",
    "dot",
    "gaussian_grid",
    "l2_dist_sq",
    "to_uint8",
    "from_uint8",
]


def as_grid(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate and convert ``data`` to a finite float64 ``(H, W, C)`` grid.

    A 2-D array is promoted to a single-channel grid.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W, C) grid, got shape {arr.shape}")
    if min(arr.shape) <= 0:
        raise ValueError(f"grid dimensions must be positive, got {arr.shape}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ValueError(f"shape mismatch: {arr.shape} != {tuple(shape)}")
    check_finite(arr, "grid")
    return arr


def check_finite(arr: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains non-finite values")


def _check_same_shape(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} != {y.shape}")


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a * x + y`` as a new array."""
    _check_same_shape(x, y)
    return a * x + y


def dot(x: np.ndarray, y: np.ndarray) -> float:
    """Inner product of two grids.

    Products are accumulated with :func:`math.fsum`, which returns the correctly
    rounded sum of the products; the result therefore does not depend on
    summation order and repeated calls are bit-identical.
    """
    _check_same_shape(x, y)
    return math.fsum((np.ravel(x) * np.ravel(y)).tolist())


def l2_dist_sq(x: np.ndarray, y: np.ndarray) -> float:
    """Squared Euclidean distance, accumulated like :func:`dot`."""
    _check_same_shape(x, y)
    d = np.ravel(x) - np.ravel(y)
    return math.fsum((d * d).tolist())


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


@dataclasses.dataclass(frozen=True)
class RngStream:
    """Identifier of an independent standard-normal stream.

    Two streams with the same fields produce the same sequence of draws.  With
    ``zeroed=True`` every draw is exactly zero, which switches off injected
    noise in tests while keeping the code path unchanged.
    """

    seed: int
    run: int = 0
    step: int = 0
    purpose: str = "default"
    zeroed: bool = False

    def __post_init__(self):
        for name in ("seed", "run", "step"):
            value = getattr(self, name)
            if not 0 <= value < 2**64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {value}")

    def at(self, **changes) -> "RngStream":
        return dataclasses.replace(self, **changes)

    def generator(self) -> np.random.Generator:
        key = np.random.SeedSequence(
            self.seed, spawn_key=(self.run, self.step, _purpose_key(self.purpose))
        )
        return np.random.Generator(np.random.Philox(key))

    def normal_source(self) -> Callable[[Sequence[int]], np.ndarray]:
        """Return a function drawing successive standard-normal arrays."""
        if self.zeroed:
            return lambda shape: np.zeros(shape)
        gen = self.generator()
        return lambda shape: gen.standard_normal(tuple(shape))


def gaussian_grid(shape: Sequence[int], stream: RngStream) -> np.ndarray:
    """I.i.d. standard-normal grid, deterministic for a given stream."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or min(shape) <= 0:
        raise ValueError(f"shape must have positive dimensions, got {shape}")
    return stream.normal_source()(shape)


def from_uint8(values: np.ndarray) -> np.ndarray:
    """Map 8-bit pixel values to ``[-1, 1]``."""
    return np.asarray(values, dtype=np.float64) / 127.5 - 1.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map ``[-1, 1]`` values to 8-bit pixels (clipped, rounded)."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)
