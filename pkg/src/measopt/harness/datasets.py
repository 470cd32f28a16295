"""Prior datasets: loading image folders and generating synthetic toy sets."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from ..grid import RngStream, from_uint8, to_uint8
from ..prior import PriorDataset

__all__ = ["SYNTH_KINDS", "load_dataset", "load_image", "save_image", "synth_dataset"]

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm")
SYNTH_KINDS = ("blobs", "bars", "digits")
MAX_RETRIES = 200


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return from_uint8(arr)


def save_image(path, x: np.ndarray) -> None:
    """Write a ``[-1, 1]`` grid as an 8-bit PNG (grayscale or RGB)."""
    pixels = to_uint8(x)
    if pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    Image.fromarray(pixels).save(path, format="PNG")


def load_dataset(directory) -> PriorDataset:
    """Load every lossless image in ``directory`` (sorted by file name)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found in {directory}")
    items = []
    for p in files:
        try:
            items.append(load_image(p))
        except OSError as exc:
            raise ValueError(f"cannot read image {p}: {exc}") from exc
    shapes = {z.shape for z in items}
    if len(shapes) != 1:
        raise ValueError(f"images in {directory} have mixed sizes: {sorted(shapes)}")
    return PriorDataset(items)


def _blobs(gen, h, w, c):
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.zeros((h, w, c))
    for _ in range(gen.integers(2, 5)):
        cy, cx = gen.uniform(0, h), gen.uniform(0, w)
        rad = gen.uniform(0.08, 0.25) * min(h, w)
        amp = gen.uniform(0.6, 1.6, size=c)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2))
        img += bump[:, :, None] * amp
    return np.clip(2.0 * img - 1.0, -1.0, 1.0)


def _bars(gen, h, w, c):
    img = np.full((h, w, c), -1.0)
    for _ in range(gen.integers(2, 5)):
        width = int(gen.integers(2, max(3, min(h, w) // 4)))
        level = gen.uniform(-0.2, 1.0, size=c)
        if gen.random() < 0.5:
            start = int(gen.integers(0, h - width + 1))
            img[start : start + width] = level
        else:
            start = int(gen.integers(0, w - width + 1))
            img[:, start : start + width] = level
    return img


def _digits(gen, h, w, c):
    # a few thick strokes between random control points, like handwriting
    yy, xx = np.mgrid[0:h, 0:w]
    ink = np.zeros((h, w))
    pts = gen.uniform(0.2, 0.8, size=(int(gen.integers(3, 6)), 2)) * (h, w)
    thick = gen.uniform(0.05, 0.09) * min(h, w)
    for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:]):
        dy, dx = y1 - y0, x1 - x0
        t = ((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-12)
        t = np.clip(t, 0.0, 1.0)
        dist2 = (yy - y0 - t * dy) ** 2 + (xx - x0 - t * dx) ** 2
        ink = np.maximum(ink, np.exp(-dist2 / (2 * thick**2)))
    tint = gen.uniform(0.7, 1.0, size=c)
    return np.clip(2.0 * ink[:, :, None] * tint - 1.0, -1.0, 1.0)


_GENERATORS = {"blobs": _blobs, "bars": _bars, "digits": _digits}


def synth_dataset(kind: str, n: int, shape, seed: int) -> PriorDataset:
    """Deterministic synthetic dataset with pairwise gaps above ``0.1 sqrt(d)``.

    Items that land too close to an earlier one are redrawn; after
    ``MAX_RETRIES`` failed draws for one item a ``RuntimeError`` is raised.
    """
    if kind not in _GENERATORS:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}; choose from {SYNTH_KINDS}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    h, w, c = (tuple(shape) + (1,))[:3] if len(shape) == 2 else tuple(shape)
    gen = RngStream(seed, purpose=f"synth-{kind}").generator()
    min_gap = 0.1 * np.sqrt(h * w * c)
    items: list[np.ndarray] = []
    for idx in range(n):
        for _ in range(MAX_RETRIES):
            cand = _GENERATORS[kind](gen, h, w, c)
            if all(np.linalg.norm(cand - z) > min_gap for z in items):
                items.append(cand)
                break
        else:
            raise RuntimeError(
                f"could not draw item {idx} of {kind!r} with gap > {min_gap:.3g} "
                f"after {MAX_RETRIES} tries"
            )
    return PriorDataset(items)


def default_output_root() -> Path:
    return Path(os.environ.get("MEASOPT_OUT", "runs"))
