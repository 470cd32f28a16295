"""Forward measurement operators, their vector-Jacobian products, and noise.

Every operator maps an ``(H, W, C)`` grid to a measurement array and acts on
each channel identically.  ``vjp(x, v)`` returns ``v^T dA/dx`` evaluated at
``x``; for linear operators it is the adjoint and ignores ``x``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Any, Callable

import numpy as np
import scipy.fft as sfft

from .grid import RngStream, check_finite, gaussian_grid

__all__ = [
    "ForwardOperator",
    "Measurement",
    "apply_noise",
    "data_fit_grad",
    "fourier_magnitude",
    "load_measurement",
    "make_analytic_nonlinear_blur",
    "make_box_inpaint",
    "make_downsample",
    "make_gaussian_blur",
    "make_hdr",
    "make_identity",
    "make_motion_blur",
    "make_phase_retrieval",
    "make_random_inpaint",
    "operator_from_dict",
    "residual_and_grad",
    "save_measurement",
]

Shape = tuple[int, int, int]

MAG_EPS = 1e-12


class ForwardOperator:
    """A measurement map ``A`` with its VJP.

    Subclasses implement :meth:`forward` and :meth:`vjp`.  :meth:`linearize`
    returns ``A(x)`` together with a closure computing VJPs at ``x`` so that
    nonlinear operators can share intermediate results across both.
    """

    kind: str = ""
    is_linear: bool = True

    def __init__(self, in_shape, out_shape, params: dict[str, Any]):
        self.in_shape: Shape = tuple(int(s) for s in in_shape)
        self.out_shape: tuple[int, ...] = tuple(int(s) for s in out_shape)
        self.params = dict(params)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x: np.ndarray | None, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def linearize(self, x: np.ndarray) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        return self.forward(x), lambda v: self.vjp(x, v)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "shape": list(self.in_shape), **self.params}

    def _check_in(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.in_shape:
            raise ValueError(f"{self.kind}: input shape {x.shape} != {self.in_shape}")
        return x

    def _check_out(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self.out_shape:
            raise ValueError(f"{self.kind}: cotangent shape {v.shape} != {self.out_shape}")
        return v

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        return f"<{type(self).__name__} {self.in_shape}->{self.out_shape} {args}>"


class IdentityOperator(ForwardOperator):
    kind = "identity"

    def __init__(self, shape):
        super().__init__(shape, shape, {})

    def forward(self, x):
        return self._check_in(x).copy()

    def vjp(self, x, v):
        return self._check_out(v).copy()


def make_identity(shape) -> IdentityOperator:
    return IdentityOperator(shape)


# -- masking ----------------------------------------------------------------


class MaskOperator(ForwardOperator):
    """Selects the pixels where ``mask`` is true (all channels of a pixel)."""

    def __init__(self, shape, mask: np.ndarray, kind: str, params):
        self.kind = kind
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("mask keeps no pixel")
        self.mask = mask
        super().__init__(shape, (int(mask.sum()), shape[2]), params)

    def forward(self, x):
        return self._check_in(x)[self.mask]

    def vjp(self, x, v):
        v = self._check_out(v)
        out = np.zeros(self.in_shape)
        out[self.mask] = v
        return out


def make_random_inpaint(shape, keep_prob: float, mask_seed: int) -> MaskOperator:
    """Keep each pixel independently with probability ``keep_prob``."""
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    h, w, _ = shape
    u = RngStream(mask_seed, purpose="inpaint-mask").generator().random((h, w))
    mask = u < keep_prob
    return MaskOperator(
        shape, mask, "random_inpaint", {"keep_prob": keep_prob, "mask_seed": mask_seed}
    )


def make_box_inpaint(shape, box_h: int, box_w: int, position_seed: int) -> MaskOperator:
    """Hide one ``box_h x box_w`` rectangle at a seeded position."""
    h, w, _ = shape
    if box_h < 0 or box_w < 0:
        raise ValueError("box size must be non-negative")
    if box_h > h or box_w > w:
        raise ValueError(f"box {box_h}x{box_w} does not fit in a {h}x{w} image")
    gen = RngStream(position_seed, purpose="box-position").generator()
    top = int(gen.integers(0, h - box_h + 1))
    left = int(gen.integers(0, w - box_w + 1))
    mask = np.ones((h, w), dtype=bool)
    mask[top : top + box_h, left : left + box_w] = False
    if not mask.any():
        raise ValueError("box covers the whole image")
    op = MaskOperator(
        shape,
        mask,
        "box_inpaint",
        {"box_h": box_h, "box_w": box_w, "position_seed": position_seed},
    )
    op.box = (top, left)
    return op


# -- separable resampling ---------------------------------------------------


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def _resize_matrix(n_in: int, factor: int, kernel: str) -> np.ndarray:
    n_out = n_in // factor
    mat = np.zeros((n_out, n_in))
    if kernel == "average":
        for j in range(n_out):
            mat[j, j * factor : (j + 1) * factor] = 1.0 / factor
        return mat
    # anti-aliased: the cubic is stretched by the factor
    src = np.arange(n_in)
    for j in range(n_out):
        centre = (j + 0.5) * factor - 0.5
        row = _cubic((src - centre) / factor)
        mat[j] = row / row.sum()
    return mat


class DownsampleOperator(ForwardOperator):
    kind = "downsample"

    def __init__(self, shape, factor: int, kernel: str):
        h, w, c = shape
        self.rows = _resize_matrix(h, factor, kernel)
        self.cols = _resize_matrix(w, factor, kernel)
        super().__init__(shape, (h // factor, w // factor, c), {"factor": factor, "kernel": kernel})

    def forward(self, x):
        x = self._check_in(x)
        return np.einsum("ikc,lk->ilc", np.einsum("ij,jkc->ikc", self.rows, x), self.cols)

    def vjp(self, x, v):
        v = self._check_out(v)
        return np.einsum("ilc,lk->ikc", np.einsum("ij,ilc->jlc", self.rows, v), self.cols)


def make_downsample(shape, factor: int, kernel: str = "bicubic") -> DownsampleOperator:
    """Downscale by an integer ``factor`` with a bicubic or box-average kernel."""
    if kernel not in ("bicubic", "average"):
        raise ValueError(f"unknown downsampling kernel {kernel!r}")
    if factor < 1 or shape[0] % factor or shape[1] % factor:
        raise ValueError(f"image {shape[:2]} is not divisible by factor {factor}")
    return DownsampleOperator(shape, factor, kernel)


# -- circular convolution ---------------------------------------------------


def _wrap_kernel(kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    """Place a centred kernel on an ``h x w`` torus with its centre at (0, 0)."""
    kh, kw = kernel.shape
    rows = (np.arange(kh) - kh // 2) % h
    cols = (np.arange(kw) - kw // 2) % w
    out = np.zeros((h, w))
    np.add.at(out, (rows[:, None], cols[None, :]), kernel)
    return out


class ConvolutionOperator(ForwardOperator):
    """Periodic convolution with a fixed kernel, evaluated with real FFTs."""

    def __init__(self, shape, kernel: np.ndarray, kind: str, params):
        self.kind = kind
        self.kernel = np.asarray(kernel, dtype=np.float64)
        h, w, _ = shape
        self.otf = np.fft.rfft2(_wrap_kernel(self.kernel, h, w))[:, :, None]
        super().__init__(shape, shape, params)

    def _filter(self, x, otf):
        h, w, _ = self.in_shape
        return np.fft.irfft2(np.fft.rfft2(x, axes=(0, 1)) * otf, s=(h, w), axes=(0, 1))

    def forward(self, x):
        return self._filter(self._check_in(x), self.otf)

    def vjp(self, x, v):
        return self._filter(self._check_out(v), np.conj(self.otf))


def gaussian_kernel(ksize: int, sigma: float) -> np.ndarray:
    r = np.arange(ksize) - ksize // 2
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _check_ksize(ksize: int) -> None:
    if ksize < 1 or ksize % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {ksize}")


def make_gaussian_blur(shape, ksize: int, blur_sigma: float) -> ConvolutionOperator:
    _check_ksize(ksize)
    if not blur_sigma > 0:
        raise ValueError(f"blur_sigma must be positive, got {blur_sigma}")
    return ConvolutionOperator(
        shape,
        gaussian_kernel(ksize, blur_sigma),
        "gaussian_blur",
        {"ksize": ksize, "blur_sigma": blur_sigma},
    )


def motion_kernel(ksize: int, intensity: float, kernel_seed: int) -> np.ndarray:
    """Rasterised 2-D random-walk trajectory, normalised to unit sum.

    The walk takes ``ceil(ksize * intensity)`` unit steps from the kernel
    centre; its heading drifts by a seeded Gaussian increment each step.  Each
    visited point is splatted bilinearly and clamped to the kernel window.
    """
    gen = RngStream(kernel_seed, purpose="motion-kernel").generator()
    n_steps = max(1, math.ceil(ksize * intensity))
    half = ksize // 2
    kernel = np.zeros((ksize, ksize))
    pos = np.array([float(half), float(half)])
    heading = gen.uniform(0.0, 2.0 * np.pi)
    points = [pos.copy()]
    for _ in range(n_steps):
        heading += gen.normal(0.0, 0.5)
        pos = np.clip(pos + (np.sin(heading), np.cos(heading)), 0.0, ksize - 1.0)
        points.append(pos.copy())
    for r, c in points:
        r0, c0 = int(np.floor(r)), int(np.floor(c))
        fr, fc = r - r0, c - c0
        for dr, wr in ((0, 1 - fr), (1, fr)):
            for dc, wc in ((0, 1 - fc), (1, fc)):
                if wr * wc > 0:
                    kernel[min(r0 + dr, ksize - 1), min(c0 + dc, ksize - 1)] += wr * wc
    return kernel / kernel.sum()


def make_motion_blur(shape, ksize: int, intensity: float, kernel_seed: int) -> ConvolutionOperator:
    _check_ksize(ksize)
    if not intensity > 0:
        raise ValueError(f"intensity must be positive, got {intensity}")
    return ConvolutionOperator(
        shape,
        motion_kernel(ksize, intensity, kernel_seed),
        "motion_blur",
        {"ksize": ksize, "intensity": intensity, "kernel_seed": kernel_seed},
    )


# -- nonlinear operators ----------------------------------------------------


def fourier_magnitude(padded: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DFT magnitude of each channel of an already padded grid."""
    return np.abs(np.fft.fft2(padded, axes=(0, 1), norm="ortho"))


class PhaseRetrievalOperator(ForwardOperator):
    """Magnitudes of the orthonormal DFT of the zero-padded image.

    The padded image is real, so its spectrum is Hermitian and only half of it
    is transformed.  Because ``Re ifft(G)`` only sees the Hermitian part of
    ``G``, the pullback symmetrises the cotangent and runs a real inverse FFT.
    """

    kind = "phase_retrieval"
    is_linear = False

    def __init__(self, shape, oversample: float, pad_shape):
        h, w, c = shape
        self.pad_shape = pad_shape
        self.offset = ((pad_shape[0] - h) // 2, (pad_shape[1] - w) // 2)
        ph, pw = pad_shape
        self._half_w = pw // 2 + 1
        self._neg_r = (-np.arange(ph)) % ph
        self._neg_q = (-np.arange(self._half_w)) % pw
        super().__init__(shape, (*pad_shape, c), {"oversample": oversample})

    def pad(self, x):
        h, w, c = self.in_shape
        out = np.zeros((*self.pad_shape, c))
        r, q = self.offset
        out[r : r + h, q : q + w] = x
        return out

    def crop(self, z):
        h, w, _ = self.in_shape
        r, q = self.offset
        return z[r : r + h, q : q + w]

    def _half_spectrum(self, x):
        planes = np.moveaxis(self.pad(self._check_in(x)), 2, 0)
        return sfft.rfft2(planes, norm="ortho")

    def _unfold(self, half):
        # columns past the half spectrum are conjugate mirrors: X[r, q] = conj X[-r, -q]
        pw = self.pad_shape[1]
        tail = half[:, self._neg_r, pw - self._half_w : 0 : -1]
        return np.moveaxis(np.concatenate([half, tail], axis=2), 0, 2)

    def forward(self, x):
        return self._unfold(np.abs(self._half_spectrum(x)))

    def linearize(self, x):
        half = self._half_spectrum(x)
        mag_half = np.abs(half)
        phase = half / np.maximum(mag_half, MAG_EPS)

        def vjp(v):
            v = np.moveaxis(self._check_out(v), 2, 0)
            keep = v[:, :, : self._half_w]
            sym = 0.5 * (keep + v[:, self._neg_r][:, :, self._neg_q])
            back = sfft.irfft2(phase * sym, s=self.pad_shape, norm="ortho")
            return self.crop(np.moveaxis(back, 0, 2))

        return self._unfold(mag_half), vjp

    def vjp(self, x, v):
        return self.linearize(x)[1](v)


def make_phase_retrieval(shape, oversample: float = 2.0) -> PhaseRetrievalOperator:
    """Fourier magnitudes of the image zero-padded to ``oversample`` times its size."""
    if not oversample >= 1:
        raise ValueError(f"oversample must be >= 1, got {oversample}")
    h, w, _ = shape
    pad = []
    for n in (h, w):
        m = oversample * n
        if abs(m - round(m)) > 1e-9:
            raise ValueError(f"oversampled size {m} is not an integer")
        pad.append(int(round(m)))
    return PhaseRetrievalOperator(shape, oversample, tuple(pad))


class HdrOperator(ForwardOperator):
    kind = "hdr"
    is_linear = False

    def __init__(self, shape, factor: float):
        self.factor = factor
        super().__init__(shape, shape, {"factor": factor})

    def forward(self, x):
        return np.clip(self.factor * self._check_in(x), -1.0, 1.0)

    def vjp(self, x, v):
        x = self._check_in(x)
        v = self._check_out(v)
        # zero subgradient on and beyond the clip boundary
        return np.where(np.abs(self.factor * x) < 1.0, self.factor * v, 0.0)


def make_hdr(shape, factor: float = 2.0) -> HdrOperator:
    """Exposure scaling by ``factor`` followed by clipping to ``[-1, 1]``."""
    if not factor > 0:
        raise ValueError(f"factor must be positive, got {factor}")
    return HdrOperator(shape, factor)


class NonlinearBlurOperator(ForwardOperator):
    """``tanh(gain * blur(x)) / gain``, an analytic saturating blur."""

    kind = "nonlinear_blur"
    is_linear = False

    def __init__(self, shape, ksize, blur_sigma, gain):
        self.blur = make_gaussian_blur(shape, ksize, blur_sigma)
        self.gain = gain
        super().__init__(shape, shape, {"ksize": ksize, "blur_sigma": blur_sigma, "gain": gain})

    def forward(self, x):
        return np.tanh(self.gain * self.blur.forward(x)) / self.gain

    def linearize(self, x):
        t = np.tanh(self.gain * self.blur.forward(x))
        slope = 1.0 - t * t
        return t / self.gain, lambda v: self.blur.vjp(None, self._check_out(v) * slope)

    def vjp(self, x, v):
        return self.linearize(x)[1](v)


def make_analytic_nonlinear_blur(
    shape, ksize: int, blur_sigma: float, gain: float = 1.0
) -> NonlinearBlurOperator:
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    return NonlinearBlurOperator(shape, ksize, blur_sigma, gain)


_FACTORIES: dict[str, Callable[..., ForwardOperator]] = {
    "identity": make_identity,
    "random_inpaint": make_random_inpaint,
    "box_inpaint": make_box_inpaint,
    "downsample": make_downsample,
    "gaussian_blur": make_gaussian_blur,
    "motion_blur": make_motion_blur,
    "phase_retrieval": make_phase_retrieval,
    "hdr": make_hdr,
    "nonlinear_blur": make_analytic_nonlinear_blur,
}


def operator_from_dict(spec: dict[str, Any]) -> ForwardOperator:
    """Rebuild an operator from :meth:`ForwardOperator.to_dict` output."""
    spec = dict(spec)
    kind = spec.pop("kind")
    shape = tuple(spec.pop("shape"))
    if kind not in _FACTORIES:
        raise ValueError(f"unknown operator kind {kind!r}")
    return _FACTORIES[kind](shape, **spec)


# -- measurements -----------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Measurement:
    values: np.ndarray
    noise_sigma: float = 0.0
    operator_id: str = ""
    seed: int | None = None

    def __post_init__(self):
        check_finite(np.asarray(self.values), "measurement")


def apply_noise(
    clean: np.ndarray, noise_sigma: float, stream: RngStream, operator_id: str = ""
) -> Measurement:
    """``y = clean + noise_sigma * eps`` with ``eps`` drawn from ``stream``."""
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be non-negative, got {noise_sigma}")
    clean = np.asarray(clean, dtype=np.float64)
    values = clean if noise_sigma == 0 else clean + noise_sigma * gaussian_grid(clean.shape, stream)
    return Measurement(values, float(noise_sigma), operator_id, stream.seed)


def _values(y) -> np.ndarray:
    return y.values if isinstance(y, Measurement) else np.asarray(y, dtype=np.float64)


def residual_and_grad(op: ForwardOperator, x: np.ndarray, y, tau: float):
    """Return ``(A(x) - y, grad)`` with ``grad`` the gradient of ``|y - A(x)|^2 / (2 tau^2)``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    ax, pullback = op.linearize(x)
    yv = _values(y)
    if ax.shape != yv.shape:
        raise ValueError(f"measurement shape {yv.shape} != operator output {ax.shape}")
    resid = ax - yv
    if not np.all(np.isfinite(resid)):
        raise FloatingPointError("non-finite residual")
    return resid, pullback(resid) / (tau * tau)


def data_fit_grad(op: ForwardOperator, x: np.ndarray, y, tau: float) -> np.ndarray:
    """Gradient of ``|y - A(x)|^2 / (2 tau^2)``; step against it to fit ``y``."""
    return residual_and_grad(op, x, y, tau)[1]


def save_measurement(path, meas: Measurement) -> None:
    """Write a one-line JSON header followed by raw little-endian float64 values."""
    values = np.ascontiguousarray(meas.values, dtype="<f8")
    header = {
        "shape": list(values.shape),
        "operator_id": meas.operator_id,
        "noise_sigma": meas.noise_sigma,
        "seed": meas.seed,
        "dtype": "<f8",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(values.tobytes())


def load_measurement(path) -> Measurement:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    values = np.frombuffer(raw, dtype=header["dtype"]).reshape(header["shape"]).astype(np.float64)
    return Measurement(values, header["noise_sigma"], header["operator_id"], header["seed"])
