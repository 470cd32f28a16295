import numpy as np
import pytest

from measopt.grid import RngStream
from measopt.operators import (
    Measurement,
    apply_noise,
    data_fit_grad,
    gaussian_kernel,
    load_measurement,
    make_analytic_nonlinear_blur,
    make_box_inpaint,
    make_downsample,
    make_gaussian_blur,
    make_hdr,
    make_identity,
    make_motion_blur,
    make_phase_retrieval,
    make_random_inpaint,
    motion_kernel,
    operator_from_dict,
    residual_and_grad,
    save_measurement,
)

from oracles import circulant_blur_matrix, dense_matrix, naive_dft2

SHAPE = (8, 8, 2)

LINEAR = {
    "identity": lambda s: make_identity(s),
    "random_inpaint": lambda s: make_random_inpaint(s, 0.3, 5),
    "box_inpaint": lambda s: make_box_inpaint(s, 4, 3, 2),
    "downsample_bicubic": lambda s: make_downsample(s, 4, "bicubic"),
    "downsample_average": lambda s: make_downsample(s, 2, "average"),
    "gaussian_blur": lambda s: make_gaussian_blur(s, 5, 1.5),
    "motion_blur": lambda s: make_motion_blur(s, 7, 0.5, 3),
}
NONLINEAR = {
    "phase_retrieval": lambda s: make_phase_retrieval(s, 2.0),
    "hdr": lambda s: make_hdr(s, 2.0),
    "nonlinear_blur": lambda s: make_analytic_nonlinear_blur(s, 5, 1.5, 1.3),
}
ALL = {**LINEAR, **NONLINEAR}


@pytest.mark.parametrize("name", sorted(LINEAR))
def test_adjoint_identity(rng, name):
    op = LINEAR[name](SHAPE)
    assert op.is_linear
    for _ in range(100):
        x = rng.standard_normal(op.in_shape)
        v = rng.standard_normal(op.out_shape)
        ax = op(x)
        lhs = float((ax * v).sum())
        rhs = float((x * op.vjp(None, v)).sum())
        assert abs(lhs - rhs) <= 1e-10 * (np.linalg.norm(ax) * np.linalg.norm(v) + 1)


def _objective(op, x, y, tau):
    r = op(x) - y
    return float((r * r).sum()) / (2 * tau * tau)


def _away_from_clip(rng, shape, factor, margin=1e-3):
    x = rng.uniform(-0.9, 0.9, size=shape)
    bad = np.abs(np.abs(factor * x) - 1.0) < margin
    x[bad] = 0.0
    return x


@pytest.mark.parametrize("name", sorted(ALL))
def test_data_fit_grad_directional_differences(rng, name):
    op = ALL[name](SHAPE)
    tau = 0.1
    for _ in range(10):
        if name == "hdr":
            x = _away_from_clip(rng, op.in_shape, 2.0)
        else:
            x = rng.uniform(-1, 1, size=op.in_shape)
        y = op(rng.uniform(-1, 1, size=op.in_shape)) + 0.05 * rng.standard_normal(op.out_shape)
        u = rng.standard_normal(op.in_shape)
        h = 1e-6 if name == "hdr" else 1e-5
        fd = (_objective(op, x + h * u, y, tau) - _objective(op, x - h * u, y, tau)) / (2 * h)
        an = float((data_fit_grad(op, x, y, tau) * u).sum())
        assert abs(fd - an) <= 1e-5 * abs(an)


@pytest.mark.parametrize("name", sorted(LINEAR))
def test_linear_grad_matches_dense_matrix(rng, name):
    op = LINEAR[name]((8, 8, 1))
    a = dense_matrix(op)
    x = rng.standard_normal(op.in_shape)
    y = rng.standard_normal(op.out_shape)
    tau = 0.01
    ref = a.T @ (a @ x.ravel() - y.ravel()) / tau**2
    got = data_fit_grad(op, x, y, tau).ravel()
    assert np.max(np.abs(got - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))


# -- masks ------------------------------------------------------------------


def test_keep_everything_is_identity(rng):
    op = make_random_inpaint(SHAPE, 1.0, 0)
    x = rng.standard_normal(SHAPE)
    assert np.array_equal(op(x), x.reshape(-1, 2))


def test_mask_fixed_by_seed():
    a = make_random_inpaint(SHAPE, 0.3, 11)
    b = make_random_inpaint(SHAPE, 0.3, 11)
    c = make_random_inpaint(SHAPE, 0.3, 12)
    assert np.array_equal(a.mask, b.mask)
    assert not np.array_equal(a.mask, c.mask)


def test_random_mask_validation():
    with pytest.raises(ValueError):
        make_random_inpaint(SHAPE, 0.0, 0)
    with pytest.raises(ValueError):
        make_random_inpaint(SHAPE, 1.5, 0)
    with pytest.raises(ValueError, match="keeps no pixel"):
        make_random_inpaint((1, 1, 1), 1e-9, 0)


def test_box_geometry(rng):
    op = make_box_inpaint((32, 32, 1), 16, 16, 9)
    top, left = op.box
    assert (~op.mask).sum() == 256
    assert not op.mask[top : top + 16, left : left + 16].any()
    x = rng.standard_normal((8, 8, 1))
    assert np.array_equal(make_box_inpaint((8, 8, 1), 0, 0, 0)(x), x.reshape(-1, 1))
    with pytest.raises(ValueError):
        make_box_inpaint((8, 8, 1), 9, 2, 0)
    with pytest.raises(ValueError):
        make_box_inpaint((8, 8, 1), 8, 8, 0)


def test_masking_is_one_lipschitz(rng):
    op = make_random_inpaint(SHAPE, 0.4, 1)
    for _ in range(20):
        a, b = rng.standard_normal((2, *SHAPE))
        assert np.linalg.norm(op(a) - op(b)) <= np.linalg.norm(a - b)


# -- resampling ---------------------------------------------------------------


@pytest.mark.parametrize("kernel", ["bicubic", "average"])
def test_downsample_preserves_constants(kernel):
    op = make_downsample((16, 16, 3), 4, kernel)
    out = op(np.full((16, 16, 3), 0.37))
    assert out.shape == (4, 4, 3)
    assert np.allclose(out, 0.37, rtol=0, atol=1e-15)


def test_downsample_factor_one_is_identity(rng):
    x = rng.standard_normal(SHAPE)
    assert np.allclose(make_downsample(SHAPE, 1)(x), x, rtol=0, atol=1e-15)


def test_downsample_validation():
    with pytest.raises(ValueError):
        make_downsample((10, 8, 1), 4)
    with pytest.raises(ValueError):
        make_downsample((8, 8, 1), 2, "lanczos")


# -- convolution ------------------------------------------------------------


def test_tiny_gaussian_is_identity(rng):
    x = rng.standard_normal(SHAPE)
    assert np.max(np.abs(make_gaussian_blur(SHAPE, 5, 1e-6)(x) - x)) <= 1e-10


@pytest.mark.parametrize("make", [
    lambda s: make_gaussian_blur(s, 9, 3.0),
    lambda s: make_motion_blur(s, 9, 0.5, 4),
])
def test_blur_preserves_constants(make):
    op = make(SHAPE)
    assert np.allclose(op(np.full(SHAPE, -0.4)), -0.4, rtol=0, atol=1e-14)


@pytest.mark.parametrize("ksize,sigma", [(3, 0.8), (5, 3.0), (9, 3.0)])
def test_blur_matches_dense_circulant(rng, ksize, sigma):
    op = make_gaussian_blur((8, 8, 1), ksize, sigma)
    mat = circulant_blur_matrix(gaussian_kernel(ksize, sigma), 8, 8)
    x = rng.standard_normal((8, 8, 1))
    assert np.max(np.abs(op(x).ravel() - mat @ x.ravel())) <= 1e-12


def test_motion_kernel_properties():
    k = motion_kernel(9, 0.5, 7)
    assert k.shape == (9, 9) and np.all(k >= 0)
    assert abs(k.sum() - 1.0) <= 1e-15
    assert np.array_equal(k, motion_kernel(9, 0.5, 7))
    assert not np.array_equal(k, motion_kernel(9, 0.5, 8))
    op = make_motion_blur((8, 8, 1), 9, 0.5, 7)
    mat = circulant_blur_matrix(k, 8, 8)
    x = np.random.default_rng(0).standard_normal((8, 8, 1))
    assert np.max(np.abs(op(x).ravel() - mat @ x.ravel())) <= 1e-12


@pytest.mark.parametrize("make", [make_gaussian_blur, make_analytic_nonlinear_blur])
def test_even_kernel_rejected(make):
    with pytest.raises(ValueError):
        make(SHAPE, 4, 1.0)
    with pytest.raises(ValueError):
        make_motion_blur(SHAPE, 6, 0.5, 0)


# -- phase retrieval --------------------------------------------------------


def test_phase_retrieval_zero_in_zero_out():
    op = make_phase_retrieval(SHAPE, 2.0)
    assert op.out_shape == (16, 16, 2)
    assert not op(np.zeros(SHAPE)).any()


def test_phase_retrieval_point_reflection_symmetry(rng):
    op = make_phase_retrieval(SHAPE, 2.0)
    x = rng.standard_normal(SHAPE)
    padded = op.pad(x)
    # point reflection on the periodic padded frame: p[r, c] -> p[-r, -c]
    reflected = np.roll(padded[::-1, ::-1], shift=(1, 1), axis=(0, 1))
    assert np.max(np.abs(op(x) - np.abs(np.fft.fft2(reflected, axes=(0, 1), norm="ortho")))) <= 1e-12
    # a 180 degree turn of the image itself gives the same magnitudes too
    assert np.max(np.abs(op(x) - op(x[::-1, ::-1]))) <= 1e-12


@pytest.mark.parametrize("oversample", [1.0, 1.5, 2.0])
def test_phase_retrieval_against_naive_dft(rng, oversample):
    op = make_phase_retrieval((4, 4, 1), oversample)
    x = rng.standard_normal((4, 4, 1))
    ref = np.abs(naive_dft2(op.pad(x)[:, :, 0]))
    assert np.max(np.abs(op(x)[:, :, 0] - ref)) <= 1e-10


def test_phase_retrieval_vjp_matches_complex_formula(rng):
    op = make_phase_retrieval((5, 6, 2), 2.0)
    x = rng.standard_normal(op.in_shape)
    v = rng.standard_normal(op.out_shape)
    spec = np.fft.fft2(op.pad(x), axes=(0, 1), norm="ortho")
    ref = op.crop(np.fft.ifft2(spec / np.abs(spec) * v, axes=(0, 1), norm="ortho").real)
    assert np.max(np.abs(op.vjp(x, v) - ref)) <= 1e-13


def test_phase_retrieval_validation():
    with pytest.raises(ValueError):
        make_phase_retrieval((5, 5, 1), 1.5)
    with pytest.raises(ValueError):
        make_phase_retrieval(SHAPE, 0.5)


def test_phase_retrieval_zero_bins_stay_finite():
    op = make_phase_retrieval((4, 4, 1), 2.0)
    g = op.vjp(np.zeros((4, 4, 1)), np.ones(op.out_shape))
    assert np.all(np.isfinite(g)) and not g.any()


# -- pointwise nonlinearities -------------------------------------------------


def test_hdr_examples():
    op = make_hdr((1, 2, 1), 2.0)
    x = np.array([[[0.3], [0.8]]])
    assert np.allclose(op(x).ravel(), [0.6, 1.0], rtol=0, atol=1e-15)
    assert np.array_equal(op.vjp(x, np.ones((1, 2, 1))).ravel(), [2.0, 0.0])
    with pytest.raises(ValueError):
        make_hdr(SHAPE, 0.0)


def test_hdr_vjp_against_finite_differences(rng):
    op = make_hdr(SHAPE, 2.0)
    x = _away_from_clip(rng, SHAPE, 2.0)
    v = rng.standard_normal(SHAPE)
    u = rng.standard_normal(SHAPE)
    h = 1e-7
    fd = float((v * (op(x + h * u) - op(x - h * u))).sum()) / (2 * h)
    an = float((op.vjp(x, v) * u).sum())
    assert abs(fd - an) <= 1e-6 * abs(an)


def test_nonlinear_blur_limits(rng):
    x = rng.uniform(-1, 1, SHAPE)
    op = make_analytic_nonlinear_blur(SHAPE, 5, 1.5, 1.0)
    assert not op(np.zeros(SHAPE)).any()
    plain = make_gaussian_blur(SHAPE, 5, 1.5)(x)
    weak = make_analytic_nonlinear_blur(SHAPE, 5, 1.5, 1e-4)(x)
    assert np.max(np.abs(weak - plain)) <= 1e-6
    with pytest.raises(ValueError):
        make_analytic_nonlinear_blur(SHAPE, 5, 1.5, 0.0)


def test_nonlinear_blur_vjp_against_finite_differences(rng):
    op = make_analytic_nonlinear_blur(SHAPE, 5, 1.5, 2.0)
    x = rng.uniform(-1, 1, SHAPE)
    v = rng.standard_normal(SHAPE)
    u = rng.standard_normal(SHAPE)
    h = 1e-6
    fd = float((v * (op(x + h * u) - op(x - h * u))).sum()) / (2 * h)
    an = float((op.vjp(x, v) * u).sum())
    assert abs(fd - an) <= 1e-6 * abs(an)


# -- measurements and gradients ---------------------------------------------


def test_apply_noise(rng):
    clean = rng.standard_normal((50, 2000))
    s = RngStream(4, purpose="measurement")
    assert np.array_equal(apply_noise(clean, 0.0, s).values, clean)
    a = apply_noise(clean, 0.05, s)
    assert np.array_equal(a.values, apply_noise(clean, 0.05, s).values)
    assert abs(np.std(a.values - clean) / 0.05 - 1.0) < 0.01
    assert a.noise_sigma == 0.05 and a.seed == 4
    with pytest.raises(ValueError):
        apply_noise(clean, -0.1, s)


def test_identity_gradient_examples(rng):
    op = make_identity(SHAPE)
    y = rng.standard_normal(SHAPE)
    assert not data_fit_grad(op, y, y, 0.01).any()
    x = rng.standard_normal(SHAPE)
    assert np.array_equal(data_fit_grad(op, x, Measurement(y), 1.0), x - y)


def test_gradient_errors(rng):
    op = make_identity(SHAPE)
    x = rng.standard_normal(SHAPE)
    with pytest.raises(ValueError):
        data_fit_grad(op, x, np.zeros((2, 2, 2)), 0.1)
    with pytest.raises(ValueError):
        data_fit_grad(op, np.zeros((2, 2, 2)), x, 0.1)
    with pytest.raises(ValueError):
        data_fit_grad(op, x, x, 0.0)
    with pytest.raises(FloatingPointError):
        residual_and_grad(op, x, np.full(SHAPE, np.inf), 0.1)


@pytest.mark.parametrize("name", sorted(ALL))
def test_operator_round_trips_through_dict(rng, name):
    op = ALL[name](SHAPE)
    again = operator_from_dict(op.to_dict())
    x = rng.standard_normal(SHAPE)
    assert type(again) is type(op)
    assert np.array_equal(again(x), op(x))


def test_measurement_file_round_trip(tmp_path, rng):
    m = Measurement(rng.standard_normal((7, 3)), 0.05, "random_inpaint", 12)
    path = tmp_path / "y.meas"
    save_measurement(path, m)
    back = load_measurement(path)
    assert np.array_equal(back.values, m.values)
    assert (back.noise_sigma, back.operator_id, back.seed) == (0.05, "random_inpaint", 12)
