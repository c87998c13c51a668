import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from voxrecon import metrics as mt


def smooth_image(seed, n=32):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    img = np.zeros((n, n))
    for _ in range(5):
        cx, cy = rng.uniform(4, n - 4, 2)
        th = rng.uniform(0, np.pi)
        f = rng.uniform(0.1, 0.3)
        s = rng.uniform(3, 7)
        env = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        img += rng.uniform(0.3, 1) * env * np.cos(2 * np.pi * f * ((xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)))
    return np.clip(0.5 + 0.4 * img, 0, 1)


def t_cdf_quadrature(t, df):
    """High-precision reference: adaptive quadrature of the Student t density."""
    mpmath.mp.dps = 30
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    dens = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    if t <= 0:
        return float(mpmath.quad(dens, [-mpmath.inf, t]))
    return float(mpmath.mpf(1) / 2 + mpmath.quad(dens, [0, t]))


# -- pearson --------------------------------------------------------------

def test_pearson_identity_and_negation():
    a = np.array([0.3, -1.0, 2.0, 5.0])
    assert mt.pearson(a, a) == pytest.approx(1.0, abs=1e-15)
    assert mt.pearson(a, -a) == pytest.approx(-1.0, abs=1e-15)


def test_pearson_hand_value():
    # n*Sxy - Sx*Sy = 4*34 - 10*11 = 26;  (4*30 - 100) * (4*39 - 121) = 20 * 35
    assert mt.pearson([1, 2, 3, 4], [1, 2, 3, 5]) == pytest.approx(26 / math.sqrt(700), rel=1e-14)


def test_pearson_constant_is_undefined():
    assert math.isnan(mt.pearson([1, 1, 1], [1, 2, 3]))
    with pytest.raises(ValueError):
        mt.pearson([1], [2])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-100, 100)),
       arrays(np.float64, 12, elements=st.floats(-100, 100)),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_affine_invariance(a, b, p, q):
    r = mt.pearson(a, b)
    if math.isnan(r) or np.ptp(b) < 1e-3:
        return
    assert mt.pearson(a, p * b + q) == pytest.approx(r, abs=1e-12)
    assert mt.pearson(a, -p * b + q) == pytest.approx(-r, abs=1e-12)


# -- t tests ------------------------------------------------------------------

def test_ttest_closed_form():
    res = mt.one_sample_ttest([1, 2, 3, 4, 5], 0.0)
    assert res.t == pytest.approx(3 / math.sqrt(0.5), rel=1e-14)
    assert res.p_two_sided == pytest.approx(2 * (1 - t_cdf_quadrature(res.t, 4)), abs=1e-10)


def test_ttest_symmetric_values():
    res = mt.one_sample_ttest([-2, -1, 1, 2], 0.0)
    assert res.t == 0.0 and res.p_two_sided == 1.0 and res.p_one_sided == 0.5


def test_ttest_zero_variance():
    with pytest.raises(mt.ZeroVarianceError):
        mt.one_sample_ttest([3.0, 3.0, 3.0], 3.0)


def test_paired_ttest_errors():
    a = np.array([1.0, 2.0, 4.0])
    with pytest.raises(mt.ZeroVarianceError):
        mt.paired_ttest(a, a)
    with pytest.raises(mt.ZeroVarianceError):
        mt.paired_ttest(a + 0.5, a)


def test_paired_ttest_brute_force():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(15)
    b = a - 0.3 + 0.2 * rng.standard_normal(15)
    d = a - b
    t = d.mean() / (math.sqrt(sum((x - d.mean()) ** 2 for x in d) / 14) / math.sqrt(15))
    res = mt.paired_ttest(a, b)
    assert res.t == pytest.approx(t, rel=1e-12)
    assert res.p_two_sided == pytest.approx(2 * t_cdf_quadrature(-abs(t), 14), abs=1e-10)


PROBES = [(-6.0, 1), (-2.5, 1), (0.3, 1), (4.0, 1), (-3.0, 2), (1.7, 2), (-1.1, 3), (2.9, 4),
          (-0.2, 5), (5.5, 5), (-4.2, 8), (1.0, 10), (-2.0, 14), (3.3, 19), (0.0, 20),
          (-1.8, 30), (2.5, 50), (-0.7, 99), (1.96, 200), (-8.0, 12)]


@pytest.mark.parametrize("t,df", PROBES)
def test_t_cdf_vs_quadrature(t, df):
    assert abs(float(mt.t_cdf(t, df)) - t_cdf_quadrature(t, df)) < 1e-8


# -- pyramid / CW-SSIM ----------------------------------------------------------

def test_pyramid_zero_image():
    for band in mt.complex_pyramid(np.zeros((32, 32))):
        assert np.all(band.coefficients == 0)


def test_pyramid_shapes_halve():
    bands = mt.complex_pyramid(np.zeros((33, 20)), mt.CwssimParams(levels=2))
    shapes = {b.level: b.coefficients.shape for b in bands}
    assert shapes == {0: (33, 20), 1: (17, 10)}
    assert len(bands) == 2 * 4


def test_pyramid_too_small():
    with pytest.raises(ValueError):
        mt.complex_pyramid(np.zeros((7, 32)))


def test_pyramid_impulse_energy():
    params = mt.CwssimParams(levels=1)
    img = np.zeros((32, 32))
    img[16, 16] = 1.0
    energy = sum(np.sum(np.abs(b.coefficients) ** 2) for b in mt.complex_pyramid(img, params))
    oracle = sum(np.sum(np.abs(h) ** 2) for h in mt.gabor_bank(params))
    assert energy > 0
    assert energy == pytest.approx(oracle, rel=1e-12)


def test_pyramid_linearity():
    rng = np.random.default_rng(1)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    for s, u, v in zip(mt.complex_pyramid(a + b), mt.complex_pyramid(a), mt.complex_pyramid(b)):
        assert np.max(np.abs(s.coefficients - (u.coefficients + v.coefficients))) < 1e-12


def test_pyramid_shift_magnitudes():
    img = smooth_image(3)
    shifted = np.roll(img, 1, axis=1)
    params = mt.CwssimParams(levels=1)
    # interior only: the wrapped column and the reflected border are not shifts
    ma = np.concatenate([np.abs(b.coefficients[5:-5, 5:-5]).ravel() for b in mt.complex_pyramid(img, params)])
    mb = np.concatenate([np.abs(b.coefficients[5:-5, 5:-5]).ravel() for b in mt.complex_pyramid(shifted, params)])
    assert np.corrcoef(ma, mb)[0, 1] > 0.95


def test_cwssim_identity():
    img = smooth_image(4)
    assert mt.cwssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_cwssim_shift_robust():
    img = smooth_image(5)
    assert mt.cwssim(img, np.roll(img, 1, axis=1)) >= 0.85


def test_cwssim_shape_mismatch():
    with pytest.raises(ValueError):
        mt.cwssim(np.zeros((32, 32)), np.zeros((32, 31)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cwssim_symmetry_and_range(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16))
    b = smooth_image(seed % 1000, 16)
    s_ab, terms = mt.cwssim(a, b, return_terms=True)
    assert s_ab == mt.cwssim(b, a)
    assert 0 < s_ab <= 1
    for t in terms:
        assert np.all(t > 0) and np.all(t <= 1 + 1e-15)


def test_params_validation():
    with pytest.raises(ValueError):
        mt.CwssimParams(orientations=1)
    with pytest.raises(ValueError):
        mt.CwssimParams(levels=2, level_weights=(0.3, 0.3))
    p = mt.CwssimParams(levels=2, level_weights=(0.25, 0.75))
    img = smooth_image(6)
    assert 0 < mt.cwssim(img, smooth_image(7), p) < 1


# -- chance baseline ------------------------------------------------------------

def test_chance_baseline_below_matched():
    imgs = [smooth_image(s) for s in range(6)]
    base = mt.chance_baseline(imgs, imgs, permutations=50, seed=1)
    assert base.mean < 1.0
    assert base.percentile(1.0) == 100.0


def test_chance_baseline_deterministic():
    imgs = [smooth_image(s) for s in range(4)]
    a = mt.chance_baseline(imgs, imgs, permutations=1, seed=9)
    b = mt.chance_baseline(imgs, imgs, permutations=1, seed=9)
    assert a.samples.tobytes() == b.samples.tobytes()


def test_chance_baseline_errors():
    imgs = [smooth_image(s) for s in range(3)]
    with pytest.raises(ValueError):
        mt.chance_baseline(imgs, imgs, permutations=0)
    with pytest.raises(ValueError):
        mt.chance_baseline(imgs[:1], imgs[:1])


def test_derangements_have_no_fixed_points():
    M = np.eye(5) * 10.0
    base = mt.chance_baseline([None] * 5, [None] * 5, permutations=100, matrix=M)
    assert np.all(base.samples == 0.0)
