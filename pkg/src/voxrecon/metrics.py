"""Correlation, t-tests and complex-wavelet structural similarity (CW-SSIM)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage, special

__all__ = [
    "ZeroVarianceError", "pearson", "t_cdf", "one_sample_ttest", "paired_ttest", "TTestResult",
    "CwssimParams", "Subband", "gabor_bank", "complex_pyramid", "cwssim", "cwssim_matrix",
    "ChanceBaseline", "chance_baseline",
]


class ZeroVarianceError(ValueError):
    pass


def pearson(a, b) -> float:
    """Centered correlation of two vectors; ``nan`` when either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("pearson needs two vectors of equal length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(da @ da)
    nb = np.sqrt(db @ db)
    if na == 0.0 or nb == 0.0:
        return math.nan
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def t_cdf(t, df):
    """Student t CDF (Cephes ``stdtr``; absolute accuracy around 1e-14)."""
    return special.stdtr(df, t)


class TTestResult(NamedTuple):
    t: float
    p_two_sided: float
    p_one_sided: float
    df: int


def one_sample_ttest(values, mu0: float = 0.0) -> TTestResult:
    """Test ``mean(values) == mu0``.

    ``p_one_sided`` is for the alternative ``mean > mu0``.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise ValueError("t-test needs at least two values")
    sd = x.std(ddof=1)
    if sd == 0.0:
        raise ZeroVarianceError("zero sample variance")
    t = (x.mean() - mu0) / (sd / math.sqrt(n))
    df = n - 1
    return TTestResult(float(t), float(min(1.0, 2.0 * t_cdf(-abs(t), df))), float(t_cdf(-t, df)), df)


def paired_ttest(a, b) -> TTestResult:
    """One-sample test of ``a - b`` against zero.

    A constant nonzero difference has zero variance and raises as well.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal shape")
    return one_sample_ttest(a - b, 0.0)


# -- complex pyramid --------------------------------------------------------

@dataclass(frozen=True)
class CwssimParams:
    levels: int = 3
    orientations: int = 4
    window: int = 7
    K: float = 0.03
    level_weights: tuple[float, ...] | None = None
    kernel_radius: int = 4
    sigma: float = 2.0
    frequency: float = math.pi / 2

    def __post_init__(self):
        if self.levels < 1 or self.orientations < 2 or self.window < 1 or self.K <= 0:
            raise ValueError("need levels >= 1, orientations >= 2, window >= 1, K > 0")
        if self.level_weights is not None:
            w = np.asarray(self.level_weights, dtype=float)
            if w.size != self.levels or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ValueError("level_weights must be nonnegative, one per level, summing to 1")

    def weights(self) -> np.ndarray:
        if self.level_weights is None:
            return np.full(self.levels, 1.0 / self.levels)
        return np.asarray(self.level_weights, dtype=float)


@dataclass(frozen=True)
class Subband:
    level: int
    orientation: int
    coefficients: np.ndarray = field(repr=False)


def gabor_bank(params: CwssimParams = CwssimParams()) -> list[np.ndarray]:
    """Zero-mean complex Gabor kernels, unit L2 norm, orientations evenly spaced over 180 degrees."""
    r = params.kernel_radius
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(float)
    env = np.exp(-(xx ** 2 + yy ** 2) / (2 * params.sigma ** 2))
    bank = []
    for o in range(params.orientations):
        theta = math.pi * o / params.orientations
        carrier = np.exp(1j * params.frequency * (xx * math.cos(theta) + yy * math.sin(theta)))
        h = env * carrier
        h = h - env * (h.sum() / env.sum())
        bank.append(h / np.linalg.norm(h))
    return bank


_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _as_plane(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError("CW-SSIM works on single-channel images")
    return img


def complex_pyramid(image, params: CwssimParams = CwssimParams()) -> list[Subband]:
    """Oriented complex band-pass decomposition with symmetric boundaries."""
    img = _as_plane(image)
    need = 2 ** params.levels
    if min(img.shape) < need:
        raise ValueError(f"image {img.shape} too small for {params.levels} levels (needs {need})")
    bank = gabor_bank(params)
    bands = []
    for level in range(params.levels):
        for o, h in enumerate(bank):
            re = ndimage.correlate(img, h.real, mode="reflect")
            im = ndimage.correlate(img, h.imag, mode="reflect")
            bands.append(Subband(level, o, re + 1j * im))
        low = ndimage.correlate1d(img, _BINOMIAL, axis=0, mode="reflect")
        low = ndimage.correlate1d(low, _BINOMIAL, axis=1, mode="reflect")
        img = low[::2, ::2]
    return bands


def _window_sums(x, size):
    return sliding_window_view(x, (size, size)).sum(axis=(-2, -1))


def _subband_score(c, d, window, K):
    size = min(window, *c.shape)
    # cross term c * conj(d) written out so swapping c and d negates the imaginary part exactly
    cross_re = _window_sums(c.real * d.real + c.imag * d.imag, size)
    cross_im = _window_sums(c.imag * d.real - c.real * d.imag, size)
    energy = _window_sums(c.real ** 2 + c.imag ** 2, size) + _window_sums(d.real ** 2 + d.imag ** 2, size)
    terms = (2.0 * np.hypot(cross_re, cross_im) + K) / (energy + K)
    return terms


def cwssim(img_a, img_b, params: CwssimParams = CwssimParams(), return_terms: bool = False):
    """CW-SSIM score in (0, 1]; 1 for identical images."""
    a = _as_plane(img_a)
    b = _as_plane(img_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    pa = complex_pyramid(a, params)
    pb = complex_pyramid(b, params)
    per_level = np.zeros(params.levels)
    all_terms = []
    for ba, bb in zip(pa, pb):
        terms = _subband_score(ba.coefficients, bb.coefficients, params.window, params.K)
        all_terms.append(terms)
        per_level[ba.level] += terms.mean() / params.orientations
    score = float(params.weights() @ per_level)
    return (score, all_terms) if return_terms else score


def cwssim_matrix(recons: Sequence, stimuli: Sequence, params: CwssimParams = CwssimParams()) -> np.ndarray:
    """``M[i, j] = cwssim(recons[i], stimuli[j])``."""
    return np.array([[cwssim(r, s, params) for s in stimuli] for r in recons])


@dataclass(frozen=True)
class ChanceBaseline:
    samples: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.samples.mean())

    @property
    def sd(self) -> float:
        return float(self.samples.std(ddof=1)) if self.samples.size > 1 else 0.0

    def percentile(self, score: float) -> float:
        """Percentage of mismatched-pairing means strictly below ``score``."""
        return 100.0 * float(np.mean(self.samples < score))


def _derangement(n, rng):
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


def chance_baseline(recons, stimuli, permutations: int = 200, seed: int = 0,
                    params: CwssimParams = CwssimParams(), matrix=None) -> ChanceBaseline:
    """Distribution of mean CW-SSIM over random derangements of the pairing."""
    if permutations < 1:
        raise ValueError("permutations must be >= 1")
    if len(recons) != len(stimuli) or len(recons) < 2:
        raise ValueError("need equally long lists of at least two images")
    M = cwssim_matrix(recons, stimuli, params) if matrix is None else np.asarray(matrix)
    n = M.shape[0]
    rng = np.random.default_rng(seed)
    samples = np.array([M[np.arange(n), _derangement(n, rng)].mean() for _ in range(permutations)])
    return ChanceBaseline(samples)
