"""Synthetic mixtures of sparse signals and recovery/quality metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, orth

from .core import GAUSSIAN, POISSON, SPATIAL, Dataset, InvalidArgumentError, SupportSet
from .spatial import CorrelationKernel, distance_matrix

MAX_ETA = 8.0
LOG_RATE_CAP = 30.0


@dataclass(frozen=True)
class SimSpec:
    family: str = GAUSSIAN
    n: int = 100
    m: int = 100
    K: int = 30
    d: int = 2
    snr: float | None = 2.0
    spatial: bool = False
    kernel: str = "exponential"
    omega: float = 1 / 25
    coef_range: tuple = (1.0, 10.0)
    domain: float = 100.0
    raw_scale: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.m, self.K, self.d) < 1:
            raise InvalidArgumentError("n, m, K and d must be >= 1")
        if self.d > self.K:
            raise InvalidArgumentError("d cannot exceed K")
        if self.family == POISSON:
            if self.snr is not None:
                raise InvalidArgumentError("SNR does not apply to Poisson data")
            if self.spatial:
                raise InvalidArgumentError("spatial noise does not apply to Poisson data")
        elif self.family == GAUSSIAN:
            if self.snr is None or not self.snr > 0:
                raise InvalidArgumentError("SNR must be positive")
        else:
            raise InvalidArgumentError(f"cannot simulate family {self.family!r}")
        lo, hi = self.coef_range
        if lo > hi:
            raise InvalidArgumentError("coef_range must be (low, high) with low <= high")


@dataclass
class GroundTruth:
    dictionary: np.ndarray
    supports: SupportSet
    coef: np.ndarray  # (J, K), one coefficient vector per component
    labels: np.ndarray
    means: np.ndarray  # (n, m) noise-free means or log-rates
    sigma2: np.ndarray | None = None
    omega: float | None = None
    locations: np.ndarray | None = None


def all_supports(K, d):
    """Every mask with between 1 and ``d`` atoms, ordered by size then lexicographically."""
    masks = []
    for s in range(1, d + 1):
        for combo in itertools.combinations(range(K), s):
            g = np.zeros(K, dtype=bool)
            g[list(combo)] = True
            masks.append(g)
    return SupportSet(np.array(masks), d)


def _draw_components(spec, rng):
    D = rng.uniform(0.0, 1.0, size=(spec.m, spec.K))
    D /= np.linalg.norm(D, axis=0)
    S = all_supports(spec.K, spec.d)
    lo, hi = spec.coef_range
    coef = np.where(S.masks, rng.uniform(lo, hi, size=S.masks.shape), 0.0)
    labels = rng.integers(len(S), size=spec.n)
    return D, S, coef, labels


def simulate_gaussian(spec):
    """Draw a Gaussian (optionally spatially correlated) mixture dataset.

    Each component has one fixed coefficient vector shared by all signals
    assigned to it.  Signal ``i`` gets noise variance ``||mean_i|| / SNR``.
    Returns ``(Dataset, GroundTruth)``.
    """
    if spec.family != GAUSSIAN:
        raise InvalidArgumentError("simulate_gaussian needs family='gaussian'")
    rng = np.random.default_rng(spec.seed)
    D, S, coef, labels = _draw_components(spec, rng)
    means = coef[labels] @ D.T
    sigma2 = np.linalg.norm(means, axis=1) / spec.snr
    z = rng.standard_normal((spec.n, spec.m))
    locations = None
    if spec.spatial:
        locations = rng.uniform(0.0, spec.domain, size=(spec.m, 2))
        kern = CorrelationKernel(spec.kernel)
        R = kern.matrix(spec.omega, distance_matrix(locations))
        L = cholesky(R + 1e-10 * np.eye(spec.m), lower=True)
        z = z @ L.T
    X = means + np.sqrt(sigma2)[:, None] * z
    family = SPATIAL if spec.spatial else GAUSSIAN
    data = Dataset(X, family, locations)
    truth = GroundTruth(D, S, coef, labels, means, sigma2,
                        spec.omega if spec.spatial else None, locations)
    return data, truth


def simulate_poisson(spec):
    """Draw a Poisson mixture with log-rates ``D (alpha_j o gamma_j)``.

    Unless ``raw_scale`` is set, the coefficients are shrunk so the largest
    log-rate is at most 8.  Log-rates are capped at 30.
    """
    if spec.family != POISSON:
        raise InvalidArgumentError("simulate_poisson needs family='poisson'")
    rng = np.random.default_rng(spec.seed)
    D, S, coef, labels = _draw_components(spec, rng)
    top = float(np.max(coef @ D.T))
    if not spec.raw_scale and top > MAX_ETA:
        coef = coef * (MAX_ETA / top)
    eta = np.minimum(coef[labels] @ D.T, LOG_RATE_CAP)
    X = rng.poisson(np.exp(eta)).astype(float)
    return Dataset(X, POISSON), GroundTruth(D, S, coef, labels, eta)


def simulate(spec):
    if spec.family == POISSON:
        return simulate_poisson(spec)
    return simulate_gaussian(spec)


def _projector(D):
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or not np.any(D):
        raise InvalidArgumentError("dictionary must be a nonzero 2-D array")
    Q = orth(D, rcond=1e-10)
    return Q @ Q.T


def subspace_distance(D_est, D_true):
    """Normalized Frobenius distance between the orthogonal projectors onto the column spans.

    ``||P_est - P_true||_F / sqrt(2 max(K_est, K_true))``, in ``[0, 1]``.
    """
    D_est = np.asarray(D_est, dtype=float)
    D_true = np.asarray(D_true, dtype=float)
    if D_est.ndim != 2 or D_true.ndim != 2 or D_est.shape[0] != D_true.shape[0]:
        raise InvalidArgumentError("dictionaries must share the signal dimension")
    diff = _projector(D_est) - _projector(D_true)
    k = max(D_est.shape[1], D_true.shape[1])
    return float(min(np.linalg.norm(diff) / np.sqrt(2.0 * k), 1.0))


def mse(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak=255.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    e = mse(a, b)
    if e == 0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / e))


def smooth_test_image(size=64):
    """Deterministic grayscale scene: shaded background, a disc, a dark square and a ripple band."""
    from scipy.ndimage import gaussian_filter

    y, x = np.mgrid[0:size, 0:size] / (size - 1.0)
    img = 70 + 90 * x + 30 * y
    img += 70 * ((x - 0.32) ** 2 + (y - 0.35) ** 2 < 0.04)
    img -= 60 * ((np.abs(x - 0.7) < 0.14) & (np.abs(y - 0.68) < 0.14))
    img += 15 * np.sin(2 * np.pi * 3 * (x + 0.5 * y)) * (y > 0.8)
    return np.clip(np.round(gaussian_filter(img, 1.5)), 0, 255)


def spatial_noise_field(shape, sigma, omega, kernel="exponential", seed=0):
    """Gaussian noise over a pixel grid with covariance ``sigma^2 R(omega)`` on pixel distances."""
    h, w = shape
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    grid = np.column_stack([r.ravel(), c.ravel()]).astype(float)
    R = CorrelationKernel(kernel).matrix(omega, distance_matrix(grid))
    L = cholesky(R + 1e-10 * np.eye(h * w), lower=True)
    z = np.random.default_rng(seed).standard_normal(h * w)
    return sigma * (L @ z).reshape(h, w)
