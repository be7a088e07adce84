import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.stats import chisquare

from msc.core import POISSON, SPATIAL, InvalidArgumentError
from msc.gaussian import component_log_densities, correlation_whiteners
from msc.spatial import CorrelationKernel, distance_matrix
from msc.synth import (
    SimSpec, all_supports, mse, psnr, simulate, smooth_test_image, spatial_noise_field,
    subspace_distance,
)


def test_reference_design_shapes_and_ranges():
    spec = SimSpec(n=100, m=100, K=30, d=2, snr=2, spatial=True, omega=1 / 25, seed=1)
    data, truth = simulate(spec)
    assert data.X.shape == (100, 100) and data.family == SPATIAL
    assert truth.dictionary.shape == (100, 30)
    assert_allclose(np.linalg.norm(truth.dictionary, axis=0), 1.0)
    assert np.all(truth.dictionary >= 0)
    assert len(truth.supports) == 30 + 30 * 29 // 2
    on = truth.coef[truth.supports.masks]
    assert on.min() >= 1.0 and on.max() <= 10.0
    assert np.all(truth.coef[~truth.supports.masks] == 0)
    assert truth.locations.shape == (100, 2)
    assert truth.locations.min() >= 0 and truth.locations.max() <= 100
    assert_allclose(truth.sigma2, np.linalg.norm(truth.means, axis=1) / 2)


def test_poisson_reference_design():
    data, truth = simulate(SimSpec(family=POISSON, n=50, m=100, K=10, d=2, snr=None, seed=0))
    assert data.X.shape == (50, 100) and truth.dictionary.shape == (100, 10)
    assert truth.means.max() <= 8.0 + 1e-12
    assert np.all(data.X == np.round(data.X)) and data.X.min() >= 0


def test_all_supports_order():
    s = all_supports(3, 2)
    assert s.bitstrings() == ["100", "010", "001", "110", "101", "011"]
    assert s.masks.sum(axis=1).max() <= 2


def test_huge_snr_gives_noiseless_signals():
    data, truth = simulate(SimSpec(n=20, m=10, K=4, d=2, snr=1e14, seed=3))
    assert_allclose(data.X, truth.means, atol=1e-5)


@pytest.mark.parametrize("spatial", [False, True])
def test_true_parameter_loglik_matches_expectation(spatial):
    # E[log N(x | mu, S)] = -(m log 2pi + log|S| + m) / 2, sd sqrt(m/2)
    n, m = 400, 12
    data, truth = simulate(SimSpec(n=n, m=m, K=4, d=2, snr=2, spatial=spatial, seed=7))
    coef = truth.coef[truth.labels][:, None, :]
    winv = logdet = None
    if spatial:
        omega = np.full(n, truth.omega)
        winv, logdet = correlation_whiteners(CorrelationKernel("exp"), omega, distance_matrix(truth.locations), 0.0)
    ll = component_log_densities(data.X, truth.dictionary, coef, truth.sigma2, winv, logdet)[:, 0]
    ld = m * np.log(truth.sigma2) + (0.0 if logdet is None else logdet)
    expected = -0.5 * (m * np.log(2 * np.pi) + ld + m)
    se = np.sqrt(m / 2) / np.sqrt(n)
    assert abs(np.mean(ll - expected)) < 3 * se


def test_zero_coefficients_give_unit_rates():
    _, truth = simulate(SimSpec(family=POISSON, n=5, m=4, K=2, d=1, snr=None, coef_range=(0.0, 0.0)))
    assert_allclose(np.exp(truth.means), 1.0)


def test_poisson_draws_match_rate():
    data, truth = simulate(SimSpec(family=POISSON, n=10_000, m=3, K=1, d=1, snr=None,
                                   coef_range=(2.0, 2.0), seed=4))
    rate = np.exp(truth.means[0])
    assert_allclose(data.X.mean(axis=0), rate, rtol=0.02)


def test_component_frequencies_uniform():
    _, truth = simulate(SimSpec(n=10_000, m=3, K=4, d=2, snr=2, seed=5))
    counts = np.bincount(truth.labels, minlength=len(truth.supports))
    assert chisquare(counts).pvalue > 0.001


def test_simulate_is_deterministic():
    a, ta = simulate(SimSpec(n=10, m=6, K=3, d=2, snr=2, spatial=True, seed=11))
    b, tb = simulate(SimSpec(n=10, m=6, K=3, d=2, snr=2, spatial=True, seed=11))
    assert np.array_equal(a.X, b.X) and np.array_equal(ta.locations, tb.locations)


@pytest.mark.parametrize("kwargs", [
    dict(family=POISSON, snr=2.0), dict(family=POISSON, snr=None, spatial=True),
    dict(snr=0.0), dict(n=0), dict(K=2, d=3), dict(family="binomial"),
])
def test_simspec_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        SimSpec(**kwargs)


# -- metrics -----------------------------------------------------------------

def test_subspace_distance_examples():
    D = np.random.default_rng(0).standard_normal((6, 3))
    assert subspace_distance(D, D) == pytest.approx(0.0, abs=1e-12)
    assert subspace_distance(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])) == pytest.approx(1.0)
    with pytest.raises(InvalidArgumentError):
        subspace_distance(np.zeros((3, 2)), D[:3])


def principal_angle_distance(A, B):
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    cos = np.clip(np.linalg.svd(Qa.T @ Qb, compute_uv=False), -1, 1)
    sin2 = np.sum(1 - cos ** 2)
    K = A.shape[1]
    return np.sqrt(2 * sin2) / np.sqrt(2 * K)


@pytest.mark.parametrize("seed", range(5))
def test_subspace_distance_principal_angle_oracle(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
    assert subspace_distance(A, B) == pytest.approx(principal_angle_distance(A, B), abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_subspace_distance_invariances(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((8, 3)), rng.standard_normal((8, 2))
    base = subspace_distance(A, B)
    assert subspace_distance(B, A) == pytest.approx(base, abs=1e-10)
    perm = A[:, rng.permutation(3)] * rng.choice([-1.0, 1.0], 3)
    assert subspace_distance(perm, B) == pytest.approx(base, abs=1e-10)
    M = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    assert subspace_distance(A @ M, B) == pytest.approx(base, abs=1e-8)
    assert 0.0 <= base <= 1.0


def test_mse_psnr_examples():
    a = np.zeros((4, 4))
    assert mse(a, a) == 0.0 and psnr(a, a) == float("inf")
    assert mse(a, a + 2) == 4.0
    assert psnr(a, a + 10) == pytest.approx(28.1308, abs=1e-4)
    with pytest.raises(InvalidArgumentError):
        mse(a, np.zeros(3))


def test_test_image_and_noise_field():
    img = smooth_test_image(64)
    assert img.shape == (64, 64) and img.min() >= 0 and img.max() <= 255
    assert np.array_equal(img, smooth_test_image(64))
    noise = spatial_noise_field((16, 16), 20.0, 0.25, seed=1)
    assert noise.shape == (16, 16)
    assert 10 < noise.std() < 30
    # neighbours are positively correlated under the exponential kernel
    assert np.corrcoef(noise[:, :-1].ravel(), noise[:, 1:].ravel())[0, 1] > 0.4
