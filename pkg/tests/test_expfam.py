import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy.optimize import minimize

from msc.core import AtomUnusedError, DegenerateSignalError, InvalidArgumentError
from msc.expfam import (
    BBHistory, bb_step_size, component_log_densities, dictionary_ascent, gradient_update_column,
    inverse_link, irls_alpha_batch, irls_alpha_update, log_density_expfam, pointwise_loglik,
    score_dictionary_column,
)
from msc.gaussian import update_alpha_wls


def q_expfam(D, coef, W, X, family, trials=1):
    eta = coef @ D.T
    return float(np.sum(W * np.sum(pointwise_loglik(family, X[:, None, :], eta, trials), axis=2)))


def random_instance(seed, family="poisson", n=4, m=6, K=3, trials=3):
    rng = np.random.default_rng(seed)
    D = rng.uniform(0, 1, (m, K))
    D /= np.linalg.norm(D, axis=0)
    masks = np.array([[1, 0, 0], [0, 1, 1], [1, 0, 1]], bool)[:, :K]
    coef = np.where(masks[None], rng.uniform(0.2, 1.5, (n, len(masks), K)), 0.0)
    if family == "poisson":
        X = rng.poisson(2.0, (n, m)).astype(float)
    else:
        X = rng.integers(0, trials + 1, (n, m)).astype(float)
    W = rng.dirichlet(np.ones(len(masks)), n)
    return D, coef, W, X


# -- pointwise ---------------------------------------------------------------

def test_inverse_link_examples():
    assert inverse_link("poisson", 0.0) == 1.0
    assert inverse_link("binomial", 0.0, trials=1) == 0.5
    assert inverse_link("poisson", 30.5) == pytest.approx(np.exp(30.0))
    assert inverse_link("binomial", np.array([-1e4]))[0] > 0


@given(st.sampled_from(["poisson", "binomial"]), st.floats(-40, 40), st.floats(0, 5))
def test_inverse_link_monotone(family, eta, step):
    a, b = inverse_link(family, eta, 4), inverse_link(family, eta + step, 4)
    assert b >= a


def test_log_density_examples():
    assert log_density_expfam("poisson", [0], [0.0]) == pytest.approx(-1.0)
    assert log_density_expfam("poisson", [2], [0.0]) == pytest.approx(-1 - np.log(2))
    assert log_density_expfam("binomial", [1], [0.0], trials=2) == pytest.approx(np.log(0.5))
    with pytest.raises(InvalidArgumentError):
        log_density_expfam("poisson", [-1], [0.0])
    with pytest.raises(InvalidArgumentError):
        log_density_expfam("gamma", [1], [0.0])


@given(st.sampled_from(["poisson", "binomial"]), st.integers(0, 5),
       st.floats(-1e6, 1e6, allow_nan=False))
def test_log_density_finite_for_finite_eta(family, x, eta):
    assert np.isfinite(log_density_expfam(family, [x], [eta], trials=5))


def test_log_density_matches_scipy():
    from scipy import stats
    eta = np.array([0.3, -1.0, 2.0])
    x = np.array([1, 0, 7])
    assert log_density_expfam("poisson", x, eta) == pytest.approx(stats.poisson.logpmf(x, np.exp(eta)).sum())
    p = 1 / (1 + np.exp(-eta))
    assert log_density_expfam("binomial", [1, 0, 3], eta, trials=4) == pytest.approx(
        stats.binom.logpmf([1, 0, 3], 4, p).sum())


# -- IRLS --------------------------------------------------------------------

def test_irls_fixed_point_at_exact_mean():
    m = 5
    D = np.full((m, 1), 1 / np.sqrt(m))
    alpha = 2.0
    eta = D[:, 0] * alpha
    x = np.exp(eta)  # not integral, but the step only needs the mean
    assert irls_alpha_update(x, D, [True], eta, "poisson")[0] == pytest.approx(alpha, abs=1e-12)


def test_irls_hand_example():
    assert irls_alpha_update([1.0], np.ones((1, 1)), [True], [0.0], "poisson")[0] == pytest.approx(0.0, abs=1e-14)


def glm_oracle(x, Dj):
    nll = lambda a: np.sum(np.exp(Dj @ a) - x * (Dj @ a))
    grad = lambda a: Dj.T @ (np.exp(Dj @ a) - x)
    hess = lambda a: Dj.T @ (np.exp(Dj @ a)[:, None] * Dj)
    return minimize(nll, np.zeros(Dj.shape[1]), jac=grad, hess=hess, method="trust-exact",
                    options={"gtol": 1e-12}).x


def test_irls_converges_to_glm_fit():
    rng = np.random.default_rng(0)
    D = rng.uniform(0, 1, (6, 3))
    D /= np.linalg.norm(D, axis=0)
    sup = np.array([True, False, True])
    x = rng.poisson(np.exp(D[:, sup] @ [1.0, 0.5])).astype(float)
    ref = glm_oracle(x, D[:, sup])
    alpha = np.zeros(3)
    for _ in range(50):
        alpha = irls_alpha_update(x, D, sup, D @ alpha, "poisson")
    assert_allclose(alpha[sup], ref, atol=1e-4)
    assert alpha[1] == 0.0
    # the optimum is a fixed point
    assert_allclose(irls_alpha_update(x, D, sup, D @ alpha, "poisson"), alpha, atol=1e-10)


def test_irls_gaussian_family_is_least_squares():
    rng = np.random.default_rng(1)
    D = rng.standard_normal((7, 3))
    x = rng.standard_normal(7)
    sup = np.array([True, True, False])
    a = irls_alpha_update(x, D, sup, rng.standard_normal(7), "gaussian")
    assert_allclose(a, update_alpha_wls(x, D, sup), rtol=1e-10, atol=1e-14)


def test_irls_degenerate_weights():
    with pytest.raises(DegenerateSignalError):
        irls_alpha_update([0.0], np.ones((1, 1)), [True], [-1e4], "poisson")


def test_irls_batch_matches_single_and_never_lowers_density():
    D, coef, W, X = random_instance(3)
    masks = coef[0] != 0
    new, stuck = irls_alpha_batch(X, D, masks, coef, "poisson")
    before = component_log_densities(X, D, coef, "poisson")
    after = component_log_densities(X, D, new, "poisson")
    assert np.all(after >= before - 1e-12)
    full = np.array([[irls_alpha_update(X[i], D, masks[j], D @ coef[i, j], "poisson")
                      for j in range(len(masks))] for i in range(len(X))])
    # most pairs accept the undamped step
    taken = np.isclose(new, full, rtol=1e-9, atol=1e-12).all(axis=2)
    assert taken.mean() > 0.5
    assert 0 <= stuck <= taken.size - taken.sum()


# -- dictionary --------------------------------------------------------------

def test_score_vanishes_at_perfect_fit():
    D = np.eye(2)
    coef = np.array([[[1.0, 0.5]]])
    X = np.exp(coef @ D.T)[:, 0]
    U = score_dictionary_column(0, D, coef, np.ones((1, 1)), X, "poisson")
    assert_allclose(U, 0.0, atol=1e-12)


def test_score_single_component_is_residual():
    D = np.array([[0.6], [0.8]])
    coef = np.ones((1, 1, 1))
    X = np.array([[2.0, 0.0]])
    U = score_dictionary_column(0, D, coef, np.ones((1, 1)), X, "poisson")
    assert_allclose(U, X[0] - np.exp(D[:, 0]))


@pytest.mark.parametrize("family", ["poisson", "binomial"])
@pytest.mark.parametrize("seed", range(5))
def test_score_matches_finite_differences(family, seed):
    D, coef, W, X = random_instance(seed, family)
    for k in range(D.shape[1]):
        U = score_dictionary_column(k, D, coef, W, X, family, trials=3)
        fd = np.empty(D.shape[0])
        h = 1e-5
        for l in range(D.shape[0]):
            Dp, Dm = D.copy(), D.copy()
            Dp[l, k] += h
            Dm[l, k] -= h
            fd[l] = (q_expfam(Dp, coef, W, X, family, 3) - q_expfam(Dm, coef, W, X, family, 3)) / (2 * h)
        assert_allclose(U, fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max())


def test_score_unused_atom():
    coef = np.zeros((1, 1, 2))
    coef[0, 0, 0] = 1.0
    with pytest.raises(AtomUnusedError):
        score_dictionary_column(1, np.eye(2), coef, np.ones((1, 1)), np.ones((1, 2)), "poisson")


@pytest.mark.parametrize("args, expected", [
    (([0, 0], [1, 0], [0, 0], [2, 0]), 0.5),
    (([0, 0], [1, 0], [1, 1], [1, 1]), 1e-3),
    (([0, 0], [1, 1], [0, 0], [1, -1]), 1e-3),
    ((None, [1, 1], None, [1, -1]), 1e-3),
])
def test_bb_step_size(args, expected):
    assert bb_step_size(*args) == pytest.approx(expected)


def test_gradient_step_one_dimensional_toy():
    # U = x - e^1 = 0.5; the step lands at 1.05 before normalization
    X = np.array([[np.e + 0.5]])
    coef = np.ones((1, 1, 1))
    d, c, ok = gradient_update_column(0, np.ones((1, 1)), coef, np.ones((1, 1)), X, "poisson", tau=0.1)
    assert ok
    assert d[0] == pytest.approx(1.0)
    assert c[0, 0, 0] == pytest.approx(1.05)


def test_gradient_step_zero_score_keeps_column():
    D = np.array([[0.6], [0.8]])
    coef = np.ones((1, 1, 1))
    X = np.exp(D[:, 0])[None]
    d, c, ok = gradient_update_column(0, D, coef, np.ones((1, 1)), X, "poisson", tau=0.1)
    assert_allclose(d, D[:, 0], atol=1e-12)
    assert c[0, 0, 0] == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(1e-4, 10.0))
def test_gradient_step_never_lowers_q(seed, tau):
    D, coef, W, X = random_instance(seed)
    for k in range(D.shape[1]):
        q0 = q_expfam(D, coef, W, X, "poisson")
        d, coef, _ = gradient_update_column(k, D, coef, W, X, "poisson", tau)
        D = D.copy()
        D[:, k] = d
        assert q_expfam(D, coef, W, X, "poisson") >= q0 - 1e-10 * abs(q0)
        assert np.linalg.norm(D[:, k]) == pytest.approx(1.0)


def test_dictionary_ascent_uses_history_and_ascends():
    D, coef, W, X = random_instance(7)
    hist = BBHistory(D.shape[1])
    q = [q_expfam(D, coef, W, X, "poisson")]
    for _ in range(4):
        D, coef, unused, _ = dictionary_ascent(X, D, coef, W, "poisson", history=hist)
        q.append(q_expfam(D, coef, W, X, "poisson"))
    assert unused == []
    assert all(b >= a - 1e-10 * abs(a) for a, b in zip(q, q[1:]))
    assert all(h is not None for h in hist.d)
