"""Exponential-family d-sparse models (Poisson, binomial).

Canonical links throughout: ``eta`` is the log-mean (Poisson) or the logit
of the success probability (binomial).  Linear predictors are clamped to
``[-30, 30]`` before any exponentiation.  The identity-link ``"gaussian"``
case with unit dispersion is accepted by the pointwise helpers so the
IRLS step can be checked against ordinary least squares.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from .core import AtomUnusedError, DegenerateSignalError, InvalidArgumentError
from .gaussian import RIDGE, spd_solve

ETA_CLAMP = 30.0
WEIGHT_FLOOR = 1e-10
BB_FALLBACK = 1e-3
HALVINGS = 30

_LINKS = ("poisson", "binomial", "gaussian")


def _check_family(family):
    if family not in _LINKS:
        raise InvalidArgumentError(f"unknown exponential family {family!r}")


def clamp(eta):
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)


def inverse_link(family, eta, trials=1):
    """Mean as a function of the linear predictor."""
    _check_family(family)
    eta = np.asarray(eta, dtype=float)
    if family == "gaussian":
        return eta.copy()
    e = clamp(eta)
    if family == "poisson":
        return np.exp(e)
    return trials * np.exp(-np.logaddexp(0.0, -e))


def variance(family, eta, trials=1):
    """Second derivative of the cumulant, equal to ``d mu / d eta`` for canonical links."""
    if family == "gaussian":
        return np.ones_like(np.asarray(eta, dtype=float))
    e = clamp(np.asarray(eta, dtype=float))
    if family == "poisson":
        return np.exp(e)
    p = np.exp(-np.logaddexp(0.0, -e))
    return trials * p * (1.0 - p)


def log_base_measure(family, x, trials=1):
    if family == "poisson":
        return -gammaln(x + 1.0)
    if family == "binomial":
        return gammaln(trials + 1.0) - gammaln(x + 1.0) - gammaln(trials - x + 1.0)
    return -0.5 * (x * x + np.log(2 * np.pi))


def pointwise_loglik(family, x, eta, trials=1, base=None):
    """Per-coordinate log-density; broadcasting over leading axes."""
    e = clamp(eta) if family != "gaussian" else eta
    if family == "poisson":
        val = x * e - np.exp(e)
    elif family == "binomial":
        val = x * e - trials * np.logaddexp(0.0, e)
    else:
        val = x * e - 0.5 * e * e
    if base is None:
        base = log_base_measure(family, x, trials)
    return val + base


def _check_counts(family, x, trials):
    x = np.asarray(x, dtype=float)
    if family in ("poisson", "binomial"):
        if np.any(x < 0):
            raise InvalidArgumentError("negative counts")
        if family == "binomial" and np.any(x > trials):
            raise InvalidArgumentError("counts exceed the number of trials")
    return x


def log_density_expfam(family, x, eta, trials=1):
    """Log-density of ``x`` given linear predictor ``eta`` (dispersion 1)."""
    _check_family(family)
    x = _check_counts(family, x, trials)
    return float(np.sum(pointwise_loglik(family, x, np.asarray(eta, dtype=float), trials)))


def irls_alpha_update(x, D, support, eta_t, family, trials=1, ridge=RIDGE):
    """One iteratively-reweighted least-squares step on the atoms in ``support``.

    Working response ``z = eta + (x - mu) / mu'`` and diagonal weights
    ``mu'`` (floored); returns the length-``K`` coefficient vector.
    """
    _check_family(family)
    x = _check_counts(family, x, trials)
    D = np.asarray(D, dtype=float)
    support = np.asarray(support, dtype=bool)
    if support.sum() > D.shape[0]:
        raise InvalidArgumentError("support is wider than the signal dimension")
    eta_t = np.asarray(eta_t, dtype=float)
    mu = inverse_link(family, eta_t, trials)
    wts = variance(family, eta_t, trials)
    if not np.any(wts > WEIGHT_FLOOR):
        raise DegenerateSignalError("all IRLS weights vanish")
    wts = np.maximum(wts, WEIGHT_FLOOR)
    z = eta_t + (x - mu) / wts
    Dj = D[:, support]
    G = Dj.T @ (wts[:, None] * Dj)
    b = Dj.T @ (wts * z)
    alpha = np.zeros(D.shape[1])
    alpha[support] = spd_solve(G, b[:, None], ridge)[:, 0]
    return alpha


def score_dictionary_column(k, D, coef, W, X, family, trials=1):
    """Gradient of the expected complete-data log-likelihood with respect to atom ``k``."""
    ck = coef[:, :, k]
    wc = W * ck
    if not np.any(wc != 0):
        raise AtomUnusedError(k)
    eta = coef @ D.T
    mu = inverse_link(family, eta, trials)
    return np.einsum("ij,ijm->m", wc, X[:, None, :] - mu)


def bb_step_size(d_prev, d_curr, U_prev, U_curr, fallback=BB_FALLBACK):
    """Barzilai-Borwein ratio ``<dd, dU> / ||dU||^2`` with a fixed-step fallback.

    The fallback applies without history, when ``||dU||^2 < 1e-20``, or when
    the ratio is non-finite or non-positive.
    """
    if d_prev is None or U_prev is None:
        return fallback
    dd = np.asarray(d_curr, dtype=float) - np.asarray(d_prev, dtype=float)
    dU = np.asarray(U_curr, dtype=float) - np.asarray(U_prev, dtype=float)
    den = float(np.dot(dU, dU))
    if den < 1e-20:
        return fallback
    tau = float(np.dot(dd, dU)) / den
    if not np.isfinite(tau) or tau <= 0:
        return fallback
    return tau


def _column_slice_q(family, X, base, eta_minus, ck, wgt, d, trials):
    eta = eta_minus + ck[:, None] * d[None, :]
    return float(np.dot(wgt, np.sum(pointwise_loglik(family, X, eta, trials, base), axis=1)))


def gradient_update_column(k, D, coef, W, X, family, tau, trials=1, halvings=HALVINGS):
    """One ascent step ``d_k + tau * U`` on atom ``k``, then renormalization.

    The step is halved while it lowers the column's slice of the expected
    log-likelihood; if no halving helps the column is kept.  Returns
    ``(d_k, coef, accepted)``.
    """
    D = np.asarray(D, dtype=float)
    coef = np.array(coef, dtype=float)
    U = score_dictionary_column(k, D, coef, W, X, family, trials)
    d_new, scale, accepted = _ascend(k, D, coef, W, X, family, trials, U, tau, halvings)
    if accepted:
        coef[:, :, k] *= scale
    return d_new, coef, accepted


def _ascend(k, D, coef, W, X, family, trials, U, tau, halvings, eta=None):
    ck = coef[:, :, k]
    active = (W * ck) != 0
    ii, jj = np.nonzero(active)
    if eta is None:
        eta_minus = coef[ii, jj] @ D.T
    else:
        eta_minus = eta[ii, jj]
    eta_minus = eta_minus - ck[ii, jj][:, None] * D[:, k]
    Xa = X[ii]
    base = log_base_measure(family, Xa, trials)
    wgt = W[ii, jj]
    c = ck[ii, jj]
    d0 = D[:, k]
    q0 = _column_slice_q(family, Xa, base, eta_minus, c, wgt, d0, trials)
    t = float(tau)
    for _ in range(halvings + 1):
        cand = d0 + t * U
        if np.all(np.isfinite(cand)):
            qc = _column_slice_q(family, Xa, base, eta_minus, c, wgt, cand, trials)
            if qc >= q0:
                s = float(np.linalg.norm(cand))
                if s > 0:
                    return cand / s, s, True
        t *= 0.5
    return d0.copy(), 1.0, False


# ---------------------------------------------------------------------------
# batched machinery used by the EM driver

def component_log_densities(X, D, coef, family, trials=1, base=None, chunk=64):
    n, J, K = coef.shape
    if base is None:
        base = log_base_measure(family, X, trials)
    out = np.empty((n, J))
    for lo in range(0, n, chunk):
        sl = slice(lo, min(n, lo + chunk))
        eta = coef[sl] @ D.T
        out[sl] = np.sum(pointwise_loglik(family, X[sl, None, :], eta, trials, base[sl, None, :]), axis=2)
    return out


def irls_alpha_batch(X, D, masks, coef, family, trials=1, ridge=RIDGE, halvings=HALVINGS):
    """One safeguarded IRLS step for every signal/component pair.

    Where the full step lowers the pair's log-density it is halved (up to
    ``halvings`` times); if none helps the old coefficients are kept.
    """
    n = X.shape[0]
    J, K = masks.shape
    base = log_base_measure(family, X, trials)
    eta = coef @ D.T
    mu = inverse_link(family, eta, trials)
    wts = np.maximum(variance(family, eta, trials), WEIGHT_FLOOR)
    z = eta + (X[:, None, :] - mu) / wts
    new = np.zeros_like(coef)
    pop = masks.sum(axis=1)
    rows = np.arange(n)[:, None, None]
    for s in np.unique(pop):
        js = np.flatnonzero(pop == s)
        idx = np.array([np.flatnonzero(masks[j]) for j in js])
        Ds = D[:, idx].transpose(1, 0, 2)  # (J_s, m, s)
        wz = wts[:, js]
        G = np.einsum("jms,ijm,jmt->ijst", Ds, wz, Ds)
        b = np.einsum("jms,ijm->ijs", Ds, wz * z[:, js])
        new[rows, js[None, :, None], idx[None]] = spd_solve(G, b[..., None], ridge)[..., 0]

    old_ll = np.sum(pointwise_loglik(family, X[:, None, :], eta, trials, base[:, None, :]), axis=2)
    out = coef.copy()
    todo = np.ones((n, J), dtype=bool)
    t = 1.0
    for _ in range(halvings + 1):
        cand = coef + t * (new - coef)
        ll = np.sum(pointwise_loglik(family, X[:, None, :], cand @ D.T, trials, base[:, None, :]), axis=2)
        good = todo & np.isfinite(ll) & (ll >= old_ll)
        out[good] = cand[good]
        todo &= ~good
        if not todo.any():
            break
        t *= 0.5
    return out, int(todo.sum())


class BBHistory:
    """Per-atom memory of the previous column and score for Barzilai-Borwein steps."""

    def __init__(self, K):
        self.d = [None] * K
        self.U = [None] * K

    def reset(self, k):
        self.d[k] = None
        self.U[k] = None


def dictionary_ascent(X, D, coef, W, family, trials=1, history=None, halvings=HALVINGS):
    """One gradient-ascent step per atom with Barzilai-Borwein step sizes.

    The step length is the BB ratio for minimizing the negated objective.
    Returns ``(D, coef, unused_atoms, rejected_steps)``.
    """
    D = D.copy()
    coef = coef.copy()
    K = D.shape[1]
    if history is None:
        history = BBHistory(K)
    eta = coef @ D.T
    unused = []
    rejected = 0
    for k in range(K):
        ck = coef[:, :, k]
        wc = W * ck
        if not np.any(wc != 0):
            unused.append(k)
            history.reset(k)
            continue
        mu = inverse_link(family, eta, trials)
        U = np.einsum("ij,ijm->m", wc, X[:, None, :] - mu)
        prev_U = None if history.U[k] is None else -history.U[k]
        tau = bb_step_size(history.d[k], D[:, k], prev_U, -U)
        history.d[k] = D[:, k].copy()
        history.U[k] = U
        d_new, scale, ok = _ascend(k, D, coef, W, X, family, trials, U, tau, halvings, eta=eta)
        if not ok:
            rejected += 1
            continue
        eta += ck[:, :, None] * (d_new * scale - D[:, k])[None, None, :]
        D[:, k] = d_new
        coef[:, :, k] *= scale
    return D, coef, unused, rejected
