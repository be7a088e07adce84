"""Gaussian d-sparse models: densities and closed-form M-step updates.

Both the simple model (``Sigma_i = sigma_i^2 I``) and the spatial model
(``Sigma_i = sigma_i^2 R(omega_i)``) are handled here.  The spatial model
is expressed through per-signal whitening matrices ``winv_i = L_i^{-1}``
with ``L_i L_i' = R(omega_i)``; ``winv = None`` means ``R = I``.
"""

from __future__ import annotations

import numpy as np

from .core import AtomUnusedError, DegenerateSignalError, InvalidArgumentError, NumericFailureError
from .spatial import PrecisionFactor, factorize_batch, triangular_inverse_batch

LOG_2PI = float(np.log(2 * np.pi))
SIGMA2_FLOOR = 1e-12
RIDGE = 1e-8


# ---------------------------------------------------------------------------
# single-signal operations

def log_density_gaussian(x, eta, precision):
    """``log N(x | eta, Sigma)`` with ``precision`` a :class:`PrecisionFactor` of Sigma."""
    x = np.asarray(x, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if x.shape != eta.shape or x.shape[0] != precision.m:
        raise InvalidArgumentError("dimension mismatch")
    if not np.isfinite(precision.logdet):
        raise NumericFailureError("covariance is not positive definite")
    return -0.5 * (precision.quad(x - eta) + x.size * LOG_2PI + precision.logdet)


def _sigma2_from_quads(quads, w, floor):
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or np.any(w > 1) or w.sum() > 1 + 1e-8:
        raise InvalidArgumentError("responsibilities must lie in [0, 1] and sum to at most 1")
    if not np.any(w > 0):
        raise DegenerateSignalError("all-zero responsibility row")
    return max(float(np.dot(w, quads)), floor)


def update_sigma2_simple(x, etas, w, floor=SIGMA2_FLOOR):
    """``(1/m) sum_j w_j ||x - eta_j||^2``, floored."""
    x = np.asarray(x, dtype=float)
    r = x[None, :] - np.atleast_2d(etas)
    return _sigma2_from_quads(np.sum(r * r, axis=1) / x.size, w, floor)


def update_sigma2_spatial(x, etas, w, R_factor, floor=SIGMA2_FLOOR):
    """``(1/m) sum_j w_j r_j' R^{-1} r_j``, floored."""
    x = np.asarray(x, dtype=float)
    r = x[None, :] - np.atleast_2d(etas)
    z = R_factor.whiten(r.T)
    return _sigma2_from_quads(np.sum(z * z, axis=0) / x.size, w, floor)


def spd_solve(G, b, ridge=RIDGE):
    """Solve ``G a = b`` for a stack of symmetric PSD systems.

    Systems whose Cholesky factorization fails get ``ridge * mean(diag) * I``
    added before solving.
    """
    try:
        np.linalg.cholesky(G)
        return np.linalg.solve(G, b)
    except np.linalg.LinAlgError:
        pass
    Gf = G.reshape((-1,) + G.shape[-2:]).copy()
    bf = b.reshape((-1,) + b.shape[-2:])
    eye = np.eye(G.shape[-1])
    for t in range(Gf.shape[0]):
        try:
            np.linalg.cholesky(Gf[t])
        except np.linalg.LinAlgError:
            scale = max(float(np.mean(np.diag(Gf[t]))), 1.0e-300)
            Gf[t] += ridge * scale * eye
    return np.linalg.solve(Gf, bf).reshape(b.shape)


def update_alpha_wls(x, D, support, precision=None, ridge=RIDGE):
    """Weighted least-squares coefficients on the atoms in ``support``.

    ``precision`` is a :class:`PrecisionFactor` of the covariance (or of the
    correlation matrix; a scalar variance factor cancels) or ``None`` for
    ordinary least squares.  Returns a length-``K`` vector that is exactly zero
    off-support.
    """
    x = np.asarray(x, dtype=float)
    D = np.asarray(D, dtype=float)
    support = np.asarray(support, dtype=bool)
    if support.shape != (D.shape[1],) or not support.any():
        raise InvalidArgumentError("support must be a non-empty mask over the atoms")
    if support.sum() > D.shape[0]:
        raise InvalidArgumentError("support is wider than the signal dimension")
    Dj = D[:, support]
    if precision is not None:
        Dj = precision.whiten(Dj)
        x = precision.whiten(x)
    alpha = np.zeros(D.shape[1])
    alpha[support] = spd_solve(Dj.T @ Dj, (Dj.T @ x)[:, None], ridge)[:, 0]
    return alpha


def update_dictionary_column(k, D, coef, W, X, precisions, normalize=True, ridge=RIDGE):
    """Block-coordinate update of atom ``k`` with all other parameters fixed.

    ``precisions`` is either a length-``n`` vector of scalar precisions
    (``1/sigma_i^2``, simple model) or an ``(n, m, m)`` stack of precision
    matrices.  Only components whose coefficient on atom ``k`` is nonzero
    contribute.  Returns ``(d_k, coef)``; with ``normalize`` the column is
    rescaled to unit norm and the scale moved into ``coef[:, :, k]``.
    """
    D = np.asarray(D, dtype=float)
    coef = np.array(coef, dtype=float)
    W = np.asarray(W, dtype=float)
    X = np.asarray(X, dtype=float)
    P = np.asarray(precisions, dtype=float)
    ck = coef[:, :, k]
    wc = W * ck
    a = np.sum(wc * ck, axis=1)
    if not np.any(a > 0):
        raise AtomUnusedError(k)
    eta_minus_k = coef @ D.T - ck[:, :, None] * D[:, k]
    v = np.einsum("ij,ijm->im", wc, X[:, None, :] - eta_minus_k)
    if P.ndim == 1:
        d_new = (P @ v) / float(P @ a)
    else:
        M = np.einsum("i,iab->ab", a, P)
        rhs = np.einsum("iab,ib->a", P, v)
        d_new = spd_solve(M[None], rhs[None, :, None], ridge)[0, :, 0]
    if normalize:
        s = float(np.linalg.norm(d_new))
        if s > 0:
            d_new = d_new / s
            coef[:, :, k] *= s
    return d_new, coef


# ---------------------------------------------------------------------------
# batched machinery used by the EM driver

def correlation_whiteners(kernel, omega, dist, nugget):
    """Whitening matrices and log-determinants of ``R(omega_i)`` for every signal."""
    chol, logdet = factorize_batch(kernel.matrices(omega, dist), nugget)
    return triangular_inverse_batch(chol), logdet


def whiten_data(X, D, winv):
    if winv is None:
        return X, None
    Xw = np.einsum("imn,in->im", winv, X)
    Dw = winv @ D
    return Xw, Dw


def residual_quads(X, D, coef, winv=None, chunk=64):
    """``r_ij' R_i^{-1} r_ij`` for every signal/component pair, shape ``(n, J)``."""
    n, J, K = coef.shape
    out = np.empty((n, J))
    for lo in range(0, n, chunk):
        sl = slice(lo, min(n, lo + chunk))
        if winv is None:
            r = X[sl, None, :] - coef[sl] @ D.T
        else:
            Xw, Dw = whiten_data(X[sl], D, winv[sl])
            r = Xw[:, None, :] - coef[sl] @ Dw.transpose(0, 2, 1)
        out[sl] = np.einsum("ijm,ijm->ij", r, r)
    return out


def component_log_densities(X, D, coef, sigma2, winv=None, logdet_r=None):
    """``log N(x_i | eta_ij, sigma_i^2 R_i)`` for every pair, shape ``(n, J)``."""
    m = X.shape[1]
    quad = residual_quads(X, D, coef, winv)
    logdet = m * np.log(sigma2)
    if logdet_r is not None:
        logdet = logdet + logdet_r
    return -0.5 * (quad / sigma2[:, None] + (m * LOG_2PI + logdet)[:, None])


def sigma2_update(X, D, coef, W, winv=None, floor=SIGMA2_FLOOR):
    quads = residual_quads(X, D, coef, winv)
    return np.maximum(np.sum(W * quads, axis=1) / X.shape[1], floor)


def alpha_update(X, D, masks, winv=None, ridge=RIDGE):
    """Weighted least-squares coefficients for every signal and support mask."""
    n = X.shape[0]
    J, K = masks.shape
    coef = np.zeros((n, J, K))
    if winv is None:
        G = D.T @ D
        b = X @ D
    else:
        Xw, Dw = whiten_data(X, D, winv)
        G = Dw.transpose(0, 2, 1) @ Dw
        b = np.einsum("imk,im->ik", Dw, Xw)
    pop = masks.sum(axis=1)
    for s in np.unique(pop):
        js = np.flatnonzero(pop == s)
        idx = np.array([np.flatnonzero(masks[j]) for j in js])
        if winv is None:
            Gs = G[idx[:, :, None], idx[:, None, :]][None]
        else:
            Gs = G[:, idx[:, :, None], idx[:, None, :]]
        bs = b[:, idx]
        sol = spd_solve(np.broadcast_to(Gs, (n,) + Gs.shape[1:]).copy(), bs[..., None], ridge)[..., 0]
        rows = np.arange(n)[:, None, None]
        coef[rows, js[None, :, None], idx[None]] = sol
    return coef


def dictionary_sweep(X, D, coef, W, sigma2, winv=None, ridge=RIDGE):
    """Update atoms ``0..K-1`` in order; returns ``(D, coef, unused_atoms)``.

    Each column is the exact maximizer of the expected complete-data
    log-likelihood given the others, then normalized with its scale moved
    into the coefficients.
    """
    D = D.copy()
    coef = coef.copy()
    n, J, K = coef.shape
    T = np.einsum("ij,ijk,ijl->ikl", W, coef, coef)
    s = np.einsum("ij,ijk->ik", W, coef)
    prec = 1.0 / sigma2
    Rinv = None if winv is None else winv.transpose(0, 2, 1) @ winv
    unused = []
    for k in range(K):
        a = T[:, k, k]
        if not np.any(a > 0):
            unused.append(k)
            continue
        v = s[:, k, None] * X - T[:, k, :] @ D.T + a[:, None] * D[:, k]
        if Rinv is None:
            d_new = (prec @ v) / float(prec @ a)
        else:
            M = np.einsum("i,iab->ab", a * prec, Rinv)
            rhs = np.einsum("iab,ib->a", Rinv, v * prec[:, None])
            d_new = spd_solve(M[None], rhs[None, :, None], ridge)[0, :, 0]
        scale = float(np.linalg.norm(d_new))
        if not np.isfinite(scale) or scale == 0:
            continue
        D[:, k] = d_new / scale
        coef[:, :, k] *= scale
        T[:, k, :] *= scale
        T[:, :, k] *= scale
        s[:, k] *= scale
    return D, coef, unused


def q_function_gaussian(state, W, X, winv=None, logdet_r=None):
    """Expected complete-data log-likelihood ``sum_ij w_ij (log pi_j + log f_ij)``."""
    logf = component_log_densities(X, state.dictionary, state.coef, state.sigma2, winv, logdet_r)
    with np.errstate(divide="ignore"):
        logpi = np.log(state.weights)
    terms = W * (logpi[None, :] + logf)
    return float(np.sum(np.where(W > 0, terms, 0.0)))


__all__ = [
    "PrecisionFactor",
    "log_density_gaussian",
    "update_sigma2_simple",
    "update_sigma2_spatial",
    "update_alpha_wls",
    "update_dictionary_column",
    "q_function_gaussian",
]
