"""Correlation kernels, Cholesky factors and the per-signal range update.

The covariance of signal ``i`` is ``sigma_i^2 R(omega_i)`` where ``R`` is
built from the pairwise distance matrix of the shared location grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from .core import InvalidArgumentError, NumericFailureError

EXPONENTIAL = "exponential"
GAUSSIAN_KERNEL = "gaussian"
AUTOREGRESSIVE = "autoregressive"

_ALIASES = {
    "exp": EXPONENTIAL, "exponential": EXPONENTIAL,
    "gauss": GAUSSIAN_KERNEL, "gaussian": GAUSSIAN_KERNEL, "sqexp": GAUSSIAN_KERNEL,
    "ar": AUTOREGRESSIVE, "autoregressive": AUTOREGRESSIVE, "autocorrelated": AUTOREGRESSIVE,
}
_DEFAULT_BOUNDS = {
    EXPONENTIAL: (1e-4, 1e3),
    GAUSSIAN_KERNEL: (1e-4, 1e3),
    AUTOREGRESSIVE: (1.0 + 1e-6, 1e3),
}

DEFAULT_NUGGET = 1e-8
MAX_NUGGET = 1e-4


def distance_matrix(locations):
    """Euclidean distances between the rows of ``locations`` (``(m, p)``)."""
    loc = np.asarray(locations, dtype=float)
    if loc.ndim == 1:
        loc = loc[:, None]
    dist = cdist(loc, loc)
    np.fill_diagonal(dist, 0.0)
    return dist


@dataclass(frozen=True)
class CorrelationKernel:
    family: str = EXPONENTIAL
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        fam = _ALIASES.get(self.family)
        if fam is None:
            raise InvalidArgumentError(f"unknown kernel {self.family!r}")
        lo, hi = _DEFAULT_BOUNDS[fam]
        lo = lo if self.lo is None else float(self.lo)
        hi = hi if self.hi is None else float(self.hi)
        if not (0 < lo < hi < np.inf):
            raise InvalidArgumentError(f"invalid omega bounds [{lo}, {hi}]")
        if fam == AUTOREGRESSIVE and lo <= 1:
            raise InvalidArgumentError("autoregressive omega must exceed 1")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def _check(self, omega):
        omega = np.asarray(omega, dtype=float)
        if np.any(~np.isfinite(omega)) or np.any(omega < self.lo) or np.any(omega > self.hi):
            raise InvalidArgumentError(f"omega outside [{self.lo}, {self.hi}]")
        return omega

    def _raw(self, omega, dist):
        # omega broadcasts against dist; no bounds check
        if self.family == EXPONENTIAL:
            return np.exp(-omega * dist)
        if self.family == GAUSSIAN_KERNEL:
            return np.exp(-omega * dist**2)
        return np.exp(-np.log(omega) * dist)

    def matrix(self, omega, dist):
        return self._raw(float(self._check(omega)), np.asarray(dist, dtype=float))

    def matrices(self, omegas, dist):
        """Stack of ``R(omega_i)`` for a vector of ranges, shape ``(n, m, m)``."""
        omegas = self._check(omegas)
        return self._raw(omegas[:, None, None], np.asarray(dist, dtype=float)[None])

    def default_omega(self, dist):
        dist = np.asarray(dist, dtype=float)
        off = dist[np.triu_indices_from(dist, k=1)]
        off = off[off > 0]
        if self.family == AUTOREGRESSIVE or off.size == 0:
            omega = 2.0
        else:
            med = float(np.median(off))
            omega = 3.0 / med if self.family == EXPONENTIAL else 3.0 / med**2
        return float(np.clip(omega, self.lo, self.hi))


def build_correlation_matrix(kernel, omega, dist):
    if not isinstance(kernel, CorrelationKernel):
        kernel = CorrelationKernel(kernel)
    return kernel.matrix(omega, dist)


@dataclass(frozen=True)
class PrecisionFactor:
    """Lower Cholesky factor of ``A + nugget * mean(diag A) * I``."""

    chol: np.ndarray
    logdet: float
    nugget: float

    @property
    def m(self):
        return self.chol.shape[0]

    def whiten(self, v):
        """``L^{-1} v``; ``||whiten(v)||^2`` is the quadratic form ``v' A^{-1} v``."""
        return solve_triangular(self.chol, v, lower=True, check_finite=False)

    def solve(self, v):
        return solve_triangular(self.chol, self.whiten(v), lower=True, trans="T", check_finite=False)

    def quad(self, v):
        z = self.whiten(v)
        return float(np.sum(z * z))

    def inverse(self):
        return self.solve(np.eye(self.m))

    def matrix(self):
        return self.chol @ self.chol.T


def _escalation(nugget, max_nugget):
    levels = [nugget]
    level = max(nugget, DEFAULT_NUGGET) if nugget == 0 else nugget * 10
    while level <= max_nugget * (1 + 1e-12):
        levels.append(level)
        level *= 10
    return levels


def factorize(A, nugget=DEFAULT_NUGGET, max_nugget=MAX_NUGGET):
    """Cholesky factor of a symmetric positive-definite matrix.

    The nugget is relative to the mean diagonal and is escalated by factors of
    ten up to ``max_nugget`` when the factorization fails.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidArgumentError("factorize needs a square matrix")
    scale = float(np.mean(np.diag(A)))
    if not np.isfinite(scale) or scale <= 0:
        raise NumericFailureError("matrix has a non-positive diagonal")
    eye = np.eye(A.shape[0])
    for level in _escalation(nugget, max_nugget):
        try:
            L = np.linalg.cholesky(A + level * scale * eye)
        except np.linalg.LinAlgError:
            continue
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        if np.isfinite(logdet):
            return PrecisionFactor(L, logdet, level)
    raise NumericFailureError(f"matrix is not positive definite even with nugget {max_nugget}")


def factorize_batch(As, nugget=DEFAULT_NUGGET, max_nugget=MAX_NUGGET):
    """Batched :func:`factorize` on an ``(n, m, m)`` stack.

    Returns ``(chol, logdet)``.  Matrices sharing the base nugget are
    factorized in one LAPACK sweep; failures fall back to escalation.
    """
    As = np.asarray(As, dtype=float)
    m = As.shape[-1]
    scale = np.mean(np.diagonal(As, axis1=1, axis2=2), axis=1)
    shifted = As + (nugget * scale)[:, None, None] * np.eye(m)
    try:
        chol = np.linalg.cholesky(shifted)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        if np.all(np.isfinite(logdet)):
            return chol, logdet
    except np.linalg.LinAlgError:
        pass
    chol = np.empty_like(As)
    logdet = np.empty(As.shape[0])
    for i, A in enumerate(As):
        f = factorize(A, nugget, max_nugget)
        chol[i] = f.chol
        logdet[i] = f.logdet
    return chol, logdet


def triangular_inverse_batch(chol):
    """``L^{-1}`` for each lower factor in the stack."""
    eye = np.eye(chol.shape[-1])
    return np.stack([solve_triangular(L, eye, lower=True, check_finite=False) for L in chol])


# ---------------------------------------------------------------------------
# range parameter update

NEWTON_HALVINGS = 30
# shrinks the widest log-range bracket (about 16) below 1e-8
GOLDEN_ITERS = 45
_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


def newton_ascent(q, omega, lo, hi, rel_step=1e-5):
    """One safeguarded Newton step maximizing ``q`` independently per entry.

    ``q`` maps an ``(n,)`` array of ranges to ``(n,)`` objective values.  The
    score and curvature come from central differences with step
    ``rel_step * omega``.  A Newton step that leaves ``[lo, hi]`` or lowers
    ``q`` is halved up to 30 times; if that fails a golden-section search over
    ``log omega`` in ``[lo, hi]`` is used.  The returned range never has a
    lower objective than ``omega``.

    Returns ``(omega_new, newton_rejected)``.
    """
    omega = np.asarray(omega, dtype=float).copy()
    q0 = q(omega)
    h = rel_step * omega
    center = np.clip(omega, lo + h, hi - h)
    qp, qc, qm = q(center + h), q(center), q(center - h)
    score = (qp - qm) / (2 * h)
    curv = (qp - 2 * qc + qm) / h**2
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.where(curv < 0, -score / curv, np.nan)

    best = omega.copy()
    best_q = q0.copy()
    cand = omega + step
    ok = np.isfinite(cand) & (cand >= lo) & (cand <= hi)
    if ok.any():
        qc_ = _q_subset(q, cand, ok, omega)
        ok &= qc_ >= q0
        best[ok] = cand[ok]
        best_q[ok] = qc_[ok]
    rejected = ~ok

    todo = rejected & np.isfinite(step) & (step != 0)
    t = 0.5
    for _ in range(NEWTON_HALVINGS):
        if not todo.any():
            break
        cand = omega + t * np.where(np.isfinite(step), step, 0.0)
        inb = todo & (cand >= lo) & (cand <= hi)
        if inb.any():
            vals = _q_subset(q, cand, inb, omega)
            good = inb & (vals >= q0)
            best[good] = cand[good]
            best_q[good] = vals[good]
            todo &= ~good
        t *= 0.5

    if todo.any() or (rejected & ~np.isfinite(step)).any():
        need = todo | (rejected & ~np.isfinite(step))
        g, gq = _golden(q, omega, need, lo, hi)
        better = need & (gq > best_q)
        best[better] = g[better]
        best_q[better] = gq[better]
    return best, rejected


def _q_subset(q, cand, mask, fill):
    """Evaluate ``q`` where ``mask`` holds, ``-inf`` elsewhere."""
    x = np.where(mask, cand, fill)
    vals = q(x, mask) if _accepts_mask(q) else q(x)
    return np.where(mask, vals, -np.inf)


def _accepts_mask(q):
    return getattr(q, "accepts_mask", False)


def _golden(q, omega, mask, lo, hi):
    a = np.full(omega.shape, np.log(lo))
    b = np.full(omega.shape, np.log(hi))
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc = _q_subset(q, np.exp(c), mask, omega)
    fd = _q_subset(q, np.exp(d), mask, omega)
    for _ in range(GOLDEN_ITERS):
        left = fc >= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        d_new = np.where(left, c, a + _INVPHI * (b - a))
        c_new = np.where(left, b - _INVPHI * (b - a), d)
        fd_new = np.where(left, fc, np.nan)
        fc_new = np.where(left, np.nan, fd)
        # one fresh evaluation per entry
        x = np.where(left, c_new, d_new)
        fx = _q_subset(q, np.exp(x), mask, omega)
        fc = np.where(left, fx, fc_new)
        fd = np.where(left, fd_new, fx)
        c, d = c_new, d_new
    x = np.exp(np.clip(0.5 * (a + b), np.log(lo), np.log(hi)))
    return x, _q_subset(q, x, mask, omega)


class SpatialSliceQ:
    """Per-signal slice of the expected log-likelihood as a function of range.

    ``Q_i(w) = -1/2 ||L(w)^{-1} F_i||^2 / sigma2_i - 1/2 wsum_i log|R(w)|``
    where ``F_i F_i' = sum_j w_ij r_ij r_ij'``.
    """

    accepts_mask = True

    def __init__(self, kernel, dist, F, wsum, sigma2, nugget=DEFAULT_NUGGET):
        self.kernel = kernel
        self.dist = np.asarray(dist, dtype=float)
        self.F = F
        self.wsum = wsum
        self.sigma2 = sigma2
        self.nugget = nugget

    def __call__(self, omegas, mask=None):
        omegas = np.asarray(omegas, dtype=float)
        idx = np.arange(omegas.size) if mask is None else np.flatnonzero(mask)
        out = np.full(omegas.size, -np.inf)
        if idx.size == 0:
            return out
        R = self.kernel._raw(omegas[idx, None, None], self.dist[None])
        chol, logdet = factorize_batch(R, self.nugget)
        # batched LU on the triangular factors; one LAPACK call for all signals
        z = np.linalg.solve(chol, self.F[idx])
        quad = np.einsum("nij,nij->n", z, z)
        out[idx] = -0.5 * quad / self.sigma2[idx] - 0.5 * self.wsum[idx] * logdet
        return out


def weighted_residual_factor(resid, w):
    """Compact ``F`` with ``F F' = sum_j w_j r_j r_j'`` for each signal.

    ``resid`` is ``(n, J, m)`` and ``w`` is ``(n, J)``.  Only columns with
    positive weight are kept (padded to the widest row).
    """
    n, J, m = resid.shape
    nnz = (w > 0).sum(axis=1)
    width = max(int(nnz.max()), 1)
    order = np.argsort(-w, axis=1, kind="stable")[:, :width]
    ww = np.take_along_axis(w, order, axis=1)
    rr = np.take_along_axis(resid, order[:, :, None], axis=1)
    F = (rr * np.sqrt(np.maximum(ww, 0.0))[:, :, None]).transpose(0, 2, 1)
    return np.ascontiguousarray(F)


def update_omega_newton(omega_t, x, w, etas, sigma2, kernel, dist, nugget=DEFAULT_NUGGET):
    """Safeguarded Newton update of one signal's range parameter.

    Returns ``(omega_new, newton_rejected)``.
    """
    if not isinstance(kernel, CorrelationKernel):
        kernel = CorrelationKernel(kernel)
    kernel._check(omega_t)
    if sigma2 <= 0:
        raise InvalidArgumentError("sigma2 must be positive")
    x = np.asarray(x, dtype=float)
    etas = np.atleast_2d(np.asarray(etas, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    resid = (x[None, :] - etas)[None]
    F = weighted_residual_factor(resid, w[None])
    q = SpatialSliceQ(kernel, dist, F, np.array([w.sum()]), np.array([float(sigma2)]), nugget)
    new, rej = newton_ascent(q, np.array([float(omega_t)]), kernel.lo, kernel.hi)
    return float(new[0]), bool(rej[0])
