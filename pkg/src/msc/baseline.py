"""Classical sparse-coding comparator: OMP encoding with alternating least-squares atom updates (OMP-ALS)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidArgumentError


@dataclass(frozen=True)
class BaselineConfig:
    K: int
    d: int
    n_iter: int = 30
    tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.d < 1 or self.n_iter < 1:
            raise InvalidArgumentError("K, d and n_iter must be >= 1")


def omp_encode(x, D, d, atol=1e-12):
    """Orthogonal matching pursuit with at most ``d`` atoms.

    Each step adds the atom most correlated with the residual and refits all
    selected coefficients by least squares.  Stops early once the residual
    is (numerically) orthogonal to every atom.
    """
    x = np.asarray(x, dtype=float)
    D = np.asarray(D, dtype=float)
    K = D.shape[1]
    coef = np.zeros(K)
    support = []
    r = x.copy()
    scale = max(float(np.linalg.norm(x)), 1.0)
    for _ in range(min(d, K, D.shape[0])):
        corr = np.abs(D.T @ r)
        corr[support] = -1.0
        k = int(np.argmax(corr))
        if corr[k] <= atol * scale:
            break
        support.append(k)
        sol, *_ = np.linalg.lstsq(D[:, support], x, rcond=None)
        r = x - D[:, support] @ sol
        coef[:] = 0.0
        coef[support] = sol
    return coef


def encode_all(X, D, d):
    return np.array([omp_encode(x, D, d) for x in X])


def _refit(X, D, codes):
    out = np.zeros_like(codes)
    for i, c in enumerate(codes):
        s = np.flatnonzero(c)
        if s.size:
            out[i, s], *_ = np.linalg.lstsq(D[:, s], X[i], rcond=None)
    return out


def objective(X, D, codes):
    """Squared reconstruction error ``sum_i ||x_i - D c_i||^2``."""
    return float(np.sum((X - codes @ D.T) ** 2))


def update_atoms(X, D, codes):
    """Least-squares update of each atom in turn, then renormalization.

    Returns ``(D, codes, dead)`` where ``dead`` lists atoms no signal uses.
    """
    D = D.copy()
    codes = codes.copy()
    dead = []
    for k in range(D.shape[1]):
        ck = codes[:, k]
        a = float(ck @ ck)
        if a == 0:
            dead.append(k)
            continue
        R = X - codes @ D.T + np.outer(ck, D[:, k])
        dk = R.T @ ck / a
        s = float(np.linalg.norm(dk))
        if s == 0:
            dead.append(k)
            continue
        D[:, k] = dk / s
        codes[:, k] *= s
    return D, codes, dead


def baseline_fit(X, config, return_trace=False):
    """Alternate OMP encoding and atom updates; returns the dictionary.

    The encoding keeps, per signal, the better of the fresh OMP code and a
    least-squares refit on the previous support, so the squared error never
    increases across outer iterations.
    """
    X = np.asarray(X, dtype=float)
    n, m = X.shape
    if config.d > m:
        raise InvalidArgumentError("d cannot exceed the signal dimension")
    rng = np.random.default_rng(config.seed)
    pick = rng.choice(n, size=config.K, replace=n < config.K)
    D = X[pick].T.copy()
    for k in np.flatnonzero(np.linalg.norm(D, axis=0) == 0):
        D[:, k] = rng.standard_normal(m)
    D /= np.linalg.norm(D, axis=0)
    codes = None
    trace = []
    for _ in range(config.n_iter):
        fresh = encode_all(X, D, config.d)
        if codes is not None:
            old = _refit(X, D, codes)
            keep_old = np.sum((X - old @ D.T) ** 2, axis=1) < np.sum((X - fresh @ D.T) ** 2, axis=1)
            fresh[keep_old] = old[keep_old]
        codes = fresh
        D, codes, dead = update_atoms(X, D, codes)
        if dead:
            err = np.sum((X - codes @ D.T) ** 2, axis=1)
            worst = np.argsort(-err, kind="stable")
            for t, k in enumerate(dead):
                x = X[worst[t % n]]
                if np.linalg.norm(x) > 0:
                    D[:, k] = x / np.linalg.norm(x)
        trace.append(objective(X, D, codes))
        if len(trace) > 1 and trace[-2] - trace[-1] <= config.tol * max(trace[-2], 1e-300):
            break
    if return_trace:
        return D, codes, trace
    return D
