"""Shared domain types and support-set algebra.

Signals are stored row-wise: ``X`` has shape ``(n, m)``.  A mixture
component is identified by a binary support mask over the ``K`` atoms; a
:class:`SupportSet` keeps the masks as a ``(J, K)`` boolean array in
insertion order, which fixes component indices (and therefore argmax
tie-breaking) deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

GAUSSIAN = "gaussian"
SPATIAL = "spatial"
POISSON = "poisson"
BINOMIAL = "binomial"
FAMILIES = (GAUSSIAN, SPATIAL, POISSON, BINOMIAL)
EXPFAM = (POISSON, BINOMIAL)


class MSCError(Exception):
    """Base class for library errors."""


class InvalidArgumentError(MSCError, ValueError):
    pass


class NumericFailureError(MSCError, ArithmeticError):
    pass


class DegenerateSignalError(MSCError):
    def __init__(self, message, signal=None):
        super().__init__(message)
        self.signal = signal


class AtomUnusedError(MSCError):
    def __init__(self, atom):
        super().__init__(f"atom {atom} is not used by any component")
        self.atom = atom


@dataclass(frozen=True)
class Dataset:
    """``n`` signals of common length ``m`` from one family.

    ``locations`` (``(m, p)``) is shared by every signal and is required for
    the spatial family.  ``trials`` is the binomial trial count.
    """

    X: np.ndarray
    family: str = GAUSSIAN
    locations: np.ndarray | None = None
    trials: int = 1

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise InvalidArgumentError(f"signals must be a non-empty (n, m) array, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidArgumentError("signals contain non-finite values")
        if self.family not in FAMILIES:
            raise InvalidArgumentError(f"unknown family {self.family!r}")
        if self.family in EXPFAM:
            if np.any(X < 0) or np.any(X != np.round(X)):
                raise InvalidArgumentError(f"{self.family} signals must be non-negative integers")
            if self.family == BINOMIAL:
                if self.trials < 1:
                    raise InvalidArgumentError("binomial trials must be >= 1")
                if np.any(X > self.trials):
                    raise InvalidArgumentError(f"binomial counts exceed trials={self.trials}")
        loc = self.locations
        if loc is not None:
            loc = np.asarray(loc, dtype=float)
            if loc.ndim == 1:
                loc = loc[:, None]
            if loc.shape[0] != X.shape[1]:
                raise InvalidArgumentError(
                    f"locations has {loc.shape[0]} rows but signals have m={X.shape[1]}")
        elif self.family == SPATIAL:
            raise InvalidArgumentError("spatial family requires signal locations")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "locations", loc)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def m(self):
        return self.X.shape[1]


def normalize_columns(D, coef=None):
    """Scale columns of ``D`` to unit norm, pushing the scale into ``coef[..., k]``.

    Zero columns are left untouched.  Returns ``(D, coef)`` as new arrays.
    """
    D = np.array(D, dtype=float)
    norms = np.linalg.norm(D, axis=0)
    scale = np.where(norms > 0, norms, 1.0)
    D /= scale
    if coef is not None:
        coef = np.asarray(coef, dtype=float) * scale
    return D, coef


@dataclass(frozen=True)
class SupportSet:
    """Ordered, duplicate-free collection of support masks at sparsity ``d``."""

    masks: np.ndarray
    d: int

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=bool)
        if masks.ndim != 2 or masks.shape[0] < 1 or masks.shape[1] < 1:
            raise InvalidArgumentError("a support set needs at least one mask over at least one atom")
        pop = masks.sum(axis=1)
        if np.any(pop < 1) or np.any(pop > self.d):
            raise InvalidArgumentError(f"mask popcounts must lie in [1, {self.d}]")
        if len({m.tobytes() for m in masks}) != masks.shape[0]:
            raise InvalidArgumentError("duplicate masks in support set")
        masks.setflags(write=False)
        object.__setattr__(self, "masks", masks)

    def __len__(self):
        return self.masks.shape[0]

    @property
    def K(self):
        return self.masks.shape[1]

    @property
    def total_popcount(self):
        return int(self.masks.sum())

    def bitstrings(self):
        return ["".join("1" if b else "0" for b in m) for m in self.masks]

    @classmethod
    def from_bitstrings(cls, bits, d=None):
        masks = np.array([[c == "1" for c in b] for b in bits], dtype=bool)
        if d is None:
            d = int(masks.sum(axis=1).max())
        return cls(masks, d)

    def index(self):
        """Map from mask bytes to component index."""
        return {m.tobytes(): j for j, m in enumerate(self.masks)}


def init_support_set(K):
    """The singleton masks ``e_1 .. e_K`` at sparsity 1."""
    if K < 1:
        raise InvalidArgumentError("K must be >= 1")
    return SupportSet(np.eye(K, dtype=bool), 1)


def expand_support_set(prev, return_parents=False):
    """Grow every mask by one atom.

    Each mask ``g`` yields ``g + e_l * (1 - g)`` for ``l = 1..K``; for ``l`` in
    ``g`` this is ``g`` itself, so ``prev`` is contained in the result.  The
    first mask to generate a child is recorded as its parent.
    """
    K = prev.K
    seen = {}
    out = []
    parents = []
    for p, g in enumerate(prev.masks):
        for l in range(K):
            child = g.copy()
            child[l] = True
            key = child.tobytes()
            if key not in seen:
                seen[key] = len(out)
                out.append(child)
                parents.append(p)
    S = SupportSet(np.array(out), prev.d + 1)
    if return_parents:
        return S, np.array(parents)
    return S


def prune_support_set(S, W, return_index=False):
    """Keep masks that are the argmax component of at least one signal.

    Ties go to the lowest component index (``np.argmax`` semantics).  Output
    order follows the input order.
    """
    W = np.asarray(W, dtype=float)
    if W.size == 0:
        raise InvalidArgumentError("empty responsibility matrix")
    if W.ndim != 2 or W.shape[1] != len(S):
        raise InvalidArgumentError(f"responsibilities have {W.shape[-1]} columns for {len(S)} masks")
    keep = np.unique(np.argmax(W, axis=1))
    pruned = SupportSet(S.masks[keep], S.d)
    if return_index:
        return pruned, keep
    return pruned


def count_parameters(family, S, n, m, K):
    """BIC parameter count for the simple, spatial or exponential-family model."""
    total = S.total_popcount
    if family == GAUSSIAN:
        per_signal = 2
    elif family == SPATIAL:
        per_signal = 3
    elif family in EXPFAM:
        per_signal = 1
    else:
        raise InvalidArgumentError(f"unknown family {family!r}")
    return m * K + per_signal * n + n * total


@dataclass
class MixtureState:
    """Parameters of a fitted mixture.

    ``coef`` has shape ``(n, J, K)`` and is zero off each component's support.
    ``sigma2`` is per-signal (Gaussian families), ``omega`` per-signal
    (spatial family only).
    """

    dictionary: np.ndarray
    supports: SupportSet
    weights: np.ndarray
    coef: np.ndarray
    sigma2: np.ndarray | None = None
    omega: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def J(self):
        return len(self.supports)

    @property
    def K(self):
        return self.dictionary.shape[1]

    def means(self):
        """Linear predictors ``eta_ij = D (alpha_ij o gamma_j)``, shape ``(n, J, m)``."""
        return self.coef @ self.dictionary.T

    def check(self, atol=1e-12):
        if abs(self.weights.sum() - 1.0) > atol or np.any(self.weights < 0):
            raise InvalidArgumentError("mixture weights are not on the simplex")
        if np.any(self.coef[:, ~self.supports.masks]):
            raise InvalidArgumentError("coefficients are nonzero off-support")

    def select(self, keep):
        """Components ``keep`` only, with weights renormalized."""
        keep = np.asarray(keep)
        w = self.weights[keep]
        return replace(
            self,
            supports=SupportSet(self.supports.masks[keep], self.supports.d),
            weights=w / w.sum(),
            coef=self.coef[:, keep, :].copy(),
            extras=dict(self.extras),
        )

    def copy(self):
        return replace(
            self,
            dictionary=self.dictionary.copy(),
            weights=self.weights.copy(),
            coef=self.coef.copy(),
            sigma2=None if self.sigma2 is None else self.sigma2.copy(),
            omega=None if self.omega is None else self.omega.copy(),
            extras=dict(self.extras),
        )
