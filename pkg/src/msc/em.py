"""Fast EM for model-based sparse coding.

The driver grows the sparsity level ``d`` one step at a time.  At each level
the candidate supports are every surviving support of the previous level
extended by one atom; EM with rejection control is run on that set, the set
is pruned to the supports that win at least one signal, and BIC decides
whether to continue.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import expfam, gaussian
from .core import (
    BINOMIAL, EXPFAM, GAUSSIAN, POISSON, SPATIAL,
    Dataset, DegenerateSignalError, InvalidArgumentError, MixtureState,
    count_parameters, expand_support_set, init_support_set, normalize_columns,
    prune_support_set,
)
from .spatial import (
    CorrelationKernel, SpatialSliceQ, distance_matrix, newton_ascent,
    weighted_residual_factor,
)

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    K: int
    d_max: int = 3
    family: str = GAUSSIAN
    kernel: str = "exponential"
    omega_bounds: tuple | None = None
    trials: int = 1
    c0: float = 0.9
    decay: float = 0.5
    c_min: float = 1e-3
    warmup: int = 3
    tol: float = 1e-6
    max_iter: int = 200
    seed: int = 0
    sigma2_floor: float = gaussian.SIGMA2_FLOOR
    sigma2_rel_floor: float = 0.1
    sigma2_fixed: float | None = None
    ridge: float = gaussian.RIDGE
    nugget: float = 1e-8
    prune_eps: float = 1e-10

    def __post_init__(self):
        if self.K < 1:
            raise InvalidArgumentError("K must be >= 1")
        if self.d_max < 1:
            raise InvalidArgumentError("d_max must be >= 1")
        if not 0.0 <= self.c0 <= 1.0:
            raise InvalidArgumentError("c0 must lie in [0, 1]")
        if not 0.0 <= self.c_min <= 1.0:
            raise InvalidArgumentError("c_min must lie in [0, 1]")
        if not 0.0 < self.decay <= 1.0:
            raise InvalidArgumentError("decay must lie in (0, 1]")
        if not 0.0 <= self.sigma2_rel_floor < 1.0:
            raise InvalidArgumentError("sigma2_rel_floor must lie in [0, 1)")
        if self.sigma2_fixed is not None and not self.sigma2_fixed > 0:
            raise InvalidArgumentError("sigma2_fixed must be positive")
        if not self.tol > 0:
            raise InvalidArgumentError("tol must be positive")
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be >= 1")
        if self.family not in (GAUSSIAN, SPATIAL, POISSON, BINOMIAL):
            raise InvalidArgumentError(f"unknown family {self.family!r}")
        # validates the name and bounds
        CorrelationKernel(self.kernel, *(self.omega_bounds or (None, None)))

    def to_dict(self):
        out = asdict(self)
        out["omega_bounds"] = None if self.omega_bounds is None else list(self.omega_bounds)
        return out


@dataclass
class LevelRecord:
    d: int
    candidates: int
    kept: int
    loglik: float
    bic: float
    iterations: int
    trace: list
    state: MixtureState = field(repr=False)


@dataclass
class FitResult:
    state: MixtureState
    d: int
    bic: list
    loglik_trace: list
    assignments: np.ndarray
    responsibilities: np.ndarray
    diagnostics: dict
    levels: list = field(repr=False, default_factory=list)


def threshold_schedule(it, config):
    """Rejection-control threshold at EM iteration ``it`` of a sparsity level.

    ``c0`` for the warm-up iterations, then geometric decay floored at
    ``c_min``.  ``c0 = 0`` disables rejection control entirely.
    """
    if it < 0:
        raise InvalidArgumentError("iteration must be >= 0")
    if config.c0 == 0:
        return 0.0
    if it < config.warmup:
        return config.c0
    return max(config.c0 * config.decay ** (it - config.warmup), config.c_min)


def _schedule_settled(it, config):
    return config.c0 == 0 or threshold_schedule(it, config) <= config.c_min


def bic(loglik, q, n, m):
    if q < 1:
        raise InvalidArgumentError("parameter count must be >= 1")
    return -2.0 * loglik + q * np.log(n * m)


def rejection_control(W, c, rng, renormalize=True):
    """Stochastically shrink small responsibilities.

    Entries above ``c`` are kept; the others become ``c`` with probability
    ``w / c`` and 0 otherwise.  Rows are then renormalized, and a row that
    lost all its mass is restored.  ``c = 0`` returns ``W`` unchanged.
    """
    W = np.asarray(W, dtype=float)
    if not 0.0 <= c <= 1.0:
        raise InvalidArgumentError("threshold must lie in [0, 1]")
    if c == 0:
        return W.copy()
    u = rng.random(W.shape)
    small = W <= c
    out = np.where(small, np.where(u < W / c, c, 0.0), W)
    if not renormalize:
        return out
    tot = out.sum(axis=1)
    dead = tot <= 0
    out[dead] = W[dead]
    tot[dead] = W[dead].sum(axis=1)
    return out / tot[:, None]


class FamilyModel:
    """Family-specific pieces of the EM: densities, M-step and seeding."""

    def __init__(self, data, config):
        fam = config.family
        if fam in EXPFAM and data.family != fam:
            raise InvalidArgumentError(f"data family {data.family!r} does not match {fam!r}")
        if fam in (GAUSSIAN, SPATIAL) and data.family in EXPFAM:
            raise InvalidArgumentError(f"data family {data.family!r} does not match {fam!r}")
        if fam == SPATIAL and data.locations is None:
            raise InvalidArgumentError("spatial fit requires signal locations")
        self.data = data
        self.config = config
        self.family = fam
        self.X = data.X
        self.trials = data.trials if fam == BINOMIAL else 1
        self.kernel = None
        self.dist = None
        if fam == SPATIAL:
            self.kernel = CorrelationKernel(config.kernel, *(config.omega_bounds or (None, None)))
            self.dist = distance_matrix(data.locations)
        self.base = expfam.log_base_measure(fam, self.X, self.trials) if fam in EXPFAM else None
        self.bb = expfam.BBHistory(config.K) if fam in EXPFAM else None
        self.s2_floor = None
        self.diag = {
            "newton_rejected": 0, "atoms_reinitialized": 0, "bb_rejected": 0,
            "irls_unimproved": 0, "components_removed": 0,
        }

    # -- noise -------------------------------------------------------------
    def whiteners(self, state):
        if self.family != SPATIAL:
            return None, None
        key = state.omega.tobytes()
        cached = state.extras.get("corr")
        if cached is not None and cached[0] == key:
            return cached[1], cached[2]
        winv, logdet = gaussian.correlation_whiteners(self.kernel, state.omega, self.dist, self.config.nugget)
        state.extras["corr"] = (key, winv, logdet)
        return winv, logdet

    # -- densities -----------------------------------------------------------
    def log_densities(self, state):
        if self.family in EXPFAM:
            return expfam.component_log_densities(
                self.X, state.dictionary, state.coef, self.family, self.trials, self.base)
        winv, logdet = self.whiteners(state)
        return gaussian.component_log_densities(self.X, state.dictionary, state.coef, state.sigma2, winv, logdet)

    def log_joint(self, state):
        with np.errstate(divide="ignore"):
            logpi = np.log(state.weights)
        return self.log_densities(state) + logpi[None, :]

    # -- initialization --------------------------------------------------------
    def transformed(self):
        if self.family == POISSON:
            return np.log1p(self.X)
        if self.family == BINOMIAL:
            return np.log((self.X + 0.5) / (self.trials - self.X + 0.5))
        return self.X

    def init_dictionary(self, rng):
        Z = self.transformed()
        n, m = Z.shape
        K = self.config.K
        pick = rng.choice(n, size=K, replace=n < K)
        D = Z[pick].T.copy()
        norms = np.linalg.norm(D, axis=0)
        for k in np.flatnonzero(norms <= 1e-12):
            D[:, k] = rng.standard_normal(m)
        return normalize_columns(D)[0]

    def initial_state(self, rng):
        K = self.config.K
        S = init_support_set(K)
        D = self.init_dictionary(rng)
        weights = np.full(K, 1.0 / K)
        n = self.X.shape[0]
        state = MixtureState(D, S, weights, np.zeros((n, K, K)))
        if self.family == SPATIAL:
            state.omega = np.full(n, self.kernel.default_omega(self.dist))
        if self.family in EXPFAM:
            state.coef = gaussian.alpha_update(self.transformed(), D, S.masks, None, self.config.ridge)
            return state
        winv, _ = self.whiteners(state)
        state.coef = gaussian.alpha_update(self.X, D, S.masks, winv, self.config.ridge)
        quads = gaussian.residual_quads(self.X, D, state.coef, winv)
        state.sigma2 = quads.mean(axis=1) / self.X.shape[1]
        if self.config.sigma2_fixed is not None:
            state.sigma2 = np.full(n, float(self.config.sigma2_fixed))
        self.set_sigma2_floor(state.sigma2)
        state.sigma2 = np.maximum(state.sigma2, self.s2_floor)
        return state

    def set_sigma2_floor(self, s2):
        # Per-signal variances are unbounded below (an atom can match one
        # signal exactly).  The floor is fixed once per fit so the M-step
        # stays an exact maximization over a fixed parameter set.
        cfg = self.config
        self.s2_floor = max(cfg.sigma2_floor, cfg.sigma2_rel_floor * float(np.median(s2)))

    def seed_children(self, state, S_new, parents):
        """Warm start for the expanded support set.

        Children inherit the parent's coefficients; an added atom gets a
        one-dimensional (weighted least-squares or Newton) fit to the
        parent's residual.  Each parent's weight is split evenly between the
        children it generated.
        """
        n = self.X.shape[0]
        D = state.dictionary
        J = len(S_new)
        coef = state.coef[:, parents, :].copy()
        eta_parent = state.coef @ D.T
        winv, _ = self.whiteners(state)
        for j in range(J):
            added = np.flatnonzero(S_new.masks[j] & ~state.supports.masks[parents[j]])
            if added.size == 0:
                continue
            l = int(added[0])
            r = self.X - eta_parent[:, parents[j], :]
            dl = D[:, l]
            if self.family in EXPFAM:
                eta = eta_parent[:, parents[j], :]
                mu = expfam.inverse_link(self.family, eta, self.trials)
                v = np.maximum(expfam.variance(self.family, eta, self.trials), expfam.WEIGHT_FLOOR)
                coef[:, j, l] = (r @ dl) / (v @ (dl * dl))
            elif winv is None:
                coef[:, j, l] = r @ dl
            else:
                rw = np.einsum("imn,in->im", winv, r)
                dw = winv @ dl
                coef[:, j, l] = np.sum(rw * dw, axis=1) / np.sum(dw * dw, axis=1)
        counts = np.bincount(parents, minlength=len(state.supports))
        weights = state.weights[parents] / counts[parents]
        new = state.copy()
        new.supports = S_new
        new.coef = coef
        new.weights = weights / weights.sum()
        return new

    # -- M-step ---------------------------------------------------------------
    def m_step(self, W, state):
        cfg = self.config
        n = self.X.shape[0]
        pi = W.mean(axis=0)
        keep = np.flatnonzero(pi >= cfg.prune_eps / len(pi))
        if keep.size < len(pi):
            self.diag["components_removed"] += len(pi) - keep.size
        new = state.select(keep) if keep.size < len(pi) else state.copy()
        W = W[:, keep]
        new.weights = pi[keep] / pi[keep].sum()
        masks = new.supports.masks

        if self.family in EXPFAM:
            new.coef, stuck = expfam.irls_alpha_batch(
                self.X, new.dictionary, masks, new.coef, self.family, self.trials, cfg.ridge)
            self.diag["irls_unimproved"] += stuck
            D, coef, unused, rej = expfam.dictionary_ascent(
                self.X, new.dictionary, new.coef, W, self.family, self.trials, self.bb)
            self.diag["bb_rejected"] += rej
            new.dictionary, new.coef = D, coef
        else:
            winv, _ = self.whiteners(new)
            if cfg.sigma2_fixed is not None:
                new.sigma2 = np.full(n, float(cfg.sigma2_fixed))
            else:
                if self.s2_floor is None:
                    self.set_sigma2_floor(state.sigma2)
                new.sigma2 = gaussian.sigma2_update(self.X, new.dictionary, new.coef, W, winv, self.s2_floor)
            if self.family == SPATIAL:
                resid = self.X[:, None, :] - new.coef @ new.dictionary.T
                F = weighted_residual_factor(resid, W)
                q = SpatialSliceQ(self.kernel, self.dist, F, W.sum(axis=1), new.sigma2, cfg.nugget)
                omega, rejected = newton_ascent(q, new.omega, self.kernel.lo, self.kernel.hi)
                self.diag["newton_rejected"] += int(rejected.sum())
                new.omega = omega
                winv, _ = self.whiteners(new)
            new.coef = gaussian.alpha_update(self.X, new.dictionary, masks, winv, cfg.ridge)
            D, coef, unused = gaussian.dictionary_sweep(self.X, new.dictionary, new.coef, W, new.sigma2, winv, cfg.ridge)
            new.dictionary, new.coef = D, coef

        self._reinit_dead_atoms(new, W)
        return new

    def _reinit_dead_atoms(self, state, W):
        used = state.supports.masks.any(axis=0)
        dead = np.flatnonzero(~used)
        if dead.size == 0:
            return
        # expfam predictors are compared against the transformed counts
        Z = self.transformed()
        recon = np.einsum("ij,ijm->im", W, state.coef @ state.dictionary.T)
        err = np.sum((Z - recon) ** 2, axis=1)
        order = np.argsort(-err, kind="stable")
        D = state.dictionary.copy()
        for t, k in enumerate(dead):
            z = Z[order[t % len(order)]]
            nz = np.linalg.norm(z)
            if nz > 0:
                D[:, k] = z / nz
            if self.bb is not None:
                self.bb.reset(k)
        state.dictionary = D
        self.diag["atoms_reinitialized"] += int(dead.size)


# ---------------------------------------------------------------------------
# public operations

def _model_for(data, state, config):
    if config is None:
        family = data.family
        if family == SPATIAL and state.omega is None:
            family = GAUSSIAN
        config = FitConfig(K=state.K, family=family, trials=data.trials)
    return FamilyModel(data, config)


def _posterior(model, state):
    logp = model.log_joint(state)
    norm = logsumexp(logp, axis=1)
    bad = ~np.isfinite(norm)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DegenerateSignalError(f"signal {i} has zero density under every component", signal=i)
    with np.errstate(invalid="ignore"):
        W = np.exp(logp - norm[:, None])
    W = np.where(np.isfinite(logp), W, 0.0)
    return W, float(np.sum(norm))


def e_step(data, state, config=None):
    """Posterior component responsibilities, row-stochastic ``(n, J)``."""
    return _posterior(_model_for(data, state, config), state)[0]


def log_likelihood(data, state, config=None):
    """Observed-data log-likelihood ``sum_i log sum_j pi_j f(x_i | theta_ij)``."""
    return _posterior(_model_for(data, state, config), state)[1]


def m_step(data, W, state, config=None, model=None):
    """One M-step from (possibly rejection-controlled) responsibilities ``W``."""
    model = model or _model_for(data, state, config)
    return model.m_step(np.asarray(W, dtype=float), state)


def run_em_fixed_d(data, state0, config, rng=None, model=None):
    """EM at a fixed support set until the relative log-likelihood change is below ``tol``.

    Returns ``(state, trace, W)`` where ``W`` are the responsibilities of the
    returned state.  Under rejection control the best iterate is returned.
    """
    model = model or FamilyModel(data, config)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    state = state0
    trace = []
    best = None
    stochastic = False
    for it in range(config.max_iter + 1):
        W, ll = _posterior(model, state)
        trace.append(ll)
        if best is None or ll > best[2] or not stochastic:
            best = (state, W, ll)
        if it == config.max_iter:
            break
        if it > 0 and _schedule_settled(it - 1, config):
            prev = trace[-2]
            if abs(ll - prev) <= config.tol * abs(prev):
                break
        c = threshold_schedule(it, config)
        stochastic |= c > 0
        state = model.m_step(rejection_control(W, c, rng), state)
    if not stochastic:
        best = (state, W, trace[-1])
    return best[0], trace, best[1]


def fit_msc(data, config):
    """Fit the model for increasing sparsity until BIC stops improving."""
    if not isinstance(data, Dataset):
        raise InvalidArgumentError("data must be a Dataset")
    rng = np.random.default_rng(config.seed)
    model = FamilyModel(data, config)
    n, m = data.X.shape
    K = config.K
    state = model.initial_state(rng)
    levels = []
    chosen = None
    stop_reason = "d_max"
    prev_pruned = None
    for d in range(1, config.d_max + 1):
        if d > 1:
            S_new, parents = expand_support_set(prev_pruned.supports, return_parents=True)
            if S_new.masks.sum(axis=1).max() < d:
                stop_reason = "no_growth"
                break
            state = model.seed_children(prev_pruned, S_new, parents)
        candidates = len(state.supports)
        state, trace, W = run_em_fixed_d(data, state, config, rng, model)
        S_kept, keep = prune_support_set(state.supports, W, return_index=True)
        pruned = state.select(keep)
        ll = _posterior(model, pruned)[1]
        q = count_parameters(config.family, S_kept, n, m, K)
        score = bic(ll, q, n, m)
        levels.append(LevelRecord(d, candidates, len(keep), ll, score, len(trace) - 1, trace, pruned))
        log.info("d=%d candidates=%d kept=%d loglik=%.4f bic=%.4f", d, candidates, len(keep), ll, score)
        if d > 1 and score > levels[-2].bic:
            stop_reason = "bic_increase"
            break
        chosen = d
        prev_pruned = pruned
    if chosen is None:
        chosen = 1
    final = levels[chosen - 1].state
    W, _ = _posterior(model, final)
    diagnostics = dict(model.diag)
    diagnostics.update(
        stop_reason=stop_reason,
        d_max_reached=stop_reason == "d_max",
        support_sizes=[(r.d, r.candidates, r.kept) for r in levels],
        iterations=[r.iterations for r in levels],
    )
    return FitResult(
        state=final,
        d=chosen,
        bic=[r.bic for r in levels],
        loglik_trace=[r.trace for r in levels],
        assignments=np.argmax(W, axis=1),
        responsibilities=W,
        diagnostics=diagnostics,
        levels=levels,
    )


def reconstruct(data, state, config=None, hard=False):
    """Posterior-mean (or argmax-component) reconstruction of each signal's mean."""
    W = e_step(data, state, config)
    eta = state.coef @ state.dictionary.T
    if hard:
        j = np.argmax(W, axis=1)
        return eta[np.arange(eta.shape[0]), j]
    return np.einsum("ij,ijm->im", W, eta)
