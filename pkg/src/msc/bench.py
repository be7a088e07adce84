"""Dictionary-recovery benchmark suites and their CSV report."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .baseline import BaselineConfig, baseline_fit
from .core import GAUSSIAN, POISSON, SPATIAL, Dataset, InvalidArgumentError
from .em import FitConfig, fit_msc
from .synth import SimSpec, simulate, subspace_distance

BASELINE = "OMP-ALS"


@dataclass(frozen=True)
class Suite:
    name: str
    family: str
    m: int
    K: int
    d: int
    snr: float | None
    omega: float | None
    methods: tuple


SUITES = {
    "gaussian-fig1": Suite("gaussian-fig1", GAUSSIAN, 40, 10, 2, 2.0, 1 / 25, ("sp-MSC", "si-MSC", BASELINE)),
    "poisson-fig1": Suite("poisson-fig1", POISSON, 40, 6, 2, None, None, ("ex-MSC", BASELINE)),
}


def replicate_seed(seed, n, r):
    return int(np.random.SeedSequence([seed, n, r]).generate_state(1)[0])


def _fit_method(method, data, suite, seed):
    if method == BASELINE:
        X = np.log1p(data.X) if suite.family == POISSON else data.X
        return baseline_fit(X, BaselineConfig(K=suite.K, d=suite.d, seed=seed))
    family = {"sp-MSC": SPATIAL, "si-MSC": GAUSSIAN, "ex-MSC": POISSON}[method]
    if family == GAUSSIAN:
        data = Dataset(data.X, GAUSSIAN)
    cfg = FitConfig(K=suite.K, d_max=suite.d, family=family, seed=seed)
    return fit_msc(data, cfg).state.dictionary


def run_suite(suite, replicates, sizes, seed=0, m=None, K=None, snr=None):
    """One row per (size, replicate, method): ``method, n, replicate, subspace_distance, wall_time``."""
    if isinstance(suite, str):
        if suite not in SUITES:
            raise InvalidArgumentError(f"unknown suite {suite!r}")
        suite = SUITES[suite]
    if replicates < 1 or not sizes or min(sizes) < 1:
        raise InvalidArgumentError("need at least one replicate and positive sizes")
    suite = Suite(suite.name, suite.family, m or suite.m, K or suite.K, suite.d,
                  snr if snr is not None else suite.snr, suite.omega, suite.methods)
    rows = []
    for n in sizes:
        for r in range(replicates):
            s = replicate_seed(seed, n, r)
            spec = SimSpec(family=suite.family, n=n, m=suite.m, K=suite.K, d=suite.d, snr=suite.snr,
                           spatial=suite.family == GAUSSIAN, omega=suite.omega or 1 / 25, seed=s)
            data, truth = simulate(spec)
            for method in suite.methods:
                t0 = time.perf_counter()
                D = _fit_method(method, data, suite, s)
                rows.append((method, n, r, subspace_distance(D, truth.dictionary), time.perf_counter() - t0))
    return rows


def format_report(rows, timing=False):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n", "replicate", "subspace_distance"] + (["wall_time"] if timing else []))
    for method, n, r, dist, secs in rows:
        w.writerow([method, n, r, f"{dist:.10f}"] + ([f"{secs:.3f}"] if timing else []))
    return buf.getvalue()


def medians(rows):
    """``{(method, n): median distance}``."""
    groups = {}
    for method, n, _, dist, _ in rows:
        groups.setdefault((method, n), []).append(dist)
    return {k: float(np.median(v)) for k, v in groups.items()}
