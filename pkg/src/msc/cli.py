"""Command-line interface: ``msc {simulate,fit,denoise,bench,eval}``.

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from .bench import SUITES, format_report, run_suite
from .core import (
    BINOMIAL, GAUSSIAN, POISSON, SPATIAL,
    Dataset, DegenerateSignalError, InvalidArgumentError, NumericFailureError,
)
from .em import FitConfig, fit_msc
from .synth import SimSpec, mse, psnr, simulate, subspace_distance

EXIT_USAGE = 2
EXIT_NUMERIC = 3

KERNELS = ("exp", "exponential", "gauss", "gaussian", "ar", "autoregressive")


class UsageError(Exception):
    pass


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _sizes(text):
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return vals


def _threads(limit):
    if limit is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args):
    spatial = args.family == SPATIAL
    if args.family == POISSON and args.snr is not None:
        raise UsageError("--snr does not apply to --family poisson")
    if not spatial and (args.omega is not None or args.kernel is not None):
        raise UsageError("--omega/--kernel apply only to --family spatial")
    if args.family != POISSON and args.raw_scale:
        raise UsageError("--raw-scale applies only to --family poisson")
    spec = SimSpec(
        family=POISSON if args.family == POISSON else GAUSSIAN,
        n=args.n, m=args.m, K=args.K, d=args.d,
        snr=None if args.family == POISSON else (args.snr if args.snr is not None else 2.0),
        spatial=spatial,
        kernel=args.kernel or "exponential",
        omega=args.omega if args.omega is not None else 1 / 25,
        raw_scale=args.raw_scale,
        seed=args.seed,
    )
    data, truth = simulate(spec)
    out = Path(args.out)
    base = out.name[:-4] if out.name.endswith(".csv") else out.name
    data_path = out.with_name(base + ".csv")
    written = mio.write_dataset(data_path, data.X, data.locations)
    for suffix, arr in (("truth", truth.dictionary), ("labels", truth.labels[:, None])):
        p = out.with_name(f"{base}.{suffix}.csv")
        mio.write_matrix(p, arr)
        written.append(p)
    print(f"seed={args.seed}")
    for p in written:
        print(f"wrote {p}")
    return 0


def _load_dataset(args):
    X = mio.read_matrix(args.data)
    loc = None
    if args.family == SPATIAL:
        if not args.locations:
            raise UsageError("--family spatial requires --locations")
        loc = mio.read_matrix(args.locations)
        if loc.shape[0] != X.shape[1]:
            raise UsageError(f"locations file has {loc.shape[0]} rows but data has m={X.shape[1]} columns")
    elif args.locations:
        loc = mio.read_matrix(args.locations)
        if loc.shape[0] != X.shape[1]:
            raise UsageError(f"locations file has {loc.shape[0]} rows but data has m={X.shape[1]} columns")
        loc = None
    return Dataset(X, args.family, loc, trials=args.trials)


def cmd_fit(args):
    data = _load_dataset(args)
    cfg = FitConfig(
        K=args.K, d_max=args.dmax, family=args.family, kernel=args.kernel, trials=args.trials,
        c0=args.c0, c_min=args.cmin, tol=args.tol, max_iter=args.max_iter, seed=args.seed,
    )
    res = fit_msc(data, cfg)
    mio.write_model(args.out_model, mio.ModelFile.from_fit(res, cfg))
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "d", "iteration", "value"])
            for d, trace in enumerate(res.loglik_trace, start=1):
                for it, v in enumerate(trace):
                    w.writerow(["loglik", d, it, repr(float(v))])
            for d, b in enumerate(res.bic, start=1):
                w.writerow(["bic", d, "", repr(float(b))])
    print(f"chosen d={res.d}")
    print(f"bic={','.join(f'{b:.6f}' for b in res.bic)}")
    print(f"wrote {args.out_model}")
    return 0


def cmd_denoise(args):
    from .patches import denoise

    img = mio.read_pgm(args.inp)
    if args.patch > min(img.shape):
        raise UsageError(f"patch size {args.patch} exceeds image side {min(img.shape)}")
    out, res = denoise(
        img, patch=args.patch, stride=args.stride, K=args.K, d_max=args.dmax, kernel=args.kernel,
        sigma=args.sigma_known, hard=args.hard, seed=args.seed, max_iter=args.max_iter,
    )
    mio.write_pgm(args.out, out)
    print(f"chosen d={res.d}")
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args):
    rows = run_suite(args.suite, args.replicates, args.sizes, seed=args.seed,
                     m=args.m, K=args.K, snr=args.snr)
    Path(args.out).write_text(format_report(rows, timing=args.timing))
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def cmd_eval(args):
    if args.model:
        if not args.truth_dict:
            raise UsageError("--model needs --truth-dict")
        model = mio.read_model(args.model)
        truth = mio.read_matrix(args.truth_dict)
        if truth.shape[0] != model.dictionary.shape[0]:
            raise UsageError(f"truth dictionary has {truth.shape[0]} rows but model has m={model.dictionary.shape[0]}")
        print(f"subspace_distance={subspace_distance(model.dictionary, truth):.6f}")
        return 0
    if not (args.ref and args.test):
        raise UsageError("give --model/--truth-dict or --ref/--test")
    a = mio.read_pgm(args.ref)
    b = mio.read_pgm(args.test)
    if a.shape != b.shape:
        raise UsageError(f"image shapes differ: {a.shape} vs {b.shape}")
    p = psnr(a, b)
    print(f"mse={mse(a, b):.6f}")
    print(f"psnr={'inf' if np.isinf(p) else f'{p:.6f}'}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    p = argparse.ArgumentParser(prog="msc", description="Model-based sparse coding.")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="limit BLAS/LAPACK threads (1 gives the reference deterministic path)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset and its ground truth")
    s.add_argument("--family", choices=(GAUSSIAN, SPATIAL, POISSON), default=GAUSSIAN)
    s.add_argument("--n", type=_positive_int, default=100)
    s.add_argument("--m", type=_positive_int, default=100)
    s.add_argument("--K", type=_positive_int, default=30)
    s.add_argument("--d", type=_positive_int, default=2)
    s.add_argument("--snr", type=float)
    s.add_argument("--omega", type=float)
    s.add_argument("--kernel", choices=KERNELS)
    s.add_argument("--raw-scale", action="store_true", help="Poisson: keep the unscaled coefficient range")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output prefix; writes <out>.csv, <out>.truth.csv, ...")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a model and write it as JSON")
    f.add_argument("--family", choices=(GAUSSIAN, SPATIAL, POISSON, BINOMIAL), default=GAUSSIAN)
    f.add_argument("--K", type=_positive_int, required=True)
    f.add_argument("--dmax", type=_positive_int, default=3)
    f.add_argument("--kernel", choices=KERNELS, default="exponential")
    f.add_argument("--trials", type=_positive_int, default=1)
    f.add_argument("--c0", type=float, default=0.9)
    f.add_argument("--cmin", type=float, default=1e-3)
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--max-iter", type=_positive_int, default=200)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--data", required=True)
    f.add_argument("--locations")
    f.add_argument("--out-model", required=True)
    f.add_argument("--trace")
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("denoise", help="denoise a PGM image with the spatial model")
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--patch", type=_positive_int, default=12)
    d.add_argument("--stride", type=_positive_int, default=3)
    d.add_argument("--K", type=_positive_int, default=16)
    d.add_argument("--dmax", type=_positive_int, default=3)
    d.add_argument("--kernel", choices=KERNELS, default="exponential")
    d.add_argument("--sigma-known", type=float, help="fix the noise standard deviation")
    d.add_argument("--hard", action="store_true", help="reconstruct from the argmax component")
    d.add_argument("--max-iter", type=_positive_int, default=60)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_denoise)

    b = sub.add_parser("bench", help="dictionary-recovery benchmark")
    b.add_argument("--suite", choices=sorted(SUITES), required=True)
    b.add_argument("--replicates", type=_positive_int, default=50)
    b.add_argument("--sizes", type=_sizes, default=[100, 200, 300, 400, 500])
    b.add_argument("--m", type=_positive_int)
    b.add_argument("--K", type=_positive_int)
    b.add_argument("--snr", type=float)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--timing", action="store_true", help="add a wall_time column (not reproducible)")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="dictionary distance or image MSE/PSNR")
    e.add_argument("--model")
    e.add_argument("--truth-dict")
    e.add_argument("--ref")
    e.add_argument("--test")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (InvalidArgumentError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"msc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailureError, DegenerateSignalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"msc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
