"""Image patches: extraction, overlap-average recomposition and patch-based denoising."""

from __future__ import annotations

import numpy as np

from .baseline import BaselineConfig, baseline_fit, encode_all
from .core import SPATIAL, Dataset, InvalidArgumentError
from .em import FitConfig, fit_msc, reconstruct


def patch_offsets(size, patch, stride):
    """Top-left offsets along one axis; the last patch is flush with the border."""
    if patch > size:
        raise InvalidArgumentError(f"patch size {patch} exceeds image side {size}")
    if patch < 1 or stride < 1:
        raise InvalidArgumentError("patch and stride must be >= 1")
    offs = list(range(0, size - patch + 1, stride))
    if offs[-1] != size - patch:
        offs.append(size - patch)
    return np.array(offs)


def extract_patches(img, patch, stride):
    """Row-major vectorized ``patch x patch`` blocks and their top-left positions."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise InvalidArgumentError("expected a 2-D grayscale image")
    rows = patch_offsets(img.shape[0], patch, stride)
    cols = patch_offsets(img.shape[1], patch, stride)
    pos = np.array([(r, c) for r in rows for c in cols])
    P = np.stack([img[r:r + patch, c:c + patch].ravel() for r, c in pos])
    return P, pos


def patch_grid(patch):
    """Pixel coordinates ``(row, col)`` of a vectorized patch."""
    r, c = np.meshgrid(np.arange(patch), np.arange(patch), indexing="ij")
    return np.column_stack([r.ravel(), c.ravel()]).astype(float)


def recompose(P, pos, shape, patch):
    """Average overlapping patches back into an image; uncovered pixels are 0."""
    acc = np.zeros(shape)
    cnt = np.zeros(shape)
    for v, (r, c) in zip(P, pos):
        acc[r:r + patch, c:c + patch] += v.reshape(patch, patch)
        cnt[r:r + patch, c:c + patch] += 1
    return np.divide(acc, cnt, out=np.zeros(shape), where=cnt > 0)


def _finish(img):
    return np.clip(np.round(img), 0, 255)


def denoise(img, patch=12, stride=3, K=16, d_max=3, kernel="exponential",
            sigma=None, hard=False, seed=0, **fit_options):
    """Spatial model-based denoising of a grayscale image.

    Each patch is replaced by its posterior-mean reconstruction (or the
    argmax component's mean when ``hard``).  ``sigma`` fixes the noise
    standard deviation instead of estimating it per patch.  Returns
    ``(image, FitResult)``.
    """
    P, pos = extract_patches(img, patch, stride)
    data = Dataset(P, SPATIAL, patch_grid(patch))
    cfg = FitConfig(K=K, d_max=d_max, family=SPATIAL, kernel=kernel, seed=seed,
                    sigma2_fixed=None if sigma is None else float(sigma) ** 2, **fit_options)
    res = fit_msc(data, cfg)
    rec = reconstruct(data, res.state, cfg, hard=hard)
    return _finish(recompose(rec, pos, np.shape(img), patch)), res


def denoise_baseline(img, patch=12, stride=3, K=16, d=2, seed=0, n_iter=30):
    """OMP-ALS denoising with the same patch pipeline."""
    P, pos = extract_patches(img, patch, stride)
    D = baseline_fit(P, BaselineConfig(K=K, d=d, n_iter=n_iter, seed=seed))
    rec = encode_all(P, D, d) @ D.T
    return _finish(recompose(rec, pos, np.shape(img), patch))
