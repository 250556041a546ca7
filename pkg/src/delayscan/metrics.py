"""Image-quality metrics: MSE, PSNR, SSIM and a Frechet feature distance (FFD).

FFD is the Frechet distance between Gaussian fits of image features, where
the features come from a fixed random projection followed by ``tanh`` rather
than a pretrained classification network. Its values are therefore not
comparable with published FID numbers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NumericError, SampleSizeError, ShapeError
from .numerics import RngStream

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
FFD_SEED = 20240229
FFD_FEATURES = 64
NEGATIVE_CLAMP = 1e-10


def _pair(x, xhat) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {xhat.shape}")
    return x, xhat


def mse(x, xhat) -> float:
    x, xhat = _pair(x, xhat)
    return float(np.mean((x - xhat) ** 2))


def psnr(x, xhat, peak: float | None = 1.0) -> float:
    """``20 log10(peak / sqrt(mse))`` in dB; ``inf`` for identical images.

    ``peak=None`` uses the reference image maximum instead of a fixed peak.
    """
    x, xhat = _pair(x, xhat)
    peak = float(x.max()) if peak is None else float(peak)
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    err = mse(x, xhat)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / math.sqrt(err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(x, xhat, peak: float = 1.0, window: np.ndarray | None = None) -> np.ndarray:
    x, xhat = _pair(x, xhat)
    w = gaussian_window() if window is None else window
    if x.ndim != 2 or x.shape[0] < w.shape[0] or x.shape[1] < w.shape[1]:
        raise ShapeError(f"SSIM needs 2-D images of at least {w.shape}, got {x.shape}")
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2

    def local(a):
        return np.einsum("ijkl,kl->ij", sliding_window_view(a, w.shape), w)

    mu_x, mu_y = local(x), local(xhat)
    var_x = local(x * x) - mu_x**2
    var_y = local(xhat * xhat) - mu_y**2
    cov = local(x * xhat) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim(x, xhat, peak: float = 1.0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian-weighted (sigma 1.5) windows."""
    return float(ssim_map(x, xhat, peak).mean())


# --------------------------------------------------------------------------
# Frechet distance


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Square root of the symmetrized matrix with negative eigenvalues clamped to 0."""
    a = 0.5 * (np.asarray(a, dtype=np.float64) + np.asarray(a, dtype=np.float64).T)
    vals, vecs = np.linalg.eigh(a)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)``.

    The trace of the symmetric-product square root equals the nuclear norm of
    ``S1^1/2 S2^1/2``; that form avoids square-rooting tiny eigenvalues twice.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise ShapeError("mean/covariance shapes disagree")
    s1, s2 = sqrtm_psd(cov1), sqrtm_psd(cov2)
    cross = np.linalg.svd(s1 @ s2, compute_uv=False).sum()
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 @ s1) + np.trace(s2 @ s2) - 2.0 * cross)
    if not math.isfinite(d):
        raise NumericError("non-finite Frechet distance")
    if d < -NEGATIVE_CLAMP * (1.0 + abs(np.trace(cov1)) + abs(np.trace(cov2))):
        raise NumericError(f"Frechet distance significantly negative ({d:.3e})")
    return max(d, 0.0)


def frechet_from_features(feats_a, feats_b) -> float:
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    d = a.shape[1]
    if min(a.shape[0], b.shape[0]) < d + 1:
        raise SampleSizeError(f"need at least {d + 1} samples per set for {d} features")
    return frechet_distance(a.mean(0), np.atleast_2d(np.cov(a, rowvar=False)),
                            b.mean(0), np.atleast_2d(np.cov(b, rowvar=False)))


class FeatureExtractor:
    """``tanh(P . flatten(img) + b)`` with ``P``, ``b`` fixed by a documented seed.

    ``P`` entries are ``N(0, 1/n_pixels)`` and ``b`` entries ``N(0, 0.01)``,
    drawn from ``RngStream(FFD_SEED).fork(n_pixels)``.
    """

    def __init__(self, n_pixels: int, n_features: int = FFD_FEATURES, seed: int = FFD_SEED):
        rng = RngStream(seed).fork(n_pixels)
        self.P = rng.normal((n_features, n_pixels)) / math.sqrt(n_pixels)
        self.b = 0.1 * rng.normal(n_features)

    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray:
        flat = np.stack([np.asarray(im, dtype=np.float64).reshape(-1) for im in images])
        return np.tanh(flat @ self.P.T + self.b)


def frechet_feature_distance(set_a: Sequence[np.ndarray], set_b: Sequence[np.ndarray],
                             n_features: int = FFD_FEATURES) -> float:
    if len(set_a) < n_features + 1 or len(set_b) < n_features + 1:
        raise SampleSizeError(f"FFD with {n_features} features needs >= {n_features + 1} images per set, "
                              f"got {len(set_a)} and {len(set_b)}")
    n_pixels = np.asarray(set_a[0]).size
    extract = FeatureExtractor(n_pixels, n_features)
    return frechet_from_features(extract(set_a), extract(set_b))


@dataclass
class MetricReport:
    mse: float
    psnr: float
    ssim: float
    ffd: float = math.nan
    id: str = ""
    split: str = ""


def image_report(x, xhat, peak: float = 1.0, id: str = "", split: str = "") -> MetricReport:
    return MetricReport(mse(x, xhat), psnr(x, xhat, peak), ssim(x, xhat, peak), id=id, split=split)


def aggregate(reports: Sequence[MetricReport], truth=None, preds=None, n_features: int | None = None,
              split: str = "") -> MetricReport:
    """Mean per-image metrics in index order, plus FFD over the whole set when feasible.

    ``n_features`` defaults to ``min(64, n - 1)`` so small evaluation splits
    still yield a covariance of full rank.
    """
    agg = MetricReport(
        float(np.mean([r.mse for r in reports])),
        float(np.mean([r.psnr for r in reports])),
        float(np.mean([r.ssim for r in reports])),
        id="mean", split=split,
    )
    if truth is not None and preds is not None:
        n = len(truth)
        k = n_features if n_features is not None else min(FFD_FEATURES, n - 1)
        if k >= 1 and n >= k + 1:
            agg.ffd = frechet_feature_distance(list(preds), list(truth), k)
    return agg
