"""FID, LPIPS-style distance and mask-LPIPS over an internal frozen feature extractor.

Values are comparable between runs that share an extractor seed, not with published numbers
computed on pretrained Inception/AlexNet features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericError, SizeMismatchError
from .losses import FeatureExtractor

MASK_FILL = 0.0
SQRT_TOL = 1e-8


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int


def fit_stats(features) -> FeatureStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 samples to fit statistics, got {x.shape[0]}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return FeatureStats(mean, (cov + cov.T) / 2, x.shape[0])


def _psd_eigh(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh((m + m.T) / 2)
    tol = SQRT_TOL * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol:
        raise NumericError(f"matrix square root failed: eigenvalue {w.min():.3g} below -{tol:.1g}")
    return np.clip(w, 0.0, None), v


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = _psd_eigh(np.atleast_2d(m))
    return (v * np.sqrt(w)) @ v.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Fréchet distance ``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The cross term uses tr((S_a S_b)^(1/2)) = tr((A^(1/2) S_b A^(1/2))^(1/2)), which keeps
    every square root symmetric.
    """
    ca, cb = np.atleast_2d(a.cov), np.atleast_2d(b.cov)
    if ca.shape != cb.shape or np.shape(a.mean) != np.shape(b.mean):
        raise SizeMismatchError(f"feature dimensions differ: {ca.shape} vs {cb.shape}")
    root_a = sqrtm_psd(ca)
    w, _ = _psd_eigh(root_a @ cb @ root_a)
    diff = np.asarray(a.mean, dtype=np.float64) - np.asarray(b.mean, dtype=np.float64)
    return float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * np.sqrt(w).sum())


def pooled_features(extractor: FeatureExtractor, images: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    """Global-average-pooled deepest extractor layer, one row per image."""
    rows = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            feats = extractor.features(images[i:i + batch_size])
            rows.append(feats[-1].mean(dim=(2, 3)).double().numpy())
    return np.concatenate(rows)


def image_fid(extractor, real: torch.Tensor, fake: torch.Tensor) -> float:
    return fid(fit_stats(pooled_features(extractor, real)), fit_stats(pooled_features(extractor, fake)))


def _unit(f, eps=1e-10):
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def lpips(extractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Channel-normalised feature distance with unit layer weights.

    Per layer: squared difference of unit-normalised features, summed over channels and
    averaged over positions; layers are summed. Batched inputs give one value per pair.
    """
    if a.shape != b.shape:
        raise SizeMismatchError(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.dim() == 3
    if single:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    total = torch.zeros(a.shape[0], dtype=a.dtype)
    for fa, fb in zip(extractor.features(a), extractor.features(b)):
        total = total + (_unit(fa) - _unit(fb)).pow(2).sum(dim=1).mean(dim=(1, 2))
    return total[0] if single else total


def mask_lpips(extractor, a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """LPIPS after replacing background pixels of both images with ``MASK_FILL``."""
    if a.shape[-2:] != mask.shape[-2:]:
        raise SizeMismatchError(f"mask {tuple(mask.shape)} vs image {tuple(a.shape)}")
    if mask.dim() == a.dim() - 1:
        mask = mask.unsqueeze(-3)
    mask = mask.to(a.dtype)
    fill = MASK_FILL * (1 - mask)
    return lpips(extractor, a * mask + fill, b * mask + fill)


def masked_l1(target: torch.Tensor, generated: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-pair mean absolute error over foreground pixels (B×3×H×W images, B×1×H×W masks)."""
    err = (target - generated).abs() * mask
    return err.sum(dim=(1, 2, 3)) / (mask.sum(dim=(1, 2, 3)) * target.shape[1]).clamp_min(1.0)
