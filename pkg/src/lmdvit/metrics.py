"""Evaluation metrics: PSNR, SSIM, their mask-restricted variants and pruning precision."""

from __future__ import annotations

import csv

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .losses import SSIM_WINDOW, _window_size, ssim_map

PSNR_CAP = 99.0
CSV_FIELDS = ("sample_id", "psnr", "ssim", "psnr_w", "ssim_w", "precision", "kept_ratio")


def _pair(a, b):
    a = np.asarray(a.data if isinstance(a, T.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, T.Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"metric operands differ in shape: {a.shape} vs {b.shape}")
    return a, b


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP))


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def _spatial_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    while m.ndim > 2 and m.shape[0] == 1:
        m = m[0]
    if m.shape != shape[-2:]:
        raise DimensionError(f"mask {m.shape} does not match image extents {shape[-2:]}")
    return m


def weighted_psnr(a, b, mask, peak: float = 1.0) -> float:
    """PSNR over mask pixels only: MSE = sum(M * err^2) / (sum(M) * channels)."""
    a, b = _pair(a, b)
    m = _spatial_mask(mask, a.shape)
    total = m.sum()
    if total <= 0:
        raise UsageError("weighted PSNR needs a non-empty mask")
    channels = a.size // (a.shape[-2] * a.shape[-1])
    mse = float(((a - b) ** 2 * m).sum() / (total * channels))
    return _psnr_from_mse(mse, peak)


def ssim_value(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    return float(ssim_map(a, b, peak).data.mean())


def weighted_ssim(a, b, mask, peak: float = 1.0) -> float:
    """SSIM map averaged over mask pixels whose window fits inside the image."""
    a, b = _pair(a, b)
    m = _spatial_mask(mask, a.shape)
    h, w = m.shape
    r = _window_size(h, w) // 2
    inner = m[r:h - r, r:w - r]
    if inner.sum() <= 0:
        raise UsageError("weighted SSIM needs mask pixels away from the border")
    smap = ssim_map(a, b, peak).data
    smap = smap.reshape((-1,) + inner.shape)
    return float((smap * inner).sum() / (inner.sum() * smap.shape[0]))


def blurry_windows(mask, window: int) -> np.ndarray:
    """(gh, gw) flags: a window is blurry when it holds at least one mask pixel."""
    m = _spatial_mask(mask, np.shape(mask)[-2:])
    h, w = m.shape
    if h % window or w % window:
        raise DimensionError(f"mask {h}x{w} is not divisible by window {window}")
    return m.reshape(h // window, window, w // window, window).max(axis=(1, 3)) > 0


def precision_from_counts(tp: int, fp: int) -> float:
    return 1.0 if tp + fp == 0 else tp / (tp + fp)


def pruning_precision(keep, mask, window: int) -> float:
    """TP / (TP + FP) of kept windows against blurry windows; 1.0 if nothing is kept."""
    keep = np.asarray(keep, dtype=bool)
    blurry = blurry_windows(mask, window)
    if keep.shape != blurry.shape:
        raise DimensionError(f"keep grid {keep.shape} vs mask window grid {blurry.shape}")
    tp = int(np.sum(keep & blurry))
    fp = int(np.sum(keep & ~blurry))
    return precision_from_counts(tp, fp)


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in CSV_FIELDS})


__all__ = [
    "CSV_FIELDS", "PSNR_CAP", "SSIM_WINDOW", "blurry_windows", "precision_from_counts", "psnr",
    "pruning_precision", "ssim_value", "weighted_psnr", "weighted_ssim", "write_metrics_csv",
]
