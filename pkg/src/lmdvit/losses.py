"""Training objectives: confidence supervision and the masked reconstruction loss."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import LossConfig
from .errors import DimensionError
from .tensor import Tensor

LOG_FLOOR = 1e-12


def area_downsample(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Average-pool an (N, H, W) mask onto an (N, height, width) grid."""
    n, h, w = mask.shape
    if h % height or w % width:
        raise DimensionError(f"mask {h}x{w} does not pool evenly onto a {height}x{width} grid")
    fh, fw = h // height, w // width
    return mask.reshape(n, height, fh, width, fw).mean(axis=(2, 4))


def _mask3(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        return m[None]
    if m.ndim == 4:
        return m[:, 0]
    if m.ndim == 3:
        return m
    raise DimensionError(f"mask must be (H,W), (N,H,W) or (N,1,H,W), got {m.shape}")


def confidence_ce(conf: Tensor, target: np.ndarray) -> Tensor:
    """Token-mean binary cross entropy between p_keep and a soft target in [0, 1]."""
    if conf.shape[:-1] != target.shape:
        raise DimensionError(f"confidence grid {conf.shape[:-1]} vs target {target.shape}")
    logp = T.log(conf, eps=LOG_FLOOR)
    t = np.stack([target, 1.0 - target], axis=-1)
    return -T.tsum(logp * t) * (1.0 / target.size)


def pruning_loss(confidences, mask, weight: float = 0.01) -> Tensor:
    """``weight`` times the summed per-stage cross entropy against the pooled blur mask.

    ``mask`` must be at the padded network resolution; stages with a ``None``
    confidence (no pruning) are skipped.
    """
    m = _mask3(mask)
    total = None
    for conf in confidences:
        if conf is None:
            continue
        target = area_downsample(m, conf.shape[1], conf.shape[2])
        ce = confidence_ce(conf, target)
        total = ce if total is None else total + ce
    if total is None:
        return Tensor(np.zeros(()))
    return total * weight


# -- SSIM ----------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _window_size(h: int, w: int) -> int:
    size = min(SSIM_WINDOW, h, w)
    return size if size % 2 else size - 1


def band_matrix(n: int, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """(n - size + 1, n) matrix applying the 1-D Gaussian over valid positions."""
    g = gaussian_window(size, sigma)
    out = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        out[i, i:i + size] = g
    return out


def ssim_map(a, b, peak: float = 1.0) -> Tensor:
    """Per-pixel SSIM over the valid region of (..., H, W) inputs."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim operands differ in shape: {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    size = _window_size(h, w)
    gh = Tensor(band_matrix(h, size))
    gwt = Tensor(band_matrix(w, size).T)

    def filt(x):
        return T.matmul(T.matmul(gh, x), gwt)

    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    mu_a, mu_b = filt(a), filt(b)
    aa, bb, ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = filt(a * a) - aa
    var_b = filt(b * b) - bb
    cov = filt(a * b) - ab
    num = (ab * 2.0 + c1) * (cov * 2.0 + c2)
    den = (aa + bb + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, peak: float = 1.0) -> Tensor:
    return T.mean(ssim_map(a, b, peak))


# -- reconstruction ------------------------------------------------------------

def fft_l1(a, b) -> Tensor:
    """Mean absolute difference of the unnormalized 2-D DFT planes, per channel."""
    return T.mean(T.absolute(T.fft2(T.sub(a, b))))


def base_loss(a, b, weights: LossConfig) -> Tensor:
    diff = T.sub(a, b)
    loss = T.mean(T.absolute(diff)) * weights.l1_weight
    if weights.ssim_weight:
        loss = loss + (1.0 - ssim(a, b)) * weights.ssim_weight
    if weights.fft_weight:
        loss = loss + fft_l1(a, b) * weights.fft_weight
    return loss


def reconstruction_loss(pred, sharp, mask, weights: LossConfig | None = None) -> Tensor:
    """Blur-weighted loss: w on the masked pair, 1 - w on the complementary pair."""
    weights = weights or LossConfig()
    pred = T.as_tensor(pred)
    sharp = np.asarray(sharp, dtype=np.float64)
    if pred.shape != sharp.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {sharp.shape}")
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == pred.ndim - 1:
        m = m[None] if pred.ndim == 3 else m[:, None]
    try:
        np.broadcast_shapes(m.shape, pred.shape)
    except ValueError as exc:
        raise DimensionError(f"mask {m.shape} does not broadcast to {pred.shape}") from exc
    inv = 1.0 - m
    w = weights.blur_weight
    blur = base_loss(pred * m, sharp * m, weights)
    sharp_part = base_loss(pred * inv, sharp * inv, weights)
    return blur * w + sharp_part * (1.0 - w)


def total_loss(result, sharp, mask, padded_mask, weights: LossConfig | None = None):
    """Reconstruction plus pruning loss; returns (total, recon, prune)."""
    weights = weights or LossConfig()
    recon = reconstruction_loss(result.output, sharp, mask, weights)
    prune = pruning_loss(result.confidences, padded_mask, weights.prune_weight)
    return recon + prune, recon, prune
