"""Window partitioning, cyclic shifts and the kept-window gather/scatter.

Feature maps are channels-last, ``(N, H, W, C)`` or unbatched ``(H, W, C)``.
Windows are numbered row-major over the grid, and tokens row-major inside
each window; the same order is used for decision pooling and FLOPs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Module, trunc_normal
from .tensor import Tensor


@dataclass(frozen=True)
class WindowGrid:
    window: int
    grid_h: int
    grid_w: int
    shift: int = 0
    channels: int = 0

    @classmethod
    def for_map(cls, height: int, width: int, window: int, shifted: bool = False,
                channels: int = 0) -> "WindowGrid":
        if height % window or width % window:
            raise DimensionError(f"map {height}x{width} is not divisible by window {window}")
        # a grid holding a single window has nothing to exchange across borders
        shift = window // 2 if shifted and (height > window or width > window) else 0
        return cls(window, height // window, width // window, shift, channels)

    @property
    def num_windows(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def tokens(self) -> int:
        return self.window * self.window


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (N,H,W,C) or (H,W,C) map, got {x.shape}")
    return x, False


def partition(x: Tensor, window: int) -> Tensor:
    """(N, H, W, C) -> (N * nW, window**2, C)."""
    x, _ = _batched(x)
    n, h, w, c = x.shape
    if h % window or w % window:
        raise DimensionError(f"map {h}x{w} is not divisible by window {window}")
    gh, gw = h // window, w // window
    y = T.reshape(x, (n, gh, window, gw, window, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (n * gh * gw, window * window, c))


def reverse(windows: Tensor, window: int, height: int, width: int) -> Tensor:
    """Inverse of ``partition``; returns (N, H, W, C)."""
    gh, gw = height // window, width // window
    c = windows.shape[-1]
    n = windows.shape[0] // (gh * gw)
    if n * gh * gw != windows.shape[0] or windows.shape[1] != window * window:
        raise DimensionError(f"{windows.shape} windows do not tile a {height}x{width} map")
    y = T.reshape(windows, (n, gh, gw, window, window, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (n, height, width, c))


def partition_array(a: np.ndarray, window: int) -> np.ndarray:
    """``partition`` for plain (N, H, W) arrays such as decision maps -> (N*nW, w*w)."""
    n, h, w = a.shape
    gh, gw = h // window, w // window
    return a.reshape(n, gh, window, gw, window).transpose(0, 1, 3, 2, 4).reshape(n * gh * gw, -1)


def cyclic_shift(x: Tensor, offset: int, direction: str = "fwd") -> Tensor:
    """Toroidal roll of the spatial axes by ``-offset`` (fwd) or ``+offset`` (inv)."""
    if offset == 0:
        return x
    s = -offset if direction == "fwd" else offset
    return T.roll(x, (s, s), (-3, -2))


def shift_array(a: np.ndarray, offset: int, direction: str = "fwd") -> np.ndarray:
    if offset == 0:
        return a
    s = -offset if direction == "fwd" else offset
    return np.roll(a, (s, s), (-2, -1))


def gather_kept(windows: Tensor, keep: np.ndarray) -> Tensor:
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (windows.shape[0],):
        raise DimensionError(f"keep mask {keep.shape} does not match {windows.shape[0]} windows")
    return T.take(windows, np.flatnonzero(keep), axis=0)


def scatter_back(processed: Tensor, originals: Tensor, keep: np.ndarray) -> Tensor:
    """Place processed windows at kept positions and the originals elsewhere."""
    keep = np.asarray(keep, dtype=bool)
    idx = np.flatnonzero(keep)
    if keep.shape != (originals.shape[0],) or processed.shape[0] != idx.size:
        raise DimensionError(
            f"scatter_back: {processed.shape[0]} processed windows for {idx.size} kept of "
            f"{originals.shape[0]}")
    return T.index_put(originals, idx, processed)


def relative_position_index(window: int) -> np.ndarray:
    """(w*w, w*w) map into a (2w-1)**2 bias table, indexed by coordinate offsets."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel.transpose(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


class RelativePositionTable(Module):
    """Learnable per-head bias added to window attention logits."""

    def __init__(self, rng, window: int, heads: int):
        self.window = window
        self.heads = heads
        self.table = T.parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
        self.index = relative_position_index(window)

    def __call__(self) -> Tensor:
        t = self.window * self.window
        bias = T.take(self.table, self.index.reshape(-1), axis=0)
        bias = T.reshape(bias, (t, t, self.heads))
        return T.transpose(bias, (2, 0, 1))
