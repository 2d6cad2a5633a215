"""Window transformer layers and the adaptive window pruning blocks.

A block sees channels-last maps ``(N, H, W, C)``. In ``train`` mode every
window runs through attention and feed-forward, then windows that the pooled
decision prunes are restored to their masked input, so the dense pass
computes exactly what the sparse ``infer`` pass computes on kept windows
only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .nn import LayerNorm, Linear, Module, to_channels_first, to_channels_last, trunc_normal
from .pruning import ConfidencePredictor, apply_decision, decide_test, decide_train, pool_to_windows
from .tensor import Tensor
from .windowing import (
    RelativePositionTable,
    WindowGrid,
    cyclic_shift,
    gather_kept,
    partition,
    reverse,
    scatter_back,
)

MODES = ("train", "infer")


@dataclass
class PassContext:
    """Per-forward settings shared by all blocks."""

    mode: str = "train"
    beta: float = 0.5
    s: float = 0.5
    tau: float = 1.0
    rng: np.random.Generator | None = None
    hard: bool = True
    unmasked_train: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")


class WindowAttention(Module):
    def __init__(self, rng, dim: int, heads: int, window: int):
        if heads <= 0 or dim % heads:
            raise ConfigError(f"channels {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim, zero=True)
        self.pos = RelativePositionTable(rng, window, heads)

    def __call__(self, windows: Tensor) -> Tensor:
        nw, t, c = windows.shape
        h = self.heads
        qkv = T.reshape(self.qkv(windows), (nw, t, 3, h, c // h))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = T.matmul(q * self.scale, T.swapaxes(k, -1, -2)) + self.pos()
        out = T.matmul(T.softmax(logits, axis=-1), v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (nw, t, c))
        return self.proj(out)


class WLeFF(Module):
    """Feed-forward with a depthwise 3x3 conv run inside each window (reflect padded).

    With ``windowed=False`` it is the global LeFF: the conv runs over the whole
    map with zero padding.
    """

    def __init__(self, rng, dim: int, hidden: int, window: int, windowed: bool = True):
        self.window = window
        self.hidden = hidden
        self.windowed = windowed
        self.fc1 = Linear(rng, dim, hidden)
        self.dw_weight = T.parameter(trunc_normal(rng, (3, 3, hidden)))
        self.dw_bias = T.parameter(np.zeros(hidden))
        self.fc2 = Linear(rng, hidden, dim, zero=True)

    def _conv(self, grid: Tensor, mode: str) -> Tensor:
        y = T.pad(grid, 1, mode, axes=(-3, -2))
        return T.gelu(T.depthwise_conv2d_hwc(y, self.dw_weight, self.dw_bias))

    def __call__(self, windows: Tensor) -> Tensor:
        nw, t, _ = windows.shape
        w = self.window
        y = T.reshape(T.gelu(self.fc1(windows)), (nw, w, w, self.hidden))
        y = T.reshape(self._conv(y, "reflect"), (nw, t, self.hidden))
        return self.fc2(y)

    def forward_map(self, x: Tensor) -> Tensor:
        y = self._conv(T.gelu(self.fc1(x)), "zero")
        return self.fc2(y)


@dataclass
class BlockOutput:
    x: Tensor
    decision: Tensor | None
    confidence: Tensor | None
    keep: np.ndarray


class AdaWPTBlock(Module):
    """One pruning transformer block.

    ``kind`` "F" owns a confidence predictor and produces the stage decision;
    "P" reuses it. With ``prunes=False`` the block is a plain window
    transformer block.
    """

    def __init__(self, rng, dim: int, heads: int, window: int, shifted: bool = False,
                 kind: str = "F", prunes: bool = True, leff_variant: str = "wleff",
                 mlp_ratio: int = 4):
        if kind not in ("F", "P"):
            raise ConfigError(f"block kind must be F or P, got {kind!r}")
        if leff_variant not in ("wleff", "leff"):
            raise ConfigError(f"unknown feed-forward variant {leff_variant!r}")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.shifted = shifted
        self.kind = kind
        self.prunes = prunes
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, heads, window)
        self.norm2 = LayerNorm(dim)
        self.ffn = WLeFF(rng, dim, mlp_ratio * dim, window, windowed=leff_variant == "wleff")
        self.predictor = ConfidencePredictor(rng, dim) if (prunes and kind == "F") else None

    def sublayers(self, windows: Tensor) -> Tensor:
        y = windows + self.attn(self.norm1(windows))
        if self.ffn.windowed:
            y = y + self.ffn(self.norm2(y))
        return y

    def __call__(self, x: Tensor, ctx: PassContext, decision: Tensor | None = None,
                 prev_decision: np.ndarray | None = None,
                 forced: np.ndarray | None = None) -> BlockOutput:
        if x.ndim != 4 or x.shape[-1] != self.dim:
            raise DimensionError(f"block expects (N,H,W,{self.dim}) input, got {x.shape}")
        n, h, w, _ = x.shape
        grid = WindowGrid.for_map(h, w, self.window, self.shifted, self.dim)
        conf = None
        if self.predictor is not None:
            conf = self.predictor(x, prev_decision)
            if forced is not None:
                decision = T.Tensor(np.asarray(forced, dtype=np.float64).reshape(n, h, w, 1))
            elif ctx.mode == "train":
                decision = decide_train(conf, ctx.tau, ctx.rng, hard=ctx.hard)
            else:
                decision = decide_test(conf, ctx.beta)
        elif self.prunes and decision is None:
            raise UsageError("an AdaWPT-P block needs the decision of its stage's AdaWPT-F block")
        if not self.prunes:
            decision = None

        if decision is not None:
            x = apply_decision(x, decision)
            keep = pool_to_windows(decision, self.window, ctx.s, grid.shift)
        else:
            keep = np.ones(n * grid.num_windows, dtype=bool)

        win = partition(cyclic_shift(x, grid.shift), self.window)
        if ctx.mode == "train":
            out = self.sublayers(win)
            if not (ctx.unmasked_train or keep.all()):
                out = T.where(keep[:, None, None], out, win)
        elif keep.all():
            out = self.sublayers(win)
        elif not keep.any():
            out = win
        else:
            out = scatter_back(self.sublayers(gather_kept(win, keep)), win, keep)
        y = cyclic_shift(reverse(out, self.window, h, w), grid.shift, "inv")

        if not self.ffn.windowed:
            z = y + self.ffn.forward_map(self.norm2(y))
            if (ctx.unmasked_train and ctx.mode == "train") or keep.all():
                y = z
            else:
                y = T.where(self._token_keep(keep, grid, n)[..., None], z, y)
        return BlockOutput(y, decision, conf, keep)

    def _token_keep(self, keep: np.ndarray, grid: WindowGrid, n: int) -> np.ndarray:
        w = self.window
        m = keep.reshape(n, grid.grid_h, grid.grid_w)
        m = np.repeat(np.repeat(m, w, axis=1), w, axis=2)
        return np.roll(m, (grid.shift, grid.shift), (1, 2)) if grid.shift else m


@dataclass
class StageOutput:
    x: Tensor
    decision: Tensor | None
    confidence: Tensor | None
    keeps: list = field(default_factory=list)


class AdaWPTStage(Module):
    """An AdaWPT-F block followed by ``depth - 1`` AdaWPT-P blocks.

    Even-indexed blocks use unshifted windows, odd-indexed ones shift by half
    a window.
    """

    def __init__(self, rng, dim: int, heads: int, window: int, depth: int, prunes: bool = True,
                 leff_variant: str = "wleff", mlp_ratio: int = 4):
        if depth < 1:
            raise ConfigError("stage depth must be at least 1")
        self.dim = dim
        self.prunes = prunes
        self.blocks = [
            AdaWPTBlock(rng, dim, heads, window, shifted=i % 2 == 1, kind="F" if i == 0 else "P",
                        prunes=prunes, leff_variant=leff_variant, mlp_ratio=mlp_ratio)
            for i in range(depth)
        ]

    def __call__(self, x: Tensor, ctx: PassContext, prev_decision: np.ndarray | None = None,
                 forced: np.ndarray | None = None) -> StageOutput:
        first = self.blocks[0](x, ctx, prev_decision=prev_decision, forced=forced)
        out = StageOutput(first.x, first.decision, first.confidence, [first.keep])
        for blk in self.blocks[1:]:
            res = blk(out.x, ctx, decision=out.decision)
            out.x = res.x
            out.keeps.append(res.keep)
        return out


class Downsample(Module):
    """4x4 stride-2 convolution: (N, H, W, C) -> (N, H/2, W/2, C_out)."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.weight = T.parameter(trunc_normal(rng, (c_out, c_in, 4, 4)))
        self.bias = T.parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise DimensionError(f"downsample needs even extents, got {x.shape[1]}x{x.shape[2]}")
        y = T.conv2d(to_channels_first(x), self.weight, self.bias, stride=2, padding=("zero", 1))
        return to_channels_last(y)


class Upsample(Module):
    """2x2 stride-2 transposed convolution: (N, H, W, C) -> (N, 2H, 2W, C_out)."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.weight = T.parameter(trunc_normal(rng, (c_in, c_out, 2, 2)))
        self.bias = T.parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv_transpose2d(to_channels_first(x), self.weight, self.bias, stride=2)
        return to_channels_last(y)
