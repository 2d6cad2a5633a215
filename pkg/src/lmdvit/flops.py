"""Analytic multiply-accumulate model of the network, parameterized by kept windows.

Matrix products and convolutions are reported as MACs with FLOPs = 2 * MACs;
elementwise work is reported directly in FLOPs. Window attention and
the windowed feed-forward are window-local and scale with the number of kept
windows of their block; everything else (layer norms, the confidence
predictor, decision masking, convolutions, down/up-sampling and the global
LeFF variant) is counted densely. Elementwise nonlinearities and residual
adds are not counted. Each layer norm costs 4 ops per channel and token, and
each position-bias add one op.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import BOTTLENECK, ENCODER_STAGES, NUM_STAGES, ModelConfig
from .errors import UsageError

LN_OPS_PER_CHANNEL = 4


@dataclass
class LayerCost:
    name: str
    stage: int
    block: int
    macs: float
    window_local: bool
    gemm: bool
    ops: float = 0.0  # elementwise operations, not multiply-accumulates

    @property
    def flops(self) -> float:
        return 2.0 * self.macs + self.ops


@dataclass
class FlopsReport:
    height: int
    width: int
    layers: list = field(default_factory=list)
    dense_layers: list = field(default_factory=list)

    @staticmethod
    def _sum(layers, pred=lambda layer: True) -> float:
        return float(sum(layer.flops for layer in layers if pred(layer)))

    @property
    def dense_total(self) -> float:
        return self._sum(self.dense_layers)

    @property
    def pruned_total(self) -> float:
        return self._sum(self.layers)

    @property
    def reduction(self) -> float:
        d = self.dense_total
        return 0.0 if d == 0 else 1.0 - self.pruned_total / d

    @property
    def window_local_dense(self) -> float:
        return self._sum(self.dense_layers, lambda layer: layer.window_local)

    @property
    def window_local_pruned(self) -> float:
        return self._sum(self.layers, lambda layer: layer.window_local)

    @property
    def window_local_reduction(self) -> float:
        d = self.window_local_dense
        return 0.0 if d == 0 else 1.0 - self.window_local_pruned / d

    def stage_flops(self, stage: int, window_local_only: bool = False) -> float:
        return self._sum(self.layers, lambda layer: layer.stage == stage
                         and (layer.window_local or not window_local_only))

    def gemm_macs(self) -> float:
        """MACs of layers that the tensor core's instrumentation counts."""
        return float(sum(layer.macs for layer in self.layers if layer.gemm))

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "dense_flops": self.dense_total,
            "pruned_flops": self.pruned_total,
            "reduction": self.reduction,
            "window_local_dense_flops": self.window_local_dense,
            "window_local_pruned_flops": self.window_local_pruned,
            "window_local_reduction": self.window_local_reduction,
            "layers": [
                {"name": layer.name, "stage": layer.stage, "block": layer.block,
                 "flops": layer.flops, "window_local": layer.window_local}
                for layer in self.layers
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def stage_windows(config: ModelConfig, height: int, width: int) -> list[int]:
    """Windows per image at every stage for an input of the given extents."""
    m = config.pad_multiple
    ph, pw = -(-height // m) * m, -(-width // m) * m
    out = []
    for i in range(NUM_STAGES):
        f = config.stage_scale(i)
        out.append((ph // f // config.window_size) * (pw // f // config.window_size))
    return out


def _expand_kept(config: ModelConfig, kept, totals) -> list[list[float]]:
    if kept is None:
        return [[float(t)] * d for t, d in zip(totals, config.depths)]
    if len(kept) != NUM_STAGES:
        raise UsageError(f"kept counts need {NUM_STAGES} stage entries, got {len(kept)}")
    out = []
    for i, (k, total, depth) in enumerate(zip(kept, totals, config.depths)):
        per_block = [k] * depth if np.isscalar(k) else list(k)
        if len(per_block) != depth:
            raise UsageError(f"stage {i}: {len(per_block)} kept counts for {depth} blocks")
        for c in per_block:
            if c < 0 or c > total:
                raise UsageError(f"stage {i}: kept count {c} outside [0, {total}]")
        out.append([float(c) for c in per_block])
    return out


def _block_layers(config: ModelConfig, stage: int, block: int, tokens: int, kept: float):
    dim = config.stage_channels()[stage]
    heads = config.stage_heads()[stage]
    t = config.window_size ** 2
    hid = config.mlp_ratio * dim
    pruning = stage in config.prune_stages
    layers = [LayerCost("norm", stage, block, 0, False, False,
                        2 * LN_OPS_PER_CHANNEL * dim * tokens)]
    if pruning:
        if block == 0:
            half = max(dim // 2, 1)
            pred = tokens * (2 * dim * half + 2 * half * half + 2 * half)
            layers.append(LayerCost("predictor", stage, block, pred, False, True))
        layers.append(LayerCost("decision_mask", stage, block, 0, False, False, tokens * dim))
    layers += [
        LayerCost("attn_qkv", stage, block, kept * t * dim * 3 * dim, True, True),
        LayerCost("attn_scores", stage, block, kept * 2 * t * t * dim, True, True),
        LayerCost("attn_bias", stage, block, 0, True, False, kept * heads * t * t),
        LayerCost("attn_proj", stage, block, kept * t * dim * dim, True, True),
    ]
    ffn = (dim * hid + 9 * hid + hid * dim)
    if config.leff_variant == "wleff":
        layers.append(LayerCost("wleff", stage, block, kept * t * ffn, True, True))
    else:
        layers.append(LayerCost("leff", stage, block, tokens * ffn, False, True))
    return layers


def flops_report(config: ModelConfig, kept=None, height: int = 64, width: int = 64) -> FlopsReport:
    """Per-layer cost of one image of the given extents.

    ``kept`` lists, per stage, either one kept-window count for all of its
    blocks or one count per block; ``None`` keeps every window. Counts may be
    fractional (expected counts).
    """
    if height < 1 or width < 1:
        raise UsageError("image extents must be positive")
    totals = stage_windows(config, height, width)
    kept_blocks = _expand_kept(config, kept, totals)
    dense_blocks = _expand_kept(config, None, totals)
    m = config.pad_multiple
    ph, pw = -(-height // m) * m, -(-width // m) * m
    c = config.base_channels

    def fixed():
        out = [LayerCost("in_proj", -1, 0, ph * pw * 3 * 9 * c, False, True),
               LayerCost("in_norm", -1, 0, 0, False, False, LN_OPS_PER_CHANNEL * c * ph * pw)]
        for i in range(ENCODER_STAGES):
            f = 2 ** (i + 1)
            out.append(LayerCost("downsample", i, 0,
                                 (ph // f) * (pw // f) * 16 * c * 2 ** i * c * 2 ** (i + 1), False, True))
        up_io = [(16 * c, 8 * c), (16 * c, 4 * c), (8 * c, 2 * c), (4 * c, c)]
        for j, (a, b) in enumerate(up_io):
            f = 2 ** (ENCODER_STAGES - j)
            out.append(LayerCost("upsample", BOTTLENECK + 1 + j, 0, (ph // f) * (pw // f) * a * b * 4,
                                 False, True))
        out.append(LayerCost("out_proj", NUM_STAGES, 0, ph * pw * 2 * c * 9 * 3, False, True))
        return out

    report = FlopsReport(height, width)
    for blocks_kept, target in ((kept_blocks, report.layers), (dense_blocks, report.dense_layers)):
        target.extend(fixed())
        for i in range(NUM_STAGES):
            f = config.stage_scale(i)
            tokens = (ph // f) * (pw // f)
            for j, k in enumerate(blocks_kept[i]):
                target.extend(_block_layers(config, i, j, tokens, k))
    return report
