"""The U-shaped pruning transformer, its forward pass and checkpoint files.

Layout: conv in-projection, four encoder stages each followed by a stride-2
down-sampling conv, a bottleneck stage, and four decoder stages that run on
the concatenation of the up-sampled features and the matching encoder
features. A zero-initialized conv out-projection predicts the residual R and
the output is ``B + R``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import AdaWPTStage, Downsample, PassContext, Upsample
from .config import BOTTLENECK, ENCODER_STAGES, NUM_STAGES, ModelConfig
from .errors import FormatError, UsageError
from .nn import LayerNorm, Module, to_channels_last, trunc_normal
from .pruning import resample_decision
from .tensor import Tensor

MAGIC = b"LMDV"
FORMAT_VERSION = 1


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class ForwardResult:
    """Output image plus the per-stage pruning state of one forward pass.

    ``decisions[i]`` is an (N, h, w) 0/1 array on stage i's token grid and
    ``confidences[i]`` the (N, h, w, 2) confidence Tensor; both are ``None``
    for stages without pruning. ``keeps[i][j]`` holds the window keep flags of
    block j of stage i, shape (N * windows,).
    """

    output: Tensor
    decisions: list
    confidences: list
    keeps: list
    grids: list
    padded: tuple
    batch: int
    window: int

    def kept_ratio(self, stage: int) -> float:
        """Fraction of windows processed in a stage, averaged over its blocks."""
        return float(np.mean([k.mean() for k in self.keeps[stage]]))

    def kept_ratios(self) -> list[float]:
        return [self.kept_ratio(i) for i in range(NUM_STAGES)]

    def kept_counts(self) -> list[list[float]]:
        """Kept windows per image for every block, the input of the FLOPs model."""
        return [[k.sum() / self.batch for k in ks] for ks in self.keeps]

    def window_keep_map(self, stage: int, block: int = 0) -> np.ndarray:
        """Keep flags of one block on its (N, grid_h, grid_w) window grid."""
        h, w = self.grids[stage]
        return self.keeps[stage][block].reshape(self.batch, h // self.window, w // self.window)


class LMDViT(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        rng = philox(seed)
        c = config.base_channels
        dims = config.stage_channels()
        heads = config.stage_heads()
        self.in_weight = T.parameter(trunc_normal(rng, (c, 3, 3, 3)))
        self.in_bias = T.parameter(np.zeros(c))
        self.in_norm = LayerNorm(c)
        self.stages = [
            AdaWPTStage(rng, dims[i], heads[i], config.window_size, config.depths[i],
                        prunes=i in config.prune_stages, leff_variant=config.leff_variant,
                        mlp_ratio=config.mlp_ratio)
            for i in range(NUM_STAGES)
        ]
        self.downs = [Downsample(rng, c * 2 ** i, c * 2 ** (i + 1)) for i in range(ENCODER_STAGES)]
        # up-sampled width for decoder j is half the concatenated width it is joined into
        up_io = [(16 * c, 8 * c), (16 * c, 4 * c), (8 * c, 2 * c), (4 * c, c)]
        self.ups = [Upsample(rng, a, b) for a, b in up_io]
        self.out_weight = T.parameter(np.zeros((3, 2 * c, 3, 3)))
        self.out_bias = T.parameter(np.zeros(3))

    def __call__(self, image, mode: str = "train", rng=None, **kwargs) -> ForwardResult:
        return forward(self, image, mode, rng, **kwargs)


def build(config: ModelConfig, seed: int = 0) -> LMDViT:
    return LMDViT(config, seed)


def pad_input(img: np.ndarray, multiple: int) -> np.ndarray:
    h, w = img.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return img
    # numpy reflects repeatedly when the pad exceeds the extent; a 1-px axis is edge-repeated
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(img, [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)], mode=mode)


def forward(model: LMDViT, image, mode: str = "train", rng=None, *, beta=None, s=None, tau=None,
            forced=None, hard: bool = True) -> ForwardResult:
    """Run the network on ``image`` of shape (3, H, W) or (N, 3, H, W).

    ``forced`` optionally gives, per stage, an (N, h, w) or (h, w) 0/1 map
    that replaces the sampled or thresholded decision. In ``infer`` mode the
    pass records no tape.
    """
    cfg = model.config
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    single = data.ndim == 3
    if single:
        data = data[None]
    if data.ndim != 4 or data.shape[1] != 3:
        raise UsageError(f"expected a 3-channel image (3,H,W) or (N,3,H,W), got {np.shape(image)}")
    n, _, h, w = data.shape
    if h < 1 or w < 1:
        raise UsageError("image extents must be positive")
    ctx = PassContext(mode, cfg.beta if beta is None else beta, cfg.s if s is None else s,
                      cfg.tau if tau is None else tau, rng, hard, cfg.unmasked_train_path)
    if mode == "train" and rng is None:
        ctx.rng = philox(model.seed)
    if forced is not None and len(forced) != NUM_STAGES:
        raise UsageError(f"forced decisions need {NUM_STAGES} entries, got {len(forced)}")

    padded = pad_input(data, cfg.pad_multiple)
    if mode == "infer":
        with T.no_grad():
            res = _run(model, padded, ctx, forced, n)
    else:
        res = _run(model, padded, ctx, forced, n)
    residual = res["residual"][:, :, :h, :w]
    out = T.add(data, residual)
    if single:
        out = T.reshape(out, out.shape[1:])
    return ForwardResult(out, res["decisions"], res["confidences"], res["keeps"], res["grids"],
                         padded.shape[-2:], n, cfg.window_size)


def _run(model: LMDViT, padded: np.ndarray, ctx: PassContext, forced, n: int) -> dict:
    x = T.conv2d(Tensor(padded), model.in_weight, model.in_bias, padding=("zero", 1))
    x = model.in_norm(to_channels_last(T.leaky_relu(x)))
    decisions, confidences, keeps, grids = [], [], [], []
    prev = None
    skips = []

    def run_stage(i, x):
        nonlocal prev
        stage = model.stages[i]
        gh, gw = x.shape[1], x.shape[2]
        grids.append((gh, gw))
        f = None
        if forced is not None and forced[i] is not None and stage.prunes:
            f = np.broadcast_to(np.asarray(forced[i], dtype=np.float64), (n, gh, gw))
        p = resample_decision(prev, gh, gw) if (prev is not None and stage.prunes) else None
        out = stage(x, ctx, prev_decision=p, forced=f)
        if out.decision is not None:
            d = out.decision.data[..., 0].copy()
            prev = d
            decisions.append(d)
            confidences.append(out.confidence)
        else:
            decisions.append(None)
            confidences.append(None)
        keeps.append(out.keeps)
        return out.x

    for i in range(ENCODER_STAGES):
        x = run_stage(i, x)
        skips.append(x)
        x = model.downs[i](x)
    x = run_stage(BOTTLENECK, x)
    for j in range(ENCODER_STAGES):
        x = T.concat([model.ups[j](x), skips[ENCODER_STAGES - 1 - j]], axis=-1)
        x = run_stage(BOTTLENECK + 1 + j, x)
    x = T.transpose(x, (0, 3, 1, 2))
    residual = T.conv2d(x, model.out_weight, model.out_bias, padding=("zero", 1))
    return dict(residual=residual, decisions=decisions, confidences=confidences, keeps=keeps,
                grids=grids)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for ``config``."""
    c = config.base_channels
    w = config.window_size
    r = config.mlp_ratio
    total = 27 * c + c + 2 * c
    for i, (dim, heads, depth) in enumerate(zip(config.stage_channels(), config.stage_heads(),
                                                config.depths)):
        hid = r * dim
        block = (4 * dim                                   # two layer norms
                 + 3 * dim * dim + 3 * dim + dim * dim + dim   # qkv and output projection
                 + (2 * w - 1) ** 2 * heads                # relative position table
                 + dim * hid + hid + 9 * hid + hid + hid * dim + dim)
        total += depth * block
        if i in config.prune_stages:
            half = max(dim // 2, 1)
            total += 2 * (dim * half + half) + (2 * half * half + half) + (half * 2 + 2)
    for i in range(ENCODER_STAGES):
        total += 16 * (c * 2 ** i) * (c * 2 ** (i + 1)) + c * 2 ** (i + 1)
    for a, b in [(16 * c, 8 * c), (16 * c, 4 * c), (8 * c, 2 * c), (4 * c, c)]:
        total += 4 * a * b + b
    total += 9 * 2 * c * 3 + 3
    return total


# checkpoint files ---------------------------------------------------------

def save(model: LMDViT, path) -> None:
    blob = json.dumps({"config": model.config.to_dict(), "seed": model.seed},
                      sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for name, p in model.named_parameters():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}Q", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def load(path) -> LMDViT:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, blob_len = r.unpack("<IQ")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} "
                          f"(this build reads {FORMAT_VERSION})")
    try:
        meta = json.loads(r.take(blob_len).decode("utf-8"))
        config = ModelConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad config header ({exc})") from exc
    state = {}
    while not r.done:
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8", errors="replace")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    model = LMDViT(config, meta.get("seed", 0))
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: parameters do not match the stored config ({exc})") from exc
    return model
