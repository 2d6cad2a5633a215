"""Synthetic locally motion-blurred samples with exact masks, plus PPM/PGM I/O.

A sample composites a textured object layer over a textured background. The
blurred image convolves the premultiplied object layer and its alpha with a
linear motion kernel, so outside the kernel's reach the blurred and sharp
images agree bit for bit. The mask is the object support dilated by half the
kernel length.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import DataConfig
from .errors import ConfigError, FormatError, UsageError

GenConfig = DataConfig

FEATHER_PX = 2
MAX_RETRIES = 20
BISECTION_STEPS = 24


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Stable child seed for a (seed, keys...) tuple."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, np.uint64)[0])


# -- procedural content ------------------------------------------------------

def _grid(h: int, w: int):
    return np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")


def _band_noise(rng, shape, sigma: float) -> np.ndarray:
    n = rng.standard_normal(shape)
    n = ndimage.gaussian_filter(n, sigma=(0, sigma, sigma), mode="wrap")
    return n / (n.std() + 1e-12)


def gen_sharp(seed: int, height: int, width: int) -> np.ndarray:
    """Procedural (3, H, W) image in [0, 1]: gradient, shapes and band-limited noise."""
    if height < 1 or width < 1:
        raise UsageError("image extents must be positive")
    rng = philox(seed)
    yy, xx = _grid(height, width)
    c0 = rng.uniform(0.2, 0.8, size=(3, 1, 1))
    gy, gx = rng.uniform(-0.3, 0.3, size=(2, 3, 1, 1))
    img = c0 + gy * (yy - 0.5) + gx * (xx - 0.5)
    for _ in range(rng.integers(3, 7)):
        y0, x0 = rng.uniform(-0.1, 0.9, size=2)
        hh, ww = rng.uniform(0.08, 0.4, size=2)
        inside = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        a = rng.uniform(0.6, 1.0)
        img = np.where(inside, (1 - a) * img + a * rng.uniform(0, 1, size=(3, 1, 1)), img)
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.05, 0.25, size=2)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img = np.where(inside, rng.uniform(0, 1, size=(3, 1, 1)), img)
    img = img + rng.uniform(0.15, 0.2) * _band_noise(rng, (3, height, width), rng.uniform(0.5, 0.7))
    return np.clip(img, 0.0, 1.0)


def gen_object_texture(seed: int, height: int, width: int) -> np.ndarray:
    """Contrast-boosted procedural content for the moving object layer."""
    base = gen_sharp(seed, height, width)
    return np.clip(0.5 + 1.6 * (base - base.mean(axis=(1, 2), keepdims=True)), 0.0, 1.0)


# -- motion blur -------------------------------------------------------------

def motion_kernel(length: float, angle: float) -> np.ndarray:
    """Antialiased linear motion kernel of the given length (px) and angle (rad).

    The segment is centered on the kernel and sampled densely with bilinear
    splatting; the result is point-symmetric and sums to 1. ``length`` 1
    gives the delta kernel.
    """
    if length < 1:
        raise ConfigError(f"kernel length must be >= 1, got {length}")
    half = (length - 1) / 2.0
    r = int(math.ceil(half))
    size = 2 * r + 1
    k = np.zeros((size, size))
    n = max(int(math.ceil(8 * length)), 1) | 1
    ts = np.linspace(-half, half, n)
    dy, dx = -np.sin(angle), np.cos(angle)
    for t in ts:
        y, x = r + t * dy, r + t * dx
        y0, x0 = math.floor(y), math.floor(x)
        fy, fx = y - y0, x - x0
        for oy, wy in ((0, 1 - fy), (1, fy)):
            for ox, wx in ((0, 1 - fx), (1, fx)):
                if wy * wx > 0:
                    k[y0 + oy, x0 + ox] += wy * wx
    # symmetrize so floating round-off cannot skew the center of mass
    k = 0.5 * (k + k[::-1, ::-1])
    return k / k.sum()


def blur(img: np.ndarray, kernel: np.ndarray, mode: str = "constant") -> np.ndarray:
    """Direct 2-D convolution of each channel of (C, H, W) ``img``."""
    return np.stack([ndimage.convolve(ch, kernel, mode=mode, cval=0.0) for ch in img])


# -- objects -----------------------------------------------------------------

@dataclass
class ObjectShape:
    kind: str
    cy: float
    cx: float
    ry: float
    rx: float
    rot: float
    vertices: list = field(default_factory=list)

    def raster(self, height: int, width: int, scale: float) -> np.ndarray:
        yy, xx = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
        y = (yy / height - self.cy)
        x = (xx / width - self.cx)
        c, s = math.cos(self.rot), math.sin(self.rot)
        u, v = c * y + s * x, -s * y + c * x
        ry, rx = self.ry * scale, self.rx * scale
        if self.kind == "ellipse":
            return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
        ang = np.arctan2(u / ry, v / rx)
        rad = np.hypot(u / ry, v / rx)
        verts = np.asarray(self.vertices)
        # star-shaped polygon: radius interpolated between vertex radii by angle
        k = len(verts)
        pos = (ang + math.pi) / (2 * math.pi) * k
        i0 = np.floor(pos).astype(int) % k
        frac = pos - np.floor(pos)
        bound = (1 - frac) * verts[i0] + frac * verts[(i0 + 1) % k]
        return rad <= bound


def _draw_shapes(rng, count: int) -> list[ObjectShape]:
    shapes = []
    for _ in range(count):
        kind = "ellipse" if rng.random() < 0.5 else "polygon"
        verts = list(rng.uniform(0.6, 1.0, size=rng.integers(5, 9))) if kind == "polygon" else []
        shapes.append(ObjectShape(kind, float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)),
                                  float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.5, 1.0)),
                                  float(rng.uniform(0, math.pi)), [float(v) for v in verts]))
    return shapes


def _support(shapes, height, width, scale) -> np.ndarray:
    out = np.zeros((height, width), dtype=bool)
    for sh in shapes:
        out |= sh.raster(height, width, scale)
    return out


def dilate(support: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return support.copy()
    return ndimage.binary_dilation(support, structure=np.ones((2 * radius + 1, 2 * radius + 1), bool))


def feathered_alpha(support: np.ndarray, feather: int = FEATHER_PX) -> np.ndarray:
    """Alpha ramping from the support edge inward over ``feather`` pixels."""
    if not support.any():
        return np.zeros(support.shape)
    dist = ndimage.distance_transform_edt(np.pad(support, 1))[1:-1, 1:-1]
    return np.clip(dist / feather, 0.0, 1.0) * support


def _fit_scale(shapes, height, width, radius, target) -> float | None:
    def frac(scale):
        return dilate(_support(shapes, height, width, scale), radius).mean()

    lo, hi = 1e-3, 1.0
    if frac(lo) > target or frac(hi) < target:
        return None
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if frac(mid) < target:
            lo = mid
        else:
            hi = mid
    a, b = frac(lo), frac(hi)
    return lo if abs(a - target) <= abs(b - target) else hi


@dataclass
class BlurSample:
    blur: np.ndarray
    sharp: np.ndarray
    mask: np.ndarray
    meta: dict


def gen_sample(seed: int, cfg: GenConfig | None = None) -> BlurSample:
    """One (blurred, sharp, mask) triple, deterministic in ``seed``."""
    cfg = cfg or GenConfig()
    rng = philox(seed)
    h, w = cfg.height, cfg.width
    length = int(rng.integers(cfg.kernel_length[0], cfg.kernel_length[1] + 1))
    angle = float(rng.uniform(0, math.pi))
    kernel = motion_kernel(length, angle)
    background = gen_sharp(derive_seed(seed, 0), h, w)
    meta = {"seed": int(seed), "length": length, "angle": angle}
    if rng.random() < cfg.global_prob:
        blurred = blur(background, kernel, mode="reflect")
        meta.update(kind="global", objects=[])
        return BlurSample(blurred, background, np.ones((1, h, w)), meta)

    radius = math.ceil(length / 2)
    for _ in range(MAX_RETRIES):
        shapes = _draw_shapes(rng, int(rng.integers(cfg.objects[0], cfg.objects[1] + 1)))
        scale = _fit_scale(shapes, h, w, radius, cfg.blur_fraction)
        if scale is not None:
            break
    else:
        raise ConfigError(f"could not place objects covering {cfg.blur_fraction:.2f} of a {h}x{w} frame")
    support = _support(shapes, h, w, scale)
    alpha = feathered_alpha(support)[None]
    obj = gen_object_texture(derive_seed(seed, 2), h, w)
    sharp = alpha * obj + (1 - alpha) * background
    blur_alpha = blur(alpha, kernel)
    blurred = blur(alpha * obj, kernel) + (1 - blur_alpha) * background
    mask = dilate(support, radius)[None].astype(np.float64)
    meta.update(kind="local", scale=scale,
                objects=[{k: v for k, v in asdict(s).items()} for s in shapes])
    return BlurSample(np.clip(blurred, 0.0, 1.0), sharp, mask, meta)


# -- PPM / PGM ---------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    return to_uint8(img).astype(np.float64) / 255.0


def _write_pnm(path, magic: bytes, pixels: np.ndarray, h: int, w: int) -> None:
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file, found {data[:2]!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError as exc:
            raise FormatError(f"{path}: malformed header field {data[start:pos]!r}") from exc
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad extents {w}x{h}")
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit files are supported (maxval {maxval})")
    need = w * h * channels
    body = data[pos:pos + need]
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)


def write_image(path, img: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as binary PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise UsageError(f"expected a (3,H,W) image, got {img.shape}")
    _write_pnm(path, b"P6", np.ascontiguousarray(to_uint8(img).transpose(1, 2, 0)), *img.shape[1:])


def read_image(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_gray(path, img: np.ndarray) -> None:
    """Write an (H, W) or (1, H, W) map in [0, 1] as binary PGM."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[0]
    _write_pnm(path, b"P5", np.ascontiguousarray(to_uint8(img)), *img.shape)


def write_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise UsageError("masks must be binary")
    write_gray(path, m.astype(np.float64))


def read_mask(path) -> np.ndarray:
    """(1, H, W) binary mask; any value other than 0 or 255 is rejected."""
    raw = _read_pnm(path, b"P5", 1)[..., 0]
    if not np.isin(raw, (0, 255)).all():
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return (raw == 255).astype(np.float64)[None]


# -- dataset directories -----------------------------------------------------

MANIFEST = "manifest.json"


def sample_id(index: int) -> str:
    return f"{index:05d}"


def write_dataset(out_dir, count: int, seed: int, cfg: GenConfig | None = None,
                  split: str = "train", force: bool = False) -> dict:
    cfg = cfg or GenConfig()
    out = Path(out_dir)
    if count < 0:
        raise UsageError("count must be non-negative")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    (out / split).mkdir(parents=True, exist_ok=True)
    ids, seeds = [], []
    for i in range(count):
        sid, s = sample_id(i), derive_seed(seed, i)
        smp = gen_sample(s, cfg)
        write_image(out / split / f"{sid}_blur.ppm", smp.blur)
        write_image(out / split / f"{sid}_sharp.ppm", smp.sharp)
        write_mask(out / split / f"{sid}_mask.pgm", smp.mask)
        ids.append(sid)
        seeds.append(s)
    cfg_dict = asdict(cfg)
    cfg_dict = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg_dict.items()}
    manifest = {"split": split, "seed": int(seed), "count": count, "ids": ids, "seeds": seeds,
                "gen_config": cfg_dict}
    with open(out / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


@dataclass
class Example:
    sample_id: str
    blur: np.ndarray
    sharp: np.ndarray
    mask: np.ndarray | None


def load_dataset(data_dir, require_masks: bool = True) -> list[Example]:
    root = Path(data_dir)
    man_path = root / MANIFEST
    if not man_path.is_file():
        raise FormatError(f"{root}: no {MANIFEST}")
    try:
        manifest = json.loads(man_path.read_text(encoding="utf-8"))
        split, ids = manifest["split"], manifest["ids"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{man_path}: malformed manifest ({exc})") from exc
    out = []
    for sid in ids:
        base = root / split / sid
        mask_path = Path(f"{base}_mask.pgm")
        if not mask_path.is_file():
            if require_masks:
                raise UsageError(f"sample {sid}: missing mask {mask_path}")
            mask = None
        else:
            mask = read_mask(mask_path)
        for suffix in ("blur", "sharp"):
            if not os.path.isfile(f"{base}_{suffix}.ppm"):
                raise FormatError(f"sample {sid}: missing {suffix} image")
        out.append(Example(sid, read_image(f"{base}_blur.ppm"), read_image(f"{base}_sharp.ppm"), mask))
    return out
