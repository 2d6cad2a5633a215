"""Model configuration, named profiles and JSON (de)serialization."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError

NUM_STAGES = 9
ENCODER_STAGES = 4
BOTTLENECK = 4
ALL_STAGES = tuple(range(NUM_STAGES))


@dataclass(frozen=True)
class ModelConfig:
    window_size: int = 8
    base_channels: int = 32
    depths: tuple = (2,) * NUM_STAGES
    channels_per_head: int = 32
    prune_stages: tuple = ALL_STAGES
    beta: float = 0.5
    s: float = 0.5
    tau: float = 1.0
    leff_variant: str = "wleff"
    unmasked_train_path: bool = False
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "prune_stages", tuple(sorted(int(i) for i in self.prune_stages)))
        self.validate()

    def validate(self) -> None:
        if self.window_size < 2:
            raise ConfigError("window_size must be at least 2")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if len(self.depths) != NUM_STAGES or min(self.depths) < 1:
            raise ConfigError(f"depths needs {NUM_STAGES} positive entries, got {self.depths}")
        if any(i not in ALL_STAGES for i in self.prune_stages) or \
                len(set(self.prune_stages)) != len(self.prune_stages):
            raise ConfigError(f"prune_stages must be distinct indices in 0..8, got {self.prune_stages}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if not 0.0 < self.s <= 1.0:
            raise ConfigError(f"s must lie in (0, 1], got {self.s}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be a positive integer")
        if self.leff_variant not in ("wleff", "leff"):
            raise ConfigError(f"leff_variant must be 'wleff' or 'leff', got {self.leff_variant!r}")
        for dim in self.stage_channels():
            if dim % self.channels_per_head:
                raise ConfigError(
                    f"stage width {dim} is not divisible by channels_per_head {self.channels_per_head}")

    def stage_channels(self) -> tuple:
        """Token width of each of the nine stages (decoders run on the concatenated width)."""
        c = self.base_channels
        return (c, 2 * c, 4 * c, 8 * c, 16 * c, 16 * c, 8 * c, 4 * c, 2 * c)

    def stage_heads(self) -> tuple:
        return tuple(d // self.channels_per_head for d in self.stage_channels())

    @staticmethod
    def stage_scale(stage: int) -> int:
        """Down-sampling factor of a stage's token grid relative to the input."""
        return 2 ** stage if stage <= BOTTLENECK else 2 ** (2 * BOTTLENECK - stage)

    @property
    def pad_multiple(self) -> int:
        return self.window_size * 2 ** ENCODER_STAGES

    def with_updates(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["depths"] = list(self.depths)
        d["prune_stages"] = list(self.prune_stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        profile = d.pop("profile", None)
        base = PROFILES[profile].to_dict() if profile else {}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if profile is not None and profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        base.update(d)
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


TINY = ModelConfig(window_size=4, base_channels=8, depths=(2,) * NUM_STAGES, channels_per_head=8)
FULL = ModelConfig(window_size=8, base_channels=32, depths=(1, 2, 8, 8, 2, 8, 8, 2, 1),
                   channels_per_head=32)
PROFILES = {"tiny": TINY, "full": FULL}


def profile(name: str, **changes) -> ModelConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PROFILES[name].with_updates(**changes) if changes else PROFILES[name]


@dataclass
class _Section:
    """Base for run-config sections: strict key checking on load."""

    @classmethod
    def from_dict(cls, d: dict | None):
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown keys in [{cls.__name__}]: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossConfig(_Section):
    prune_weight: float = 0.01
    blur_weight: float = 0.8
    l1_weight: float = 1.0
    ssim_weight: float = 1.0
    fft_weight: float = 0.1

    def __post_init__(self):
        if min(self.prune_weight, self.l1_weight, self.ssim_weight, self.fft_weight) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.blur_weight <= 1.0:
            raise ConfigError("blur_weight must lie in [0, 1]")


@dataclass
class TrainConfig(_Section):
    steps: int = 200
    batch_size: int = 8
    lr: float = 2e-4
    min_lr: float = 1e-6
    lr_update_every: int = 1
    weight_decay: float = 0.02
    seed: int = 0
    log_every: int = 1
    loss: LossConfig = field(default_factory=LossConfig)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        loss = LossConfig.from_dict(d.pop("loss", None))
        obj = super().from_dict(d)
        obj.loss = loss
        return obj

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")


@dataclass
class DataConfig(_Section):
    height: int = 64
    width: int = 64
    objects: tuple = (1, 2)
    blur_fraction: float = 0.2
    kernel_length: tuple = (5, 15)
    global_prob: float = 0.0

    def __post_init__(self):
        self.objects = tuple(self.objects)
        self.kernel_length = tuple(self.kernel_length)
        if not 0.0 < self.blur_fraction < 1.0:
            raise ConfigError("blur_fraction must lie in (0, 1)")
        if not 0.0 <= self.global_prob <= 1.0:
            raise ConfigError("global_prob must lie in [0, 1]")
        if len(self.objects) != 2 or not 1 <= self.objects[0] <= self.objects[1]:
            raise ConfigError("objects must be a [min, max] range with min >= 1")
        if len(self.kernel_length) != 2 or not 1 <= self.kernel_length[0] <= self.kernel_length[1]:
            raise ConfigError("kernel_length must be a [min, max] range with min >= 1")
        if self.height < 1 or self.width < 1:
            raise ConfigError("image extents must be positive")


@dataclass
class EvalConfig(_Section):
    beta: float = 0.5
    s: float = 0.5
    betas: tuple = ()
    s_values: tuple = ()

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.s_values = tuple(self.s_values)
        for b in (self.beta,) + self.betas:
            if not 0.0 < b < 1.0:
                raise ConfigError(f"beta values must lie in (0, 1), got {b}")


@dataclass
class IOConfig(_Section):
    data_dir: str | None = None
    checkpoint: str | None = None
    log: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: TINY)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IOConfig = field(default_factory=IOConfig)

    SECTIONS = ("model", "train", "data", "eval", "io")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        model = dict(d.get("model") or {})
        model.setdefault("profile", "tiny")
        try:
            return cls(
                model=ModelConfig.from_dict(model),
                train=TrainConfig.from_dict(d.get("train")),
                data=DataConfig.from_dict(d.get("data")),
                eval=EvalConfig.from_dict(d.get("eval")),
                io=IOConfig.from_dict(d.get("io")),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self) -> dict:
        out = {"model": self.model.to_dict()}
        for name in ("train", "data", "eval", "io"):
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]
