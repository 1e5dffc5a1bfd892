"""Shared vocabulary: tissue classes, stain domains, patches and experiment config."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration entries."""


class TissueClass(enum.Enum):
    H = "H"
    F = "F"
    N = "N"
    TF = "TF"
    HF = "HF"
    HB = "HB"
    TN = "TN"
    BG = "BG"

    @property
    def index(self) -> int:
        return _CLASS_ORDER.index(self)

    @property
    def description(self) -> str:
        return _CLASS_NAMES[self]

    @classmethod
    def from_index(cls, index: int) -> "TissueClass":
        if not 0 <= index < len(_CLASS_ORDER):
            raise ValueError(f"class index {index} out of range 0..{len(_CLASS_ORDER) - 1}")
        return _CLASS_ORDER[index]

    @classmethod
    def parse(cls, token: str) -> "TissueClass":
        try:
            return cls(token.strip())
        except ValueError:
            valid = ", ".join(c.value for c in _CLASS_ORDER)
            raise ValueError(f"unknown tissue class {token!r} (expected one of {valid})") from None

    def render(self) -> str:
        return self.value


_CLASS_ORDER = tuple(TissueClass)
_CLASS_NAMES = {
    TissueClass.H: "Hepatocyte",
    TissueClass.F: "Fibrosis",
    TissueClass.N: "Necrosis",
    TissueClass.TF: "Tumour & Fibrosis",
    TissueClass.HF: "Hepatocyte & Fibrosis",
    TissueClass.HB: "Hepatocyte & Blood",
    TissueClass.TN: "Tumour & Necrosis",
    TissueClass.BG: "Background",
}

# Column order used by the evaluation report.
TABLE_ORDER = (
    TissueClass.H,
    TissueClass.TF,
    TissueClass.N,
    TissueClass.F,
    TissueClass.HF,
    TissueClass.TN,
    TissueClass.HB,
    TissueClass.BG,
)


class StainDomain(enum.Enum):
    X = "X"
    Y = "Y"

    @classmethod
    def parse(cls, token: str) -> "StainDomain":
        try:
            return cls(token.strip())
        except ValueError:
            raise ValueError(f"unknown stain domain {token!r} (expected X or Y)") from None

    @property
    def other(self) -> "StainDomain":
        return StainDomain.Y if self is StainDomain.X else StainDomain.X


class Direction(enum.Enum):
    X_to_Y = "X_to_Y"
    Y_to_X = "Y_to_X"

    @property
    def source(self) -> StainDomain:
        return StainDomain.X if self is Direction.X_to_Y else StainDomain.Y

    @property
    def target(self) -> StainDomain:
        return self.source.other

    @property
    def reverse(self) -> "Direction":
        return Direction.Y_to_X if self is Direction.X_to_Y else Direction.X_to_Y


@dataclass(frozen=True, eq=False)
class LabeledPatch:
    """One normalized RGB patch (H x W x 3, values in [-1, 1]) with its labels."""

    pixels: np.ndarray
    domain: StainDomain
    tissue_class: TissueClass
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"patch must be H x W x 3, got shape {px.shape}")
        if px.shape[0] != px.shape[1]:
            raise ValueError(f"patch must be square, got {px.shape[0]}x{px.shape[1]}")
        if not np.all(np.isfinite(px)) or px.min() < -1.0 or px.max() > 1.0:
            raise ValueError("patch pixels must be finite and lie in [-1, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 10.0
    delta_id: float = 5.0
    gamma_cls: float = 0.5
    alpha_ssim: float = 0.5
    beta_pho: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"loss weight {f.name} must be a finite nonnegative number, got {value}")


ADVERSARIAL_MODES = ("least_squares", "vanilla")
SSIM_MODES = ("standard_product", "paper_sum")
IDENTITY_MODES = ("same_domain", "paper_literal")
CLCYC_MODES = ("translated_pair", "unpaired_same_class")
PHO_MODES = ("symmetric", "asymmetric")
PHO_REDUCTIONS = ("pixel_mean", "sum")
CLASS_BALANCE_MODES = ("uniform_class", "empirical")


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of a training / inference run.

    The nested ``loss_weights`` mapping and all scalar keys below are the
    accepted keys of the YAML config file; anything else is rejected.
    """

    patch_size: int = 256
    num_classes: int = 8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    adversarial_mode: str = "least_squares"
    ssim_mode: str = "standard_product"
    identity_mode: str = "same_domain"
    clcyc_mode: str = "translated_pair"
    pho_mode: str = "symmetric"
    class_balance: str = "uniform_class"
    condition_generators: bool = True
    pool_capacity_per_class: int = 50
    # optimizer
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    total_iterations: int = 200_000
    decay_start: int | None = None  # None -> total_iterations // 2
    batch_size: int = 1
    # architecture
    generator_filters: int = 32
    discriminator_filters: int = 64
    residual_blocks: int = 9
    # structural losses
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    pho_reduction: str = "pixel_mean"
    pho_resolution: int = 64
    matting_radius: int = 1
    matting_eps: float = 1e-7
    # bookkeeping
    checkpoint_every: int = 1000
    seed: int = 0
    device: str = "cpu"
    domain_x_name: str = "H&E"
    domain_y_name: str = "IHC"
    default_direction: str = "X_to_Y"

    def __post_init__(self):
        if isinstance(self.loss_weights, Mapping):
            object.__setattr__(self, "loss_weights", _weights_from_mapping(self.loss_weights))
        _check_choice("adversarial_mode", self.adversarial_mode, ADVERSARIAL_MODES)
        _check_choice("ssim_mode", self.ssim_mode, SSIM_MODES)
        _check_choice("identity_mode", self.identity_mode, IDENTITY_MODES)
        _check_choice("clcyc_mode", self.clcyc_mode, CLCYC_MODES)
        _check_choice("pho_mode", self.pho_mode, PHO_MODES)
        _check_choice("pho_reduction", self.pho_reduction, PHO_REDUCTIONS)
        _check_choice("class_balance", self.class_balance, CLASS_BALANCE_MODES)
        _check_choice("default_direction", self.default_direction, tuple(d.value for d in Direction))
        if not 1 <= self.num_classes <= len(TissueClass):
            raise ConfigError(f"num_classes must be in 1..{len(TissueClass)}, got {self.num_classes}")
        if self.patch_size <= 0 or self.patch_size % 4:
            raise ConfigError(f"patch_size must be a positive multiple of 4, got {self.patch_size}")
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be >= 0")
        if self.decay_start is not None and not 0 <= self.decay_start <= self.total_iterations:
            raise ConfigError("decay_start must lie in [0, total_iterations]")
        if self.batch_size < 1 or self.pool_capacity_per_class < 0 or self.checkpoint_every < 1:
            raise ConfigError("batch_size and checkpoint_every must be >= 1, pool capacity >= 0")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ConfigError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")

    @property
    def decay_start_iteration(self) -> int:
        return self.total_iterations // 2 if self.decay_start is None else self.decay_start

    def domain_name(self, domain: StainDomain) -> str:
        return self.domain_x_name if domain is StainDomain.X else self.domain_y_name

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["loss_weights"] = dataclasses.asdict(self.loss_weights)
        return out


def _check_choice(name: str, value: str, choices: tuple[str, ...]) -> None:
    if value not in choices:
        raise ConfigError(f"{name} must be one of {choices}, got {value!r}")


def _weights_from_mapping(data: Mapping[str, Any]) -> LossWeights:
    known = {f.name for f in dataclasses.fields(LossWeights)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key 'loss_weights.{key}'")
    return LossWeights(**{k: float(v) for k, v in data.items()})


def config_from_dict(data: Mapping[str, Any] | None) -> ExperimentConfig:
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
    if "loss_weights" in data:
        lw = data["loss_weights"]
        if not isinstance(lw, Mapping):
            raise ConfigError("loss_weights must be a mapping")
        data["loss_weights"] = _weights_from_mapping(lw)
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """Map 8-bit RGB (0..255) to float32 in [-1, 1]."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {raw.shape}")
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ValueError("raw pixel values must lie in [0, 255]")
    return (raw.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def denormalize_image(img: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_image`, rounded and clipped to uint8."""
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def one_hot_condition(c: TissueClass, h: int, w: int, num_classes: int = len(TissueClass)) -> np.ndarray:
    """Spatially broadcast one-hot map of shape (h, w, num_classes)."""
    if h <= 0 or w <= 0:
        raise ValueError("condition map dimensions must be positive")
    if c.index >= num_classes:
        raise ValueError(f"class {c.value} (index {c.index}) does not fit in {num_classes} condition channels")
    out = np.zeros((h, w, num_classes), dtype=np.float32)
    out[:, :, c.index] = 1.0
    return out
