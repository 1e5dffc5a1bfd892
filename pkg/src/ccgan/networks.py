"""Generators, discriminators and classifiers, plus checkpoint I/O."""

from __future__ import annotations

import hashlib
import io
import json
import os
import pickle
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ExperimentConfig, config_from_dict

CHECKPOINT_FORMAT = "ccgan-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def condition_planes(labels: torch.Tensor, num_classes: int, height: int, width: int) -> torch.Tensor:
    """N x C x H x W one-hot planes for integer labels."""
    onehot = F.one_hot(labels.long(), num_classes).to(torch.float32)
    return onehot[:, :, None, None].expand(-1, -1, height, width)


def with_condition(images: torch.Tensor, labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    planes = condition_planes(labels, num_classes, images.shape[2], images.shape[3]).to(images)
    return torch.cat([images, planes], dim=1)


class ConditionalInstanceNorm(nn.Module):
    """Instance norm whose affine scale/shift depend on the class vector.

    A broadcast one-hot plane is constant over space, so plain instance
    norm after a convolution subtracts its contribution exactly. Driving
    the affine parameters from the class vector keeps the condition alive.
    """

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.scale = nn.Linear(num_classes, channels)
        self.shift = nn.Linear(num_classes, channels)
        nn.init.zeros_(self.scale.weight)
        nn.init.zeros_(self.scale.bias)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        gamma = 1.0 + self.scale(cond)[:, :, None, None]
        beta = self.shift(cond)[:, :, None, None]
        return self.norm(x) * gamma + beta


class _Norm(nn.Module):
    """Plain affine instance norm, or the conditional one when num_classes > 0."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.conditional = num_classes > 0
        if self.conditional:
            self.inner = ConditionalInstanceNorm(channels, num_classes)
        else:
            self.inner = nn.InstanceNorm2d(channels, affine=True)

    def forward(self, x, cond):
        return self.inner(x, cond) if self.conditional else self.inner(x)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")
        self.norm1 = _Norm(channels, num_classes)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")
        self.norm2 = _Norm(channels, num_classes)

    def forward(self, x, cond):
        h = F.relu(self.norm1(self.conv1(x), cond))
        h = self.norm2(self.conv2(h), cond)
        return x + h


class Generator(nn.Module):
    """ResNet generator: 7x7 conv, two stride-2 downsamplings, residual
    blocks, two stride-2 transposed-conv upsamplings, 7x7 conv + tanh.

    When ``num_classes > 0`` the input carries ``3 + num_classes`` channels
    (RGB followed by one-hot condition planes).
    """

    def __init__(self, num_classes: int = 8, conditioned: bool = True, filters: int = 64, n_blocks: int = 9):
        super().__init__()
        self.num_classes = num_classes
        self.conditioned = conditioned
        ncond = num_classes if conditioned else 0
        self.in_channels = 3 + ncond
        f = filters
        self.head = nn.Conv2d(self.in_channels, f, 7, padding=3, padding_mode="reflect")
        self.head_norm = _Norm(f, ncond)
        self.down1 = nn.Conv2d(f, 2 * f, 3, stride=2, padding=1)
        self.down1_norm = _Norm(2 * f, ncond)
        self.down2 = nn.Conv2d(2 * f, 4 * f, 3, stride=2, padding=1)
        self.down2_norm = _Norm(4 * f, ncond)
        self.blocks = nn.ModuleList(ResidualBlock(4 * f, ncond) for _ in range(n_blocks))
        self.up1 = nn.ConvTranspose2d(4 * f, 2 * f, 3, stride=2, padding=1, output_padding=1)
        self.up1_norm = _Norm(2 * f, ncond)
        self.up2 = nn.ConvTranspose2d(2 * f, f, 3, stride=2, padding=1, output_padding=1)
        self.up2_norm = _Norm(f, ncond)
        self.tail = nn.Conv2d(f, 3, 7, padding=3, padding_mode="reflect")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"generator expects {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"generator input size must be divisible by 4, got {tuple(x.shape[2:])}")
        cond = x[:, 3:].mean(dim=(2, 3)) if self.conditioned else None
        h = F.relu(self.head_norm(self.head(x), cond))
        h = F.relu(self.down1_norm(self.down1(h), cond))
        h = F.relu(self.down2_norm(self.down2(h), cond))
        for block in self.blocks:
            h = block(h, cond)
        h = F.relu(self.up1_norm(self.up1(h), cond))
        h = F.relu(self.up2_norm(self.up2(h), cond))
        return torch.tanh(self.tail(h))


def _base_layers(in_channels: int, filters: int) -> list[nn.Module]:
    f = filters
    return [
        nn.Conv2d(in_channels, f, 4, stride=2, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(f, 2 * f, 4, stride=2, padding=1),
        nn.InstanceNorm2d(2 * f),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(2 * f, 4 * f, 4, stride=2, padding=1),
        nn.InstanceNorm2d(4 * f),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(4 * f, 8 * f, 4, stride=1, padding=1),
        nn.InstanceNorm2d(8 * f),
        nn.LeakyReLU(0.2, inplace=True),
    ]


class Discriminator(nn.Module):
    """Five-layer fully convolutional patch discriminator (70x70 receptive field)."""

    def __init__(self, num_classes: int = 8, conditioned: bool = True, filters: int = 64, sigmoid: bool = False):
        super().__init__()
        self.in_channels = 3 + (num_classes if conditioned else 0)
        self.sigmoid = sigmoid
        self.model = nn.Sequential(*_base_layers(self.in_channels, filters), nn.Conv2d(8 * filters, 1, 4, stride=1, padding=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"discriminator expects {self.in_channels} input channels, got {x.shape[1]}")
        out = self.model(x)
        return torch.sigmoid(out) if self.sigmoid else out


class Classifier(nn.Module):
    """Eight conv layers: the discriminator's four-layer base, three 3x3
    stride-2 layers, and a 1x1 projection to class logits, then global
    average pooling. Takes plain RGB input."""

    def __init__(self, num_classes: int = 8, filters: int = 64):
        super().__init__()
        f8 = 8 * filters
        self.features = nn.Sequential(
            *_base_layers(3, filters),
            nn.Conv2d(f8, f8, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f8, f8, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f8, f8, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f8, num_classes, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != 3:
            raise ValueError(f"classifier expects 3 input channels, got {x.shape[1]}")
        return self.features(x).mean(dim=(2, 3))


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)


def build_generator(cfg: ExperimentConfig) -> Generator:
    if cfg.patch_size % 4:
        raise ValueError(f"patch_size must be divisible by 4, got {cfg.patch_size}")
    net = Generator(cfg.num_classes, cfg.condition_generators, cfg.generator_filters, cfg.residual_blocks)
    init_weights(net)
    return net


def build_discriminator(cfg: ExperimentConfig) -> Discriminator:
    net = Discriminator(cfg.num_classes, True, cfg.discriminator_filters, sigmoid=cfg.adversarial_mode == "vanilla")
    init_weights(net)
    return net


def build_classifier(cfg: ExperimentConfig) -> Classifier:
    net = Classifier(cfg.num_classes, cfg.discriminator_filters)
    init_weights(net)
    return net


NETWORK_NAMES = ("g_enc", "g_dec", "d_enc", "d_dec", "s_enc", "s_dec")


def arch_descriptor(cfg: ExperimentConfig) -> dict[str, Any]:
    gen_cond = "input_concat_onehot" if cfg.condition_generators else "none"
    return {
        "generator": {
            "type": "resnet",
            "filters": cfg.generator_filters,
            "residual_blocks": cfg.residual_blocks,
            "condition": gen_cond,
        },
        "discriminator": {
            "type": "patch5",
            "filters": cfg.discriminator_filters,
            "condition": "input_concat_onehot",
            "sigmoid": cfg.adversarial_mode == "vanilla",
        },
        "classifier": {"type": "conv8_gap", "filters": cfg.discriminator_filters, "condition": "none"},
        "num_classes": cfg.num_classes,
    }


@dataclass
class ModelBundle:
    """The six networks. ``d_enc`` judges domain Y, ``d_dec`` judges X;
    ``s_enc`` classifies X images and ``s_dec`` classifies Y images."""

    g_enc: Generator
    g_dec: Generator
    d_enc: Discriminator
    d_dec: Discriminator
    s_enc: Classifier
    s_dec: Classifier
    num_classes: int
    arch: dict

    @property
    def generator_conditioned(self) -> bool:
        return self.g_enc.conditioned

    def networks(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in NETWORK_NAMES}

    def generator_params(self):
        for name in ("g_enc", "g_dec", "s_enc", "s_dec"):
            yield from getattr(self, name).parameters()

    def discriminator_params(self):
        for name in ("d_enc", "d_dec"):
            yield from getattr(self, name).parameters()

    def parameter_counts(self) -> dict[str, int]:
        return {name: sum(p.numel() for p in net.parameters()) for name, net in self.networks().items()}

    def to(self, device) -> "ModelBundle":
        for net in self.networks().values():
            net.to(device)
        return self

    def train(self, mode: bool = True) -> "ModelBundle":
        for net in self.networks().values():
            net.train(mode)
        return self

    def eval(self) -> "ModelBundle":
        return self.train(False)

    def state_dicts(self) -> dict[str, dict]:
        return {name: net.state_dict() for name, net in self.networks().items()}

    def load_state_dicts(self, states: dict[str, dict]) -> None:
        for name, net in self.networks().items():
            net.load_state_dict(states[name])

    def fingerprint(self, names=NETWORK_NAMES) -> str:
        """SHA-256 over the raw bytes of the named networks' parameters."""
        h = hashlib.sha256()
        for name in names:
            for key, tensor in getattr(self, name).state_dict().items():
                h.update(key.encode())
                h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_bundle(cfg: ExperimentConfig, seed: int | None = None) -> ModelBundle:
    """Construct all six networks with seeded initialization."""
    gen = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    nets = {}
    builders = {
        "g_enc": build_generator,
        "g_dec": build_generator,
        "d_enc": build_discriminator,
        "d_dec": build_discriminator,
        "s_enc": build_classifier,
        "s_dec": build_classifier,
    }
    for name in NETWORK_NAMES:
        # Each network draws from its own sub-seed so adding a network
        # never perturbs the others' initialization.
        sub = int(torch.randint(0, 2**62, (1,), generator=gen))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(sub)
            nets[name] = builders[name](cfg)
    return ModelBundle(**nets, num_classes=cfg.num_classes, arch=arch_descriptor(cfg))


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(
    path: str | Path,
    bundle: ModelBundle,
    cfg: ExperimentConfig,
    iteration: int,
    extra: dict | None = None,
) -> Path:
    """Write a versioned checkpoint archive atomically (temp file + rename)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": json.dumps(bundle.arch, sort_keys=True),
        "weights": {name: {k: v.detach().cpu() for k, v in sd.items()} for name, sd in bundle.state_dicts().items()},
        "config": cfg.to_dict(),
        "iteration": int(iteration),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    _atomic_write_bytes(path, buf.getvalue())
    return path


@dataclass
class Checkpoint:
    bundle: ModelBundle
    config: ExperimentConfig
    iteration: int
    extra: dict


def load_checkpoint(path: str | Path, cfg: ExperimentConfig | None = None) -> Checkpoint:
    """Restore a checkpoint. If ``cfg`` is given, its architecture must match
    the stored one; otherwise the stored config snapshot is used."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (pickle.UnpicklingError, RuntimeError, EOFError) as exc:
        raise CheckpointError(f"{path} is not a readable checkpoint: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a ccgan checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    stored_cfg = config_from_dict(payload["config"])
    use_cfg = cfg or stored_cfg
    expected = json.dumps(arch_descriptor(use_cfg), sort_keys=True)
    if expected != payload["arch"]:
        raise CheckpointError(
            f"architecture mismatch: checkpoint has {payload['arch']}, config describes {expected}"
        )
    bundle = build_bundle(use_cfg)
    bundle.load_state_dicts(payload["weights"])
    return Checkpoint(bundle, use_cfg, int(payload["iteration"]), payload.get("extra", {}))
