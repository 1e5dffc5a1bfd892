"""Alternating minimax optimisation of the composite objective."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import ExperimentConfig, LabeledPatch, LossWeights, StainDomain, save_config
from .data import DatasetManifest, PatchLoader, sample_paired_batches
from .losses import (
    AdversarialScores,
    SsimParams,
    adversarial_loss_d,
    adversarial_loss_g,
    classification_cycle_loss,
    classifier_loss,
    cycle_loss,
    identity_loss,
    ssim_loss,
)
from .matting import LaplacianCache, photorealism_loss
from .networks import ModelBundle, build_bundle, load_checkpoint, save_checkpoint, with_condition
from .pool import ConditionalImagePool

log = logging.getLogger(__name__)

TERM_NAMES = ("gan_enc", "gan_dec", "cyc", "id", "class", "clcyc", "ssim", "pho")
METRICS_NAME = "metrics.tsv"
CHECKPOINT_DIR = "checkpoints"


class TrainingError(RuntimeError):
    pass


def total_objective(parts: Mapping[str, float | torch.Tensor], w: LossWeights):
    """Weighted sum of the eight loss terms; gamma weights both classification terms."""
    for name in TERM_NAMES:
        if name not in parts:
            raise KeyError(f"missing loss term {name!r}")
        value = parts[name]
        finite = bool(torch.isfinite(value).all()) if torch.is_tensor(value) else math.isfinite(value)
        if not finite:
            raise TrainingError(f"loss term {name!r} is not finite")
    return (
        parts["gan_enc"]
        + parts["gan_dec"]
        + w.lambda_cyc * parts["cyc"]
        + w.delta_id * parts["id"]
        + w.gamma_cls * parts["class"]
        + w.gamma_cls * parts["clcyc"]
        + w.alpha_ssim * parts["ssim"]
        + w.beta_pho * parts["pho"]
    )


def learning_rate_at(cfg: ExperimentConfig, iteration: int) -> float:
    """Constant until ``decay_start``, then linear decay reaching zero at ``total_iterations``."""
    start, total = cfg.decay_start_iteration, cfg.total_iterations
    if iteration < start or total <= start:
        return cfg.learning_rate
    return cfg.learning_rate * max(0.0, 1.0 - (iteration - start) / (total - start))


def ssim_params(cfg: ExperimentConfig) -> SsimParams:
    return SsimParams(k=cfg.ssim_window, sigma=cfg.ssim_sigma)


@dataclass
class TrainState:
    cfg: ExperimentConfig
    bundle: ModelBundle
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    pools: dict[StainDomain, ConditionalImagePool]
    laplacians: LaplacianCache
    rng: np.random.Generator
    iteration: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=1000))

    @property
    def device(self) -> torch.device:
        return torch.device(self.cfg.device)

    def resume_state(self) -> dict:
        return {
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "pools": {d.value: p.state_dict() for d, p in self.pools.items()},
            "pool_seeds": {d.value: p.seed for d, p in self.pools.items()},
            "sampler_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }

    def load_resume_state(self, extra: dict) -> None:
        self.opt_g.load_state_dict(extra["opt_g"])
        self.opt_d.load_state_dict(extra["opt_d"])
        for d, p in self.pools.items():
            p.load_state_dict(extra["pools"][d.value])
        self.rng.bit_generator.state = extra["sampler_rng"]
        torch.set_rng_state(extra["torch_rng"])


def init_state(cfg: ExperimentConfig, bundle: ModelBundle | None = None, cache_dir: str | Path | None = None) -> TrainState:
    bundle = (bundle or build_bundle(cfg)).to(cfg.device)
    opt_g = torch.optim.Adam(bundle.generator_params(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(bundle.discriminator_params(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
    pools = {
        StainDomain.X: ConditionalImagePool(cfg.pool_capacity_per_class, seed=cfg.seed * 2 + 1),
        StainDomain.Y: ConditionalImagePool(cfg.pool_capacity_per_class, seed=cfg.seed * 2 + 2),
    }
    cache = LaplacianCache(cache_dir, cfg.pho_resolution, cfg.matting_eps, cfg.matting_radius)
    rng = np.random.default_rng([cfg.seed, 99])
    return TrainState(cfg, bundle, opt_g, opt_d, pools, cache, rng)


def batch_tensors(batch: Sequence[LabeledPatch], device="cpu") -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    images = torch.from_numpy(np.stack([p.pixels for p in batch])).permute(0, 3, 1, 2).contiguous().to(device)
    labels = torch.tensor([p.tissue_class.index for p in batch], dtype=torch.long, device=device)
    return images, labels, [p.source_id for p in batch]


def _set_requires_grad(nets, flag: bool) -> None:
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def _check_gradients(bundle: ModelBundle, names: Sequence[str]) -> None:
    for name in names:
        for pname, p in getattr(bundle, name).named_parameters():
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise TrainingError(f"non-finite gradient in {name}.{pname}")


@dataclass
class GeneratorOutputs:
    fake_y: torch.Tensor
    fake_x: torch.Tensor
    labels: torch.Tensor
    parts: dict[str, float]
    total: float


def generator_step(state: TrainState, x_batch, y_batch) -> GeneratorOutputs:
    """Half-step (a): update G_enc, G_dec, S_enc, S_dec on the full objective."""
    cfg, b = state.cfg, state.bundle
    x, cx, ids_x = batch_tensors(x_batch, state.device)
    y, cy, ids_y = batch_tensors(y_batch, state.device)
    if not torch.equal(cx, cy):
        raise ValueError("X and Y batches must share one class sequence")
    c = cfg.num_classes

    def gcond(img):
        return with_condition(img, cx, c) if b.generator_conditioned else img

    def dcond(img):
        return with_condition(img, cx, c)

    _set_requires_grad((b.d_enc, b.d_dec), False)
    try:
        fake_y = b.g_enc(gcond(x))
        rec_x = b.g_dec(gcond(fake_y))
        fake_x = b.g_dec(gcond(y))
        rec_y = b.g_enc(gcond(fake_x))
        enc_of_y = b.g_enc(gcond(y))
        if cfg.identity_mode == "same_domain":
            id_term = identity_loss(x, y, enc_of_y, b.g_dec(gcond(x)), "same_domain")
        else:
            id_term = identity_loss(x, y, enc_of_y, fake_x, "paper_literal")

        logits_x = b.s_enc(x)
        logits_y = b.s_dec(y)
        probs_x, probs_y = F.softmax(logits_x, dim=1), F.softmax(logits_y, dim=1)
        if cfg.clcyc_mode == "translated_pair":
            clcyc = classification_cycle_loss(probs_x, F.softmax(b.s_dec(fake_y), dim=1)) + classification_cycle_loss(
                probs_y, F.softmax(b.s_enc(fake_x), dim=1)
            )
        else:
            clcyc = classification_cycle_loss(probs_x, probs_y)

        laps_x = [state.laplacians.get(sid, img) for sid, img in zip(ids_x, x)]
        laps_y = [state.laplacians.get(sid, img) for sid, img in zip(ids_y, y)]
        parts = {
            "gan_enc": adversarial_loss_g(b.d_enc(dcond(fake_y)), cfg.adversarial_mode),
            "gan_dec": adversarial_loss_g(b.d_dec(dcond(fake_x)), cfg.adversarial_mode),
            "cyc": cycle_loss(x, rec_x, y, rec_y),
            "id": id_term,
            "class": classifier_loss(logits_x, cx) + classifier_loss(logits_y, cy),
            "clcyc": clcyc,
            "ssim": ssim_loss(x, fake_y, y, fake_x, ssim_params(cfg), cfg.ssim_mode),
            "pho": photorealism_loss(
                x,
                fake_y,
                y,
                fake_x,
                laps_x,
                laps_y,
                symmetric=cfg.pho_mode == "symmetric",
                resolution=cfg.pho_resolution,
                window_radius=cfg.matting_radius,
                eps=cfg.matting_eps,
                reduction=cfg.pho_reduction,
            ),
        }
        total = total_objective(parts, cfg.loss_weights)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        _check_gradients(state.bundle, ("g_enc", "g_dec", "s_enc", "s_dec"))
        state.opt_g.step()
    finally:
        _set_requires_grad((b.d_enc, b.d_dec), True)
    return GeneratorOutputs(
        fake_y.detach(),
        fake_x.detach(),
        cx,
        {k: float(v.detach()) for k, v in parts.items()},
        float(total.detach()),
    )


def discriminator_step(state: TrainState, x_batch, y_batch, fake_y, fake_x) -> dict[str, float]:
    """Half-step (b): update D_enc (real y vs pooled G_enc(x)) and D_dec (real x vs pooled G_dec(y))."""
    cfg, b = state.cfg, state.bundle
    x, cx, _ = batch_tensors(x_batch, state.device)
    y, _, _ = batch_tensors(y_batch, state.device)
    classes = [p.tissue_class for p in x_batch]
    pooled_y = torch.stack(state.pools[StainDomain.Y].query(list(zip(fake_y, classes))))
    pooled_x = torch.stack(state.pools[StainDomain.X].query(list(zip(fake_x, classes))))
    c = cfg.num_classes
    d_enc = adversarial_loss_d(
        AdversarialScores(b.d_enc(with_condition(y, cx, c)), b.d_enc(with_condition(pooled_y, cx, c)), cfg.adversarial_mode)
    )
    d_dec = adversarial_loss_d(
        AdversarialScores(b.d_dec(with_condition(x, cx, c)), b.d_dec(with_condition(pooled_x, cx, c)), cfg.adversarial_mode)
    )
    for name, value in (("d_enc", d_enc), ("d_dec", d_dec)):
        if not bool(torch.isfinite(value)):
            raise TrainingError(f"discriminator loss {name!r} is not finite")
    state.opt_d.zero_grad(set_to_none=True)
    (d_enc + d_dec).backward()
    _check_gradients(state.bundle, ("d_enc", "d_dec"))
    state.opt_d.step()
    return {"d_enc": float(d_enc.detach()), "d_dec": float(d_dec.detach())}


def train_step(state: TrainState, x_batch: Sequence[LabeledPatch], y_batch: Sequence[LabeledPatch]) -> dict[str, float]:
    """One alternating update; returns the eight terms, the total and both D losses."""
    lr = learning_rate_at(state.cfg, state.iteration)
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr
    state.bundle.train()
    gen = generator_step(state, x_batch, y_batch)
    d_losses = discriminator_step(state, x_batch, y_batch, gen.fake_y, gen.fake_x)
    state.iteration += 1
    record = {"iteration": state.iteration, **gen.parts, "total": gen.total, **d_losses, "lr": lr}
    state.history.append(record)
    return record


def format_metrics_line(record: Mapping[str, float]) -> str:
    pairs = [f"{name}={record[name]:.9g}" for name in (*TERM_NAMES, "total")]
    return f"{int(record['iteration'])}\t" + "\t".join(pairs)


def parse_metrics_line(line: str) -> dict[str, float]:
    head, *pairs = line.rstrip("\n").split("\t")
    out = {"iteration": int(head)}
    for pair in pairs:
        key, _, value = pair.partition("=")
        out[key] = float(value)
    return out


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    path = Path(path)
    if not path.exists():
        return []
    return [parse_metrics_line(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def checkpoint_path(out_dir: Path, iteration: int) -> Path:
    return out_dir / CHECKPOINT_DIR / f"iter_{iteration:07d}.pt"


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    ckpts = sorted((Path(out_dir) / CHECKPOINT_DIR).glob("iter_*.pt"))
    return ckpts[-1] if ckpts else None


@dataclass
class TrainingResult:
    checkpoint: Path
    metrics_log: Path
    state: TrainState


def run_training(
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    resume: bool = False,
    cache_dir: str | Path | None = None,
    stop_after: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainingResult:
    """Train for ``cfg.total_iterations`` steps, writing checkpoints and a metrics log.

    ``stop_after`` ends the run early (after that many total iterations,
    with a checkpoint), which is how interrupted runs are simulated.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    present = manifest.classes()
    if len(present) != cfg.num_classes or any(c.index >= cfg.num_classes for c in present):
        raise ValueError(
            f"config num_classes={cfg.num_classes} does not match manifest classes {[c.value for c in present]}"
        )
    if manifest.patch_size != cfg.patch_size:
        raise ValueError(f"manifest patch size {manifest.patch_size} != config patch_size {cfg.patch_size}")

    torch.manual_seed(cfg.seed)
    state = init_state(cfg, cache_dir=cache_dir)
    metrics_path = out_dir / METRICS_NAME
    if resume:
        ckpt_file = latest_checkpoint(out_dir)
        if ckpt_file is None:
            raise FileNotFoundError(f"--resume given but no checkpoint found under {out_dir / CHECKPOINT_DIR}")
        ckpt = load_checkpoint(ckpt_file, cfg)
        state.bundle.load_state_dicts(ckpt.bundle.state_dicts())
        state.load_resume_state(ckpt.extra)
        state.iteration = ckpt.iteration
        kept = [line for line in _read_lines(metrics_path) if int(line.split("\t", 1)[0]) <= ckpt.iteration]
        metrics_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
        log.info("resumed from %s at iteration %d", ckpt_file, ckpt.iteration)
    else:
        metrics_path.write_text("", encoding="utf-8")
    save_config(cfg, out_dir / "config.yaml")

    loader = PatchLoader(manifest)
    end = cfg.total_iterations if stop_after is None else min(stop_after, cfg.total_iterations)
    last = None
    with metrics_path.open("a", encoding="utf-8") as metrics:
        while state.iteration < end:
            xs, ys = sample_paired_batches(manifest, cfg.batch_size, state.rng, cfg.class_balance, loader)
            record = train_step(state, xs, ys)
            metrics.write(format_metrics_line(record) + "\n")
            metrics.flush()
            if on_step is not None:
                on_step(record)
            if state.iteration % cfg.checkpoint_every == 0 or state.iteration == end:
                last = save_checkpoint(
                    checkpoint_path(out_dir, state.iteration), state.bundle, cfg, state.iteration, state.resume_state()
                )
    if last is None:
        last = save_checkpoint(checkpoint_path(out_dir, state.iteration), state.bundle, cfg, state.iteration, state.resume_state())
    return TrainingResult(last, metrics_path, state)


def _read_lines(path: Path) -> list[str]:
    if not path.exists():
        return []
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
