"""Training objectives: adversarial, classification, cycle, identity and SSIM losses.

All functions operate on NCHW torch tensors and are differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import ADVERSARIAL_MODES, IDENTITY_MODES, SSIM_MODES


@dataclass(frozen=True)
class AdversarialScores:
    real_scores: torch.Tensor
    fake_scores: torch.Tensor
    mode: str = "least_squares"

    def __post_init__(self):
        if self.mode not in ADVERSARIAL_MODES:
            raise ValueError(f"unknown adversarial mode {self.mode!r}")
        if self.real_scores.numel() == 0 or self.fake_scores.numel() == 0:
            raise ValueError("discriminator scores must be nonempty")


def _check_probabilities(scores: torch.Tensor) -> None:
    if bool(((scores <= 0) | (scores >= 1)).any()):
        raise ValueError("vanilla adversarial mode needs scores strictly inside (0, 1)")


def adversarial_loss_d(scores: AdversarialScores) -> torch.Tensor:
    """Discriminator loss; the same form serves D_enc and D_dec."""
    real, fake = scores.real_scores, scores.fake_scores
    if scores.mode == "least_squares":
        return 0.5 * (((real - 1.0) ** 2).mean() + (fake**2).mean())
    _check_probabilities(real)
    _check_probabilities(fake)
    return -torch.log(real).mean() - torch.log1p(-fake).mean()


def adversarial_loss_g(fake_scores: torch.Tensor, mode: str = "least_squares") -> torch.Tensor:
    """Generator loss with target 1 (non-saturating in vanilla mode)."""
    if mode not in ADVERSARIAL_MODES:
        raise ValueError(f"unknown adversarial mode {mode!r}")
    if fake_scores.numel() == 0:
        raise ValueError("discriminator scores must be nonempty")
    if mode == "least_squares":
        return ((fake_scores - 1.0) ** 2).mean()
    _check_probabilities(fake_scores)
    return -torch.log(fake_scores).mean()


def classifier_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of N x C logits against integer labels."""
    labels = torch.as_tensor(labels, device=logits.device).long()
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"expected N x C logits and N labels, got {tuple(logits.shape)} and {tuple(labels.shape)}")
    if labels.numel() == 0:
        raise ValueError("need at least one sample")
    if bool(((labels < 0) | (labels >= logits.shape[1])).any()):
        raise ValueError(f"label index out of range for {logits.shape[1]} classes")
    return F.cross_entropy(logits, labels)


def _check_same_shape(*pairs):
    for a, b in pairs:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def cycle_loss(x, x_rec, y, y_rec) -> torch.Tensor:
    """mean|x_rec - x| + mean|y_rec - y|."""
    _check_same_shape((x, x_rec), (y, y_rec))
    return (x_rec - x).abs().mean() + (y_rec - y).abs().mean()


def classification_cycle_loss(probs_a: torch.Tensor, probs_b: torch.Tensor, atol: float = 1e-4) -> torch.Tensor:
    """Mean row-wise L1 distance between paired class-probability vectors."""
    _check_same_shape((probs_a, probs_b))
    for p in (probs_a, probs_b):
        if bool(((p.sum(dim=1) - 1.0).abs() > atol).any()):
            raise ValueError("probability rows must sum to 1")
    return (probs_a - probs_b).abs().sum(dim=1).mean()


def identity_loss(x, y, enc_of_y, dec_out, mode: str = "same_domain") -> torch.Tensor:
    """Identity term.

    ``enc_of_y`` is G_enc(y). ``dec_out`` is G_dec(x) in ``same_domain``
    mode (compared against x), or G_dec(y) in ``paper_literal`` mode
    (compared against y, with G_enc(y) compared against x).
    """
    if mode not in IDENTITY_MODES:
        raise ValueError(f"unknown identity mode {mode!r}")
    if mode == "same_domain":
        _check_same_shape((enc_of_y, y), (dec_out, x))
        return (enc_of_y - y).abs().mean() + (dec_out - x).abs().mean()
    _check_same_shape((enc_of_y, x), (dec_out, y))
    return (enc_of_y - x).abs().mean() + (dec_out - y).abs().mean()


@dataclass(frozen=True)
class SsimParams:
    window: str = "gaussian"  # or "uniform"
    k: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 2.0

    def __post_init__(self):
        if self.window not in ("gaussian", "uniform"):
            raise ValueError(f"unknown SSIM window {self.window!r}")
        if self.k < 3 or self.k % 2 == 0:
            raise ValueError(f"SSIM window size must be odd and >= 3, got {self.k}")
        if self.sigma <= 0 or self.dynamic_range <= 0 or self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("SSIM sigma, K constants and dynamic range must be positive")

    @property
    def q1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def q2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def kernel(self, dtype=torch.float64) -> torch.Tensor:
        """Normalized k x k window weights."""
        if self.window == "uniform":
            w = torch.full((self.k, self.k), 1.0 / self.k**2, dtype=torch.float64)
        else:
            r = torch.arange(self.k, dtype=torch.float64) - self.k // 2
            g = torch.exp(-(r**2) / (2 * self.sigma**2))
            g = g / g.sum()
            w = torch.outer(g, g)
        return w.to(dtype)


def _window_mean(img: torch.Tensor, p: SsimParams) -> torch.Tensor:
    c = img.shape[1]
    pad = p.k // 2
    kernel = p.kernel(img.dtype).to(img.device).expand(c, 1, p.k, p.k)
    return F.conv2d(F.pad(img, (pad, pad, pad, pad), mode="reflect"), kernel, groups=c)


def ssim_terms(x: torch.Tensor, y: torch.Tensor, p: SsimParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel luminance and contrast-structure terms for NCHW inputs."""
    _check_same_shape((x, y))
    if x.ndim != 4:
        raise ValueError("expected NCHW tensors")
    if p.k > x.shape[2] or p.k > x.shape[3]:
        raise ValueError(f"SSIM window {p.k} larger than image {tuple(x.shape[2:])}")
    mu_x = _window_mean(x, p)
    mu_y = _window_mean(y, p)
    var_x = _window_mean(x * x, p) - mu_x**2
    var_y = _window_mean(y * y, p) - mu_y**2
    cov = _window_mean(x * y, p) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + p.q1) / (mu_x**2 + mu_y**2 + p.q1)
    cs = (2 * cov + p.q2) / (var_x + var_y + p.q2)
    return lum, cs


def ssim_map(x: torch.Tensor, y: torch.Tensor, p: SsimParams = SsimParams(), mode: str = "standard_product") -> torch.Tensor:
    """SSIM per pixel.

    Accepts H x W single-channel images or NCHW batches (computed per
    channel). ``paper_sum`` adds the two terms instead of multiplying.
    """
    if mode not in SSIM_MODES:
        raise ValueError(f"unknown SSIM mode {mode!r}")
    squeeze = x.ndim == 2
    if squeeze:
        x, y = x[None, None], y[None, None]
    lum, cs = ssim_terms(x, y, p)
    out = lum * cs if mode == "standard_product" else lum + cs
    return out[0, 0] if squeeze else out


def ssim_index(x: torch.Tensor, y: torch.Tensor, p: SsimParams = SsimParams(), mode: str = "standard_product") -> torch.Tensor:
    """Mean SSIM over batch, channels and pixels."""
    return ssim_map(x, y, p, mode).mean()


def ssim_loss(x_in, x_out, y_in, y_out, p: SsimParams = SsimParams(), mode: str = "standard_product") -> torch.Tensor:
    """(1 - Ssim(G_enc(x), x)) + (1 - Ssim(G_dec(y), y))."""
    return (1.0 - ssim_index(x_out, x_in, p, mode)) + (1.0 - ssim_index(y_out, y_in, p, mode))

