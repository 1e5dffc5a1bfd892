"""Central finite-difference checks of the analytic loss gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .losses import SsimParams, classifier_loss, cycle_loss, identity_loss, ssim_loss
from .matting import build_matting_laplacian, pho, unit_range_hwc

CHECK_NAMES = ("ssim", "pho", "cycle", "identity", "classifier")

# name -> transform applied to the analytic gradient before comparison.
# Only the test suite uses this, as a negative control.
_FAULTS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {}


@contextlib.contextmanager
def fault_injection(faults: dict[str, Callable[[torch.Tensor], torch.Tensor]]):
    unknown = set(faults) - set(CHECK_NAMES)
    if unknown:
        raise ValueError(f"unknown gradient checks {sorted(unknown)}")
    saved = dict(_FAULTS)
    _FAULTS.update(faults)
    try:
        yield
    finally:
        _FAULTS.clear()
        _FAULTS.update(saved)


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    seed: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}\t{self.name}\tseed={self.seed}\tmax_rel_err={self.max_rel_error:.3e}"


def numeric_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-3) -> torch.Tensor:
    """Central differences, one coordinate at a time."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn(x))
            flat[i] = orig - step
            lo = float(fn(x))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def analytic_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max |a - n| scaled by the largest numeric gradient entry."""
    scale = max(float(numeric.abs().max()), 1e-12)
    return float((analytic - numeric).abs().max()) / scale


def _away_from_zero(rng: np.random.Generator, shape, low=0.05, high=0.5) -> np.ndarray:
    # Residuals bounded away from 0 keep every L1 kink out of reach of the stencil.
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


def _problems(seed: int, size: int) -> dict[str, tuple[Callable, torch.Tensor]]:
    rng = np.random.default_rng([seed, size])

    def t(a):
        return torch.as_tensor(np.asarray(a), dtype=torch.float64)

    shape = (2, 3, size, size)
    p = SsimParams(k=min(11, size - 1 if size % 2 == 0 else size), sigma=1.5)
    x_in, y_in = t(rng.uniform(-0.8, 0.8, shape)), t(rng.uniform(-0.8, 0.8, shape))
    y_out = t(rng.uniform(-0.8, 0.8, shape))
    x_out0 = t(rng.uniform(-0.8, 0.8, shape))

    real = t(rng.uniform(-0.9, 0.9, (3, size, size)))
    gen0 = t(rng.uniform(-0.9, 0.9, (3, size, size)))
    m_real = build_matting_laplacian(unit_range_hwc(real), 1, 1e-7)
    m_gen = build_matting_laplacian(unit_range_hwc(gen0), 1, 1e-7)

    x = t(rng.uniform(-1, 1, shape))
    y = t(rng.uniform(-1, 1, shape))
    x_rec0 = x + t(_away_from_zero(rng, shape))
    y_rec = y + t(_away_from_zero(rng, shape))
    enc_y0 = y + t(_away_from_zero(rng, shape))
    dec_x = x + t(_away_from_zero(rng, shape))

    logits0 = t(rng.normal(0, 2, (4, 8)))
    labels = torch.as_tensor(rng.integers(0, 8, 4))

    return {
        "ssim": (lambda v: ssim_loss(x_in, v, y_in, y_out, p), x_out0),
        "pho": (lambda v: pho(v, real, m_real, m_gen), gen0),
        "cycle": (lambda v: cycle_loss(x, v, y, y_rec), x_rec0),
        "identity": (lambda v: identity_loss(x, y, v, dec_x, "same_domain"), enc_y0),
        "classifier": (lambda v: classifier_loss(v, labels), logits0),
    }


def run_gradchecks(
    seeds=(0,),
    size: int = 8,
    step: float = 1e-3,
    tolerance: float = 1e-4,
    names=CHECK_NAMES,
) -> list[GradcheckResult]:
    if size < 4:
        raise ValueError("gradcheck images must be at least 4x4")
    results = []
    for seed in seeds:
        problems = _problems(seed, size)
        for name in names:
            fn, x0 = problems[name]
            ana = analytic_gradient(fn, x0)
            if name in _FAULTS:
                ana = _FAULTS[name](ana)
            num = numeric_gradient(fn, x0, step)
            results.append(GradcheckResult(name, seed, max_relative_error(ana, num), tolerance))
    return results


def render_results(results: list[GradcheckResult]) -> str:
    lines = [r.line() for r in results]
    ok = all(r.passed for r in results)
    lines.append(f"{'OK' if ok else 'FAILED'}: {sum(r.passed for r in results)}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
