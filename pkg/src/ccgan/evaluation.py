"""Automated per-class evaluation and a fixed-layout results table."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import TABLE_ORDER, Direction, StainDomain, TissueClass
from .data import DatasetManifest, PatchLoader
from .losses import SsimParams, ssim_index
from .networks import ModelBundle, with_condition

METRICS = ("n_patches", "ssim", "cycle_l1", "agreement")
_METRIC_LABELS = {
    "n_patches": "No. evaluated patches",
    "ssim": "Mean SSIM (input, output)",
    "cycle_l1": "Mean round-trip L1",
    "agreement": "Class agreement",
}
_LABEL_TO_METRIC = {v: k for k, v in _METRIC_LABELS.items()}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ClassMetrics:
    n_patches: int
    ssim: float
    cycle_l1: float
    agreement: float


@dataclass(frozen=True)
class EvalReport:
    rows: dict[TissueClass, ClassMetrics]
    direction: Direction = Direction.X_to_Y
    overall: ClassMetrics = field(init=False)

    def __post_init__(self):
        for cls, m in self.rows.items():
            if not 0.0 <= m.agreement <= 1.0:
                raise ValueError(f"agreement for {cls.value} outside [0, 1]")
        object.__setattr__(self, "overall", aggregate(self.rows.values()))

    @property
    def total_patches(self) -> int:
        return self.overall.n_patches

    def ordered_classes(self) -> list[TissueClass]:
        return [c for c in TABLE_ORDER if c in self.rows]


def aggregate(rows) -> ClassMetrics:
    """Patch-weighted means of the per-class rows."""
    rows = list(rows)
    n = sum(r.n_patches for r in rows)
    if n == 0:
        return ClassMetrics(0, 0.0, 0.0, 0.0)

    def wmean(attr):
        return float(sum(r.n_patches * getattr(r, attr) for r in rows) / n)

    return ClassMetrics(n, wmean("ssim"), wmean("cycle_l1"), wmean("agreement"))


def _pick(manifest: DatasetManifest, domain: StainDomain, n_per_class: int, seed: int):
    deficits = {
        cls: manifest.count(domain, cls)
        for cls in manifest.classes()
        if manifest.count(domain, cls) < n_per_class
    }
    if deficits:
        listing = ", ".join(f"{c.value}: {have}/{n_per_class}" for c, have in sorted(deficits.items(), key=lambda kv: kv[0].index))
        raise EvaluationError(f"not enough {domain.value} patches per class ({listing})")
    rng = np.random.default_rng(seed)
    chosen = {}
    for cls in manifest.classes():
        cell = manifest.cell(domain, cls)
        idx = np.sort(rng.choice(len(cell), size=n_per_class, replace=False))
        chosen[cls] = [cell[i] for i in idx]
    return chosen


@torch.no_grad()
def evaluate(
    bundle: ModelBundle,
    manifest: DatasetManifest,
    direction: Direction | str = Direction.X_to_Y,
    n_per_class: int = 30,
    seed: int = 0,
    batch_size: int = 16,
    ssim_params: SsimParams | None = None,
) -> EvalReport:
    """Translate ``n_per_class`` source patches of every class and score them.

    Per patch: SSIM(input, translated) in product mode, L1 of the round
    trip against the input, and whether the target-domain classifier
    recovers the conditioning class.
    """
    direction = Direction(direction)
    if direction is Direction.X_to_Y:
        gen, back, target_clf = bundle.g_enc, bundle.g_dec, bundle.s_dec
    else:
        gen, back, target_clf = bundle.g_dec, bundle.g_enc, bundle.s_enc
    bundle.eval()
    device = next(gen.parameters()).device
    loader = PatchLoader(manifest)
    chosen = _pick(manifest, direction.source, n_per_class, seed)
    params = ssim_params or SsimParams(k=min(11, _odd_floor(manifest.patch_size)))

    def cond(img, labels):
        return with_condition(img, labels, bundle.num_classes) if gen.conditioned else img

    rows = {}
    for cls, entries in chosen.items():
        ssim_vals, l1_vals, hits = [], [], []
        for start in range(0, len(entries), batch_size):
            patches = [loader.load(e) for e in entries[start : start + batch_size]]
            x = torch.from_numpy(np.stack([p.pixels for p in patches])).permute(0, 3, 1, 2).to(device)
            labels = torch.full((x.shape[0],), cls.index, dtype=torch.long, device=device)
            out = gen(cond(x, labels))
            rec = back(cond(out, labels))
            for i in range(x.shape[0]):
                ssim_vals.append(float(ssim_index(out[i : i + 1], x[i : i + 1], params)))
                l1_vals.append(float((rec[i] - x[i]).abs().mean()))
            hits.extend((target_clf(out).argmax(dim=1) == labels).tolist())
        rows[cls] = ClassMetrics(len(entries), float(np.mean(ssim_vals)), float(np.mean(l1_vals)), float(np.mean(hits)))
    return EvalReport(rows, direction)


def _odd_floor(n: int) -> int:
    return n if n % 2 else n - 1


def render_report(report: EvalReport, fmt: str = "tsv", decimals: int = 3) -> str:
    """Table with one row per metric and columns in H, TF, N, F, HF, TN, HB, BG, Overall order."""
    classes = report.ordered_classes()
    header = ["Metric", *[c.value for c in classes], "Overall"]
    body = []
    for metric in METRICS:
        cells = [_METRIC_LABELS[metric]]
        for m in [report.rows[c] for c in classes] + [report.overall]:
            value = getattr(m, metric)
            cells.append(str(int(value)) if metric == "n_patches" else f"{value:.{decimals}f}")
        body.append(cells)
    if fmt == "tsv":
        return "\n".join("\t".join(r) for r in [header, *body]) + "\n"
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] + [":---:"] * (len(header) - 1)) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in body]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(text: str) -> dict[str, dict[str, float]]:
    """Parse a rendered report (TSV or markdown) into {metric: {column: value}}."""
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.lstrip().startswith("|"):
            cells = [c.strip() for c in line.strip().strip("|").split("|")]
            if all(set(c) <= set(":-") for c in cells):
                continue
        else:
            cells = line.split("\t")
        rows.append(cells)
    header, *body = rows
    out = {}
    for cells in body:
        metric = _LABEL_TO_METRIC.get(cells[0], cells[0])
        out[metric] = {col: float(v) for col, v in zip(header[1:], cells[1:])}
    return out


@torch.no_grad()
def held_out_metrics(bundle: ModelBundle, manifest: DatasetManifest) -> dict[str, float]:
    """Mean cycle L1 (both directions) and classifier accuracies on every patch of a manifest."""
    bundle.eval()
    loader = PatchLoader(manifest)
    out = {}
    l1 = []
    for domain, gen, back, clf in (
        (StainDomain.X, bundle.g_enc, bundle.g_dec, bundle.s_enc),
        (StainDomain.Y, bundle.g_dec, bundle.g_enc, bundle.s_dec),
    ):
        patches = [loader.load(e) for e in manifest.domain_entries(domain)]
        x = torch.from_numpy(np.stack([p.pixels for p in patches])).permute(0, 3, 1, 2)
        labels = torch.tensor([p.tissue_class.index for p in patches])
        device = next(gen.parameters()).device
        x, labels = x.to(device), labels.to(device)

        def cond(img):
            return with_condition(img, labels, bundle.num_classes) if gen.conditioned else img

        rec = back(cond(gen(cond(x))))
        l1.append(float((rec - x).abs().mean()))
        out[f"cycle_l1_{domain.value}"] = l1[-1]
        name = "s_enc" if domain is StainDomain.X else "s_dec"
        out[f"accuracy_{name}"] = float((clf(x).argmax(dim=1) == labels).float().mean())
    out["cycle_l1"] = float(np.mean(l1))
    return out
