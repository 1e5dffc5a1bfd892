"""Patch manifests, class-conditional sampling and the synthetic two-domain fixture.

Manifest format: UTF-8 text, one record per line,
``path<TAB>domain<TAB>class<TAB>source_id``. Lines starting with ``#`` are
comments; ``# patch_size=N`` and ``# magnification=TAG`` comments set the
manifest metadata. Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import colorsys
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .core import LabeledPatch, StainDomain, TissueClass, normalize_image

MANIFEST_NAME = "manifest.tsv"


class ManifestError(ValueError):
    """Structural problem with a manifest file."""


class UnknownClassError(ManifestError):
    pass


class UnknownDomainError(ManifestError):
    pass


class DuplicatePathError(ManifestError):
    pass


class MissingImageError(ManifestError, FileNotFoundError):
    pass


class UnreadableImageError(ManifestError):
    pass


class EmptyCellError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    domain: StainDomain
    tissue_class: TissueClass
    source_id: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    patch_size: int
    magnification_tag: str = "20x"
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    @cached_property
    def _cells(self) -> dict[tuple[StainDomain, TissueClass], tuple[ManifestEntry, ...]]:
        cells: dict = {}
        for e in self.entries:
            cells.setdefault((e.domain, e.tissue_class), []).append(e)
        return {k: tuple(v) for k, v in cells.items()}

    def cell(self, domain: StainDomain, cls: TissueClass) -> tuple[ManifestEntry, ...]:
        return self._cells.get((domain, cls), ())

    def count(self, domain: StainDomain, cls: TissueClass | None = None) -> int:
        if cls is None:
            return sum(1 for e in self.entries if e.domain is domain)
        return len(self.cell(domain, cls))

    def counts(self) -> dict[tuple[StainDomain, TissueClass], int]:
        return {k: len(v) for k, v in self._cells.items()}

    def classes(self, domain: StainDomain | None = None) -> list[TissueClass]:
        present = {e.tissue_class for e in self.entries if domain is None or e.domain is domain}
        return sorted(present, key=lambda c: c.index)

    def domain_entries(self, domain: StainDomain) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.domain is domain)


def render_manifest(manifest: DatasetManifest) -> str:
    lines = [f"# patch_size={manifest.patch_size}", f"# magnification={manifest.magnification_tag}"]
    for e in manifest.entries:
        lines.append("\t".join((e.path, e.domain.value, e.tissue_class.value, e.source_id)))
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(render_manifest(manifest), encoding="utf-8")
    return path


def _check_image(path: Path, patch_size: int | None) -> int:
    if not path.is_file():
        raise MissingImageError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode, (w, h) = im.mode, im.size
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImageError(f"cannot decode image {path}: {exc}") from None
    if mode != "RGB":
        raise UnreadableImageError(f"{path}: expected 8-bit RGB, got mode {mode}")
    if w != h or (patch_size is not None and w != patch_size):
        raise UnreadableImageError(f"{path}: expected {patch_size}x{patch_size} pixels, got {w}x{h}")
    return w


def load_manifest(path: str | Path, verify_images: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    patch_size: int | None = None
    magnification = "20x"
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        if line.lstrip().startswith("#"):
            body = line.lstrip()[1:].strip()
            key, sep, value = body.partition("=")
            if sep and key.strip() == "patch_size":
                patch_size = int(value)
            elif sep and key.strip() == "magnification":
                magnification = value.strip()
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
        rel, dom, cls, source_id = fields
        try:
            domain = StainDomain.parse(dom)
        except ValueError as exc:
            raise UnknownDomainError(f"{path}:{lineno}: {exc}") from None
        try:
            tissue = TissueClass.parse(cls)
        except ValueError as exc:
            raise UnknownClassError(f"{path}:{lineno}: {exc}") from None
        if rel in seen:
            raise DuplicatePathError(f"{path}:{lineno}: duplicate path {rel!r} (first on line {seen[rel]})")
        seen[rel] = lineno
        entries.append(ManifestEntry(rel, domain, tissue, source_id))

    domains = {e.domain for e in entries}
    if domains != {StainDomain.X, StainDomain.Y}:
        raise ManifestError(f"{path}: manifest needs at least one entry per domain")
    if verify_images:
        for e in entries:
            size = _check_image(root / e.path if not Path(e.path).is_absolute() else Path(e.path), patch_size)
            patch_size = patch_size or size
    elif patch_size is None:
        first = entries[0]
        patch_size = _check_image(root / first.path, None)
    return DatasetManifest(tuple(entries), patch_size, magnification, root)


class PatchLoader:
    """Decodes manifest entries into LabeledPatch objects, memoized by path."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, LabeledPatch] = {}

    def load(self, entry: ManifestEntry) -> LabeledPatch:
        patch = self._cache.get(entry.path)
        if patch is None:
            with Image.open(self.manifest.resolve(entry)) as im:
                raw = np.asarray(im.convert("RGB"))
            patch = LabeledPatch(normalize_image(raw), entry.domain, entry.tissue_class, entry.source_id)
            self._cache[entry.path] = patch
        return patch


def draw_classes(
    manifest: DatasetManifest,
    n: int,
    rng: np.random.Generator,
    class_balance: str = "uniform_class",
    domains: Sequence[StainDomain] = (StainDomain.X, StainDomain.Y),
) -> list[TissueClass]:
    """Class sequence usable for every domain in ``domains``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    common = [c for c in manifest.classes() if all(manifest.count(d, c) for d in domains)]
    if not common:
        raise EmptyCellError("no class has patches in every requested domain")
    if class_balance == "uniform_class":
        picks = rng.integers(0, len(common), size=n)
        return [common[i] for i in picks]
    if class_balance == "empirical":
        pool = [e.tissue_class for e in manifest.domain_entries(domains[0]) if e.tissue_class in common]
        picks = rng.integers(0, len(pool), size=n)
        return [pool[i] for i in picks]
    raise ValueError(f"unknown class_balance {class_balance!r}")


def sample_conditional_batch(
    manifest: DatasetManifest,
    domain: StainDomain,
    n: int,
    rng: np.random.Generator,
    class_balance: str = "uniform_class",
    classes: Sequence[TissueClass] | None = None,
    loader: PatchLoader | None = None,
) -> list[LabeledPatch]:
    """Draw n patches of ``domain``.

    ``uniform_class`` picks a class uniformly and then a patch within it;
    ``empirical`` picks uniformly over all entries of the domain. Passing
    ``classes`` fixes the class sequence (used to share one condition
    sequence between the X and Y batches of a step).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    loader = loader or PatchLoader(manifest)
    if classes is None:
        if class_balance == "empirical":
            pool = manifest.domain_entries(domain)
            if not pool:
                raise EmptyCellError(f"domain {domain.value} has no patches")
            return [loader.load(pool[i]) for i in rng.integers(0, len(pool), size=n)]
        classes = draw_classes(manifest, n, rng, class_balance, domains=(domain,))
    if len(classes) != n:
        raise ValueError("class sequence length must equal n")
    out = []
    for cls in classes:
        cell = manifest.cell(domain, cls)
        if not cell:
            raise EmptyCellError(f"no {domain.value} patches for class {cls.value}")
        out.append(loader.load(cell[int(rng.integers(0, len(cell)))]))
    return out


def sample_paired_batches(
    manifest: DatasetManifest,
    n: int,
    rng: np.random.Generator,
    class_balance: str = "uniform_class",
    loader: PatchLoader | None = None,
) -> tuple[list[LabeledPatch], list[LabeledPatch]]:
    """Unpaired X and Y batches sharing one class sequence."""
    loader = loader or PatchLoader(manifest)
    classes = draw_classes(manifest, n, rng, class_balance)
    xs = sample_conditional_batch(manifest, StainDomain.X, n, rng, classes=classes, loader=loader)
    ys = sample_conditional_batch(manifest, StainDomain.Y, n, rng, classes=classes, loader=loader)
    return xs, ys


# --- synthetic fixture -------------------------------------------------------

# Base hues for domain X, one step apart per class. Instance-normalized
# classifiers only see the mean color through their first, unnormalized
# layer, so the step has to be wide for the class to be learnable.
_X_HUE0, _X_HUE_STEP, _X_SAT, _X_VAL = 0.78, 0.18, 0.35, 0.75
_X_HUE_JITTER = 0.003
_TEXTURE_AMP = 0.12
_TEXTURE_DIR = np.array([0.55, 0.75, 0.45])
# Target colors in domain Y (chromogen-like), one per class.
_Y_PALETTE = {
    TissueClass.H: (0.74, 0.33, 0.40),
    TissueClass.F: (0.50, 0.56, 0.72),
    TissueClass.N: (0.68, 0.60, 0.52),
    TissueClass.TF: (0.55, 0.38, 0.26),
    TissueClass.HF: (0.72, 0.48, 0.60),
    TissueClass.HB: (0.62, 0.26, 0.34),
    TissueClass.TN: (0.45, 0.34, 0.30),
    TissueClass.BG: (0.74, 0.74, 0.74),
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Two-domain toy dataset.

    Domain X patches are a class-keyed base color plus a smooth texture.
    Domain Y patches are produced from a fresh X-style texture of the same
    class by the invertible map ``y = A_c (x - base_c) + target_c`` with a
    diagonal, seeded ``A_c``.
    """

    num_classes: int = 3
    patch_size: int = 64
    per_class_count: int = 20
    seed: int = 7

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(TissueClass):
            raise ValueError("num_classes must be in 1..8")
        if self.patch_size < 8 or self.per_class_count < 1:
            raise ValueError("patch_size must be >= 8 and per_class_count >= 1")

    @property
    def classes(self) -> list[TissueClass]:
        return [TissueClass.from_index(i) for i in range(self.num_classes)]

    def base_color(self, cls: TissueClass, hue_offset: float = 0.0) -> np.ndarray:
        hue = (_X_HUE0 + cls.index * _X_HUE_STEP + hue_offset) % 1.0
        return np.array(colorsys.hsv_to_rgb(hue, _X_SAT, _X_VAL))

    @property
    def domain_transform(self) -> dict[TissueClass, tuple[np.ndarray, np.ndarray]]:
        """Ground-truth X->Y map per class as (A, b) with y = A x + b on [0, 1] RGB."""
        out = {}
        for cls in self.classes:
            # Depends only on the class, so held-out fixtures with another
            # seed share the same ground-truth mapping.
            rng = np.random.default_rng([1234, cls.index])
            a = np.diag(rng.uniform(0.6, 1.0, size=3))
            b = np.asarray(_Y_PALETTE[cls]) - a @ self.base_color(cls)
            out[cls] = (a, b)
        return out


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    t = gaussian_filter(rng.standard_normal((size, size)), sigma=1.5, mode="wrap")
    t = (t - t.mean()) / t.std()
    return np.clip(t, -2.5, 2.5)


def synthetic_patch(spec: SyntheticSpec, domain: StainDomain, cls: TissueClass, i: int) -> np.ndarray:
    """uint8 H x W x 3 pixels for patch i of (domain, class)."""
    rng = np.random.default_rng([spec.seed, 0 if domain is StainDomain.X else 1, cls.index, i])
    hue_offset = rng.normal(0.0, _X_HUE_JITTER)
    base = spec.base_color(cls, hue_offset)
    x = base[None, None, :] - _TEXTURE_AMP * _texture(rng, spec.patch_size)[:, :, None] * _TEXTURE_DIR
    if domain is StainDomain.Y:
        a, b = spec.domain_transform[cls]
        x = x @ a.T + b
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    """Write the fixture as lossless PNGs plus ``manifest.tsv`` and return the manifest."""
    out_dir = Path(out_dir)
    entries = []
    for domain in (StainDomain.X, StainDomain.Y):
        (out_dir / domain.value).mkdir(parents=True, exist_ok=True)
        for cls in spec.classes:
            for i in range(spec.per_class_count):
                rel = f"{domain.value}/{cls.value}_{i:04d}.png"
                Image.fromarray(synthetic_patch(spec, domain, cls, i), mode="RGB").save(out_dir / rel, format="PNG")
                entries.append(ManifestEntry(rel, domain, cls, f"synth{spec.seed}-{domain.value}-{cls.value}-{i:04d}"))
    manifest = DatasetManifest(tuple(entries), spec.patch_size, "synthetic", out_dir)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest


def patch_mean_hue(pixels: np.ndarray) -> float:
    """Hue (0..1) of a patch's mean color; accepts uint8 or [-1, 1] float pixels."""
    px = np.asarray(pixels, dtype=np.float64)
    rgb = px.reshape(-1, 3).mean(axis=0)
    rgb = rgb / 255.0 if np.asarray(pixels).dtype == np.uint8 else (rgb + 1.0) / 2.0
    return colorsys.rgb_to_hsv(*np.clip(rgb, 0.0, 1.0))[0]


def hue_separation(hues_by_class: dict[TissueClass, Iterable[float]]) -> tuple[float, float]:
    """(min circular distance between class mean hues, max within-class hue stddev)."""
    means, stds = {}, []
    for cls, hues in hues_by_class.items():
        h = np.asarray(list(hues))
        angle = np.angle(np.exp(2j * np.pi * h).mean())
        centre = (angle / (2 * np.pi)) % 1.0
        dev = (h - centre + 0.5) % 1.0 - 0.5
        means[cls] = centre
        stds.append(float(dev.std()))
    sep = math.inf
    keys = list(means)
    for i, a in enumerate(keys):
        for b in keys[i + 1 :]:
            d = abs(means[a] - means[b]) % 1.0
            sep = min(sep, min(d, 1.0 - d))
    return sep, max(stds)


def class_histogram(patches: Iterable[LabeledPatch]) -> Counter:
    return Counter(p.tissue_class for p in patches)
