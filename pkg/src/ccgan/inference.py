"""Applying a trained bundle: single patches, tiled images and direction presets."""

from __future__ import annotations

from typing import Iterator

import numpy as np
import torch

from .core import Direction, ExperimentConfig, LabeledPatch, StainDomain, TissueClass
from .networks import ModelBundle, with_condition

PRESETS = ("he_to_ihc", "ihc_to_he", "h_only_deconvolution")


def _nets(bundle: ModelBundle, direction: Direction):
    """(generator, source classifier, target classifier) for a direction."""
    if direction is Direction.X_to_Y:
        return bundle.g_enc, bundle.s_enc, bundle.s_dec
    return bundle.g_dec, bundle.s_dec, bundle.s_enc


def _to_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(pixels, dtype=np.float32)).permute(2, 0, 1)[None]


@torch.no_grad()
def predict_class(bundle: ModelBundle, pixels: np.ndarray, domain: StainDomain) -> TissueClass:
    clf = bundle.s_enc if domain is StainDomain.X else bundle.s_dec
    device = next(clf.parameters()).device
    return TissueClass.from_index(int(clf.eval()(_to_tensor(pixels).to(device)).argmax(dim=1)))


@torch.no_grad()
def _generate(bundle: ModelBundle, direction: Direction, pixels: np.ndarray, cls: TissueClass) -> np.ndarray:
    gen = _nets(bundle, direction)[0].eval()
    device = next(gen.parameters()).device
    img = _to_tensor(pixels).to(device)
    if gen.conditioned:
        img = with_condition(img, torch.tensor([cls.index], device=device), bundle.num_classes)
    return gen(img)[0].permute(1, 2, 0).cpu().numpy()


def translate_patch(
    bundle: ModelBundle,
    patch: LabeledPatch,
    direction: Direction | str,
    class_source: str = "given",
) -> LabeledPatch:
    """Translate one patch into the other domain.

    ``class_source='predicted'`` replaces the patch's label with the source
    classifier's argmax before conditioning the generator.
    """
    direction = Direction(direction)
    if patch.domain is not direction.source:
        raise ValueError(f"patch is in domain {patch.domain.value}, direction {direction.value} needs {direction.source.value}")
    if class_source == "given":
        cls = patch.tissue_class
    elif class_source == "predicted":
        cls = predict_class(bundle, patch.pixels, patch.domain)
    else:
        raise ValueError(f"class_source must be 'given' or 'predicted', got {class_source!r}")
    out = _generate(bundle, direction, patch.pixels, cls)
    return LabeledPatch(np.clip(out, -1.0, 1.0), direction.target, cls, patch.source_id)


def tile_starts(length: int, tile: int, overlap: int) -> list[int]:
    """Tile origins covering [0, length); the last tile is flush with the end."""
    if length <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, length - tile, step))
    starts.append(length - tile)
    return starts


def feather_profile(tile: int, overlap: int, before: bool, after: bool) -> np.ndarray:
    """1-D blend weights: linear ramps over ``overlap`` pixels on sides with a neighbour."""
    w = np.ones(tile, dtype=np.float64)
    if overlap > 0:
        ramp = (np.arange(overlap, dtype=np.float64) + 1.0) / (overlap + 1.0)
        if before:
            w[:overlap] = np.minimum(w[:overlap], ramp)
        if after:
            w[tile - overlap :] = np.minimum(w[tile - overlap :], ramp[::-1])
    return w


def blend_weights(length: int, tile: int, overlap: int) -> tuple[list[int], list[np.ndarray]]:
    starts = tile_starts(length, tile, overlap)
    profiles = [feather_profile(tile, overlap, i > 0, i < len(starts) - 1) for i in range(len(starts))]
    return starts, profiles


def _check_tiling(tile: int, overlap: int) -> None:
    if tile <= 0 or tile % 4:
        raise ValueError(f"tile must be a positive multiple of 4, got {tile}")
    if not 0 <= overlap < tile / 2:
        raise ValueError(f"overlap must lie in [0, tile/2), got {overlap}")


def iter_translated_bands(
    bundle: ModelBundle,
    image: np.ndarray,
    direction: Direction | str,
    tile: int = 256,
    overlap: int | None = None,
    class_map: TissueClass | str = "predicted",
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (row_offset, finished_rows) bands of the translated image.

    Tiles in one row are translated and feather-blended; rows that no later
    tile row can touch are emitted, so memory stays bounded by one band.
    """
    direction = Direction(direction)
    overlap = tile // 4 if overlap is None else overlap
    _check_tiling(tile, overlap)
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {img.shape}")
    h, w, _ = img.shape
    if h < tile or w < tile:
        pad = ((0, max(0, tile - h)), (0, max(0, tile - w)), (0, 0))
        padded = np.pad(img, pad, mode="reflect" if min(h, w) > 1 else "edge")
        full = np.concatenate([band for _, band in iter_translated_bands(bundle, padded, direction, tile, overlap, class_map)])
        yield 0, full[:h, :w]
        return

    row_starts, row_w = blend_weights(h, tile, overlap)
    col_starts, col_w = blend_weights(w, tile, overlap)
    if len(row_starts) == 1 and len(col_starts) == 1:
        yield 0, _translate_tile(bundle, img, direction, class_map)
        return

    # Rolling accumulators covering image rows [emitted, emitted + tile).
    acc = np.zeros((tile, w, 3), dtype=np.float64)
    wsum = np.zeros((tile, w, 1), dtype=np.float64)
    emitted = 0
    for ri, r0 in enumerate(row_starts):
        off = r0 - emitted
        for ci, c0 in enumerate(col_starts):
            piece = img[r0 : r0 + tile, c0 : c0 + tile]
            out = _translate_tile(bundle, piece, direction, class_map)
            weight = np.outer(row_w[ri], col_w[ci])[:, :, None]
            acc[off : off + tile, c0 : c0 + tile] += weight * out
            wsum[off : off + tile, c0 : c0 + tile] += weight
        done = row_starts[ri + 1] if ri + 1 < len(row_starts) else h
        n = done - emitted
        yield emitted, (acc[:n] / wsum[:n]).astype(np.float32)
        acc = np.concatenate([acc[n:], np.zeros((n, w, 3))])
        wsum = np.concatenate([wsum[n:], np.zeros((n, w, 1))])
        emitted = done


def _translate_tile(bundle, piece, direction, class_map) -> np.ndarray:
    if isinstance(class_map, TissueClass):
        cls = class_map
    elif class_map == "predicted":
        cls = predict_class(bundle, piece, direction.source)
    else:
        cls = TissueClass.parse(class_map)
    return np.clip(_generate(bundle, direction, piece, cls), -1.0, 1.0)


def translate_tiled(
    bundle: ModelBundle,
    image: np.ndarray,
    direction: Direction | str,
    tile: int = 256,
    overlap: int | None = None,
    class_map: TissueClass | str = "predicted",
) -> np.ndarray:
    """Translate an arbitrary H x W x 3 image (values in [-1, 1]) tile by tile.

    ``class_map`` is a single TissueClass for every tile or ``'predicted'``
    to condition each tile on the source classifier's argmax. Overlaps are
    blended with normalized linear feathering (weights sum to 1 everywhere).
    """
    bands = [band for _, band in iter_translated_bands(bundle, image, direction, tile, overlap, class_map)]
    return np.concatenate(bands, axis=0)


def seam_ratio(image: np.ndarray, tile: int, overlap: int) -> float:
    """Max mean horizontal/vertical step at tile borders over the median step elsewhere.

    Border positions are the edges of every tile; values near 1 mean the
    stitching left no visible seam.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    dx = np.abs(np.diff(img, axis=1)).mean(axis=(0, 2))  # step between column j and j+1
    dy = np.abs(np.diff(img, axis=0)).mean(axis=(1, 2))
    cols = _tile_edges(w, tile, overlap)
    rows = _tile_edges(h, tile, overlap)
    seam = max([dx[j] for j in cols] + [dy[i] for i in rows] + [0.0])
    interior = np.median(np.concatenate([np.delete(dx, cols), np.delete(dy, rows)]))
    return float(seam / interior) if interior > 0 else float("inf") if seam > 0 else 1.0


def _tile_edges(length: int, tile: int, overlap: int) -> list[int]:
    edges = set()
    for s in tile_starts(length, tile, overlap):
        for e in (s - 1, s + tile - 1):
            if 0 <= e < length - 1:
                edges.add(e)
    return sorted(edges)


def preset_mode(cfg: ExperimentConfig, mode: str) -> ExperimentConfig:
    """Dataset-semantics presets; the algorithm is unchanged."""
    if mode == "he_to_ihc":
        return cfg
    if mode == "ihc_to_he":
        return cfg.replace(domain_x_name="H&E", domain_y_name="IHC", default_direction=Direction.Y_to_X.value)
    if mode == "h_only_deconvolution":
        return cfg.replace(domain_x_name="H&E", domain_y_name="H-only", default_direction=Direction.X_to_Y.value)
    raise ValueError(f"unknown preset {mode!r} (expected one of {PRESETS})")
