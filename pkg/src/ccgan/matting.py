"""Closed-form matting Laplacian and the photorealism penalty built on it."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse
import torch
import torch.nn.functional as F
from filelock import FileLock
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True, eq=False)
class MattingLaplacian:
    matrix: scipy.sparse.csr_matrix
    source_shape: tuple[int, int]
    eps: float
    window_radius: int

    @property
    def dim(self) -> int:
        return self.source_shape[0] * self.source_shape[1]


def build_matting_laplacian(
    image: np.ndarray,
    window_radius: int = 1,
    eps: float = 1e-7,
    value_range: tuple[float, float] = (0.0, 1.0),
) -> MattingLaplacian:
    """Matting Laplacian of an H x W x 3 guide image.

    Every (2r+1)^2 window contributes
    ``delta_ij - (1 + (I_i - mu)^T (Sigma + eps/n I)^-1 (I_j - mu)) / n``
    to entry (i, j). Pixels are mapped from ``value_range`` to [0, 1] first.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"guide image must be H x W x 3, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("guide image contains non-finite pixels")
    if window_radius < 1 or eps <= 0:
        raise ValueError("window_radius must be >= 1 and eps > 0")
    h, w, _ = img.shape
    win = 2 * window_radius + 1
    if h < win or w < win:
        raise ValueError(f"image {h}x{w} is smaller than the {win}x{win} matting window")
    lo, hi = value_range
    img = (img - lo) / (hi - lo)

    n = win * win
    idx = np.arange(h * w).reshape(h, w)
    win_idx = sliding_window_view(idx, (win, win)).reshape(-1, n)
    colors = img.reshape(-1, 3)[win_idx]  # (K, n, 3)
    mu = colors.mean(axis=1, keepdims=True)
    dev = colors - mu
    cov = np.einsum("kni,knj->kij", dev, dev) / n
    inv = np.linalg.inv(cov + (eps / n) * np.eye(3))
    inv = 0.5 * (inv + inv.transpose(0, 2, 1))
    maha = np.einsum("kni,kij,kmj->knm", dev, inv, dev)
    maha = 0.5 * (maha + maha.transpose(0, 2, 1))
    blocks = np.eye(n) - (1.0 + maha) / n

    rows = np.repeat(win_idx, n, axis=1).ravel()
    cols = np.tile(win_idx, (1, n)).ravel()
    mat = scipy.sparse.coo_matrix((blocks.ravel(), (rows, cols)), shape=(h * w, h * w)).tocsr()
    # (a + b) / 2 == (b + a) / 2 bitwise, so this makes symmetry exact.
    mat = ((mat + mat.T) * 0.5).tocsr()
    mat.sort_indices()
    return MattingLaplacian(mat, (h, w), float(eps), int(window_radius))


def _channels(img, shape) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape != (shape[0], shape[1], 3):
        raise ValueError(f"image shape {arr.shape} does not match Laplacian source shape {shape} x 3")
    return arr.reshape(-1, 3)


def photorealism_penalty(m: MattingLaplacian, img: np.ndarray) -> float:
    """Sum over RGB channels of vec(img_k)^T M vec(img_k)."""
    v = _channels(img, m.source_shape)
    return float(np.einsum("nk,nk->", v, m.matrix @ v))


class _QuadraticForm(torch.autograd.Function):
    @staticmethod
    def forward(ctx, values, matrix):
        v = values.detach().cpu().numpy().astype(np.float64)
        mv = matrix @ v
        ctx.save_for_backward(torch.from_numpy(mv))
        ctx.out_dtype = values.dtype
        ctx.device = values.device
        return torch.tensor(float(np.einsum("nk,nk->", v, mv)), dtype=values.dtype, device=values.device)

    @staticmethod
    def backward(ctx, grad_out):
        (mv,) = ctx.saved_tensors
        grad = 2.0 * mv.to(ctx.device, ctx.out_dtype) * grad_out
        return grad, None


def quadratic_form(m: MattingLaplacian, img: torch.Tensor) -> torch.Tensor:
    """Differentiable ``sum_k img_k^T M img_k`` for an H x W x 3 (or 3 x H x W) tensor.

    M is treated as a constant; the gradient is ``2 M img_k`` per channel.
    """
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[2] != 3:
        img = img.permute(1, 2, 0)
    if tuple(img.shape) != (m.source_shape[0], m.source_shape[1], 3):
        raise ValueError(f"image shape {tuple(img.shape)} does not match Laplacian source shape {m.source_shape}")
    return _QuadraticForm.apply(img.reshape(-1, 3), m.matrix)


def to_working_resolution(images: torch.Tensor, resolution: int | None) -> torch.Tensor:
    """Bilinear (antialiased) resize of NCHW images to resolution x resolution."""
    if resolution is None or images.shape[-1] == resolution and images.shape[-2] == resolution:
        return images
    return F.interpolate(images, size=(resolution, resolution), mode="bilinear", align_corners=False, antialias=True)


def unit_range_hwc(image: torch.Tensor) -> np.ndarray:
    """3 x H x W tensor in [-1, 1] -> H x W x 3 float64 array in [0, 1]."""
    return ((image.detach().cpu().double().permute(1, 2, 0) + 1.0) * 0.5).numpy()


def pho(
    generated: torch.Tensor,
    real: torch.Tensor,
    real_laplacian: MattingLaplacian,
    generated_laplacian: MattingLaplacian | None = None,
) -> torch.Tensor:
    """Pho(a, b) = sum_k a_k^T M_b a_k + sum_k b_k^T M_a b_k for one 3 x H x W pair.

    Inputs are in [-1, 1] and mapped to [0, 1]. Only ``generated`` receives
    gradient. Without ``generated_laplacian`` only the first sum is used.
    """
    a = (generated.permute(1, 2, 0) + 1.0) * 0.5
    total = quadratic_form(real_laplacian, a)
    if generated_laplacian is not None:
        b = (real.detach().permute(1, 2, 0) + 1.0) * 0.5
        total = total + quadratic_form(generated_laplacian, b)
    return total


def photorealism_loss(
    x: torch.Tensor,
    g_enc_x: torch.Tensor,
    y: torch.Tensor,
    g_dec_y: torch.Tensor,
    x_laplacians: list[MattingLaplacian],
    y_laplacians: list[MattingLaplacian],
    symmetric: bool = True,
    resolution: int | None = 64,
    window_radius: int = 1,
    eps: float = 1e-7,
    reduction: str = "pixel_mean",
) -> torch.Tensor:
    """Batch mean of Pho(G_enc(x), x) + Pho(G_dec(y), y).

    ``x_laplacians`` / ``y_laplacians`` hold the (cached) Laplacians of the
    real inputs at the working resolution. In symmetric mode the Laplacian
    of each generated image is assembled from its detached pixels.
    ``reduction='pixel_mean'`` divides every Pho by the element count
    (H * W * 3 at working resolution); ``'sum'`` keeps the raw quadratic forms.
    """
    if reduction not in ("pixel_mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    x, g_enc_x = to_working_resolution(x, resolution), to_working_resolution(g_enc_x, resolution)
    y, g_dec_y = to_working_resolution(y, resolution), to_working_resolution(g_dec_y, resolution)
    if len(x_laplacians) != x.shape[0] or len(y_laplacians) != y.shape[0]:
        raise ValueError("one Laplacian per real image is required")
    terms = []
    for real, fake, lap in list(zip(x, g_enc_x, x_laplacians)) + list(zip(y, g_dec_y, y_laplacians)):
        gen_lap = None
        if symmetric:
            gen_lap = build_matting_laplacian(unit_range_hwc(fake), window_radius, eps)
        terms.append(pho(fake, real, lap, gen_lap))
    if reduction == "pixel_mean":
        terms = [t / (3 * x.shape[-1] * x.shape[-2]) for t in terms]
    return torch.stack(terms[: x.shape[0]]).mean() + torch.stack(terms[x.shape[0] :]).mean()


class LaplacianCacheMiss(KeyError):
    pass


def write_sparse(path: str | Path, matrix: scipy.sparse.spmatrix) -> None:
    """Binary layout (little-endian): rows u64, cols u64, nnz u64, then nnz
    records of (row u64, col u64, value f64)."""
    coo = matrix.tocoo()
    header = struct.pack("<QQQ", coo.shape[0], coo.shape[1], coo.nnz)
    rec = np.empty(coo.nnz, dtype=[("r", "<u8"), ("c", "<u8"), ("v", "<f8")])
    rec["r"], rec["c"], rec["v"] = coo.row, coo.col, coo.data
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())
    os.replace(tmp, path)


def read_sparse(path: str | Path) -> scipy.sparse.csr_matrix:
    data = Path(path).read_bytes()
    rows, cols, nnz = struct.unpack_from("<QQQ", data, 0)
    rec = np.frombuffer(data, dtype=[("r", "<u8"), ("c", "<u8"), ("v", "<f8")], count=nnz, offset=24)
    mat = scipy.sparse.coo_matrix(
        (rec["v"].astype(np.float64), (rec["r"].astype(np.int64), rec["c"].astype(np.int64))), shape=(rows, cols)
    ).tocsr()
    mat.sort_indices()
    return mat


class LaplacianCache:
    """Laplacians of real patches keyed by (source_id, resolution, eps, radius).

    Held in memory and, when ``directory`` is set, persisted as one binary
    file per key plus ``index.json`` mapping keys to file names.
    """

    def __init__(
        self,
        directory: str | Path | None = None,
        resolution: int | None = 64,
        eps: float = 1e-7,
        window_radius: int = 1,
        precompute: bool = True,
    ):
        self.directory = Path(directory) if directory is not None else None
        self.resolution = resolution
        self.eps = eps
        self.window_radius = window_radius
        self.precompute = precompute
        self._memory: dict[str, MattingLaplacian] = {}
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def key(self, source_id: str) -> str:
        return f"{source_id}|res={self.resolution}|eps={self.eps!r}|r={self.window_radius}"

    @property
    def _index_path(self) -> Path:
        return self.directory / "index.json"

    def _read_index(self) -> dict[str, str]:
        if self.directory is None or not self._index_path.exists():
            return {}
        return json.loads(self._index_path.read_text(encoding="utf-8"))

    def _shape(self, image: torch.Tensor) -> tuple[int, int]:
        if self.resolution is None:
            return int(image.shape[-2]), int(image.shape[-1])
        return self.resolution, self.resolution

    def get(self, source_id: str, image: torch.Tensor | None = None) -> MattingLaplacian:
        """Laplacian for ``source_id``; ``image`` (3 x H x W in [-1, 1]) is
        used to build it on a miss."""
        key = self.key(source_id)
        if key in self._memory:
            return self._memory[key]
        index = self._read_index()
        if key in index:
            mat = read_sparse(self.directory / index[key])
            side = int(round(np.sqrt(mat.shape[0])))
            shape = self._shape(image) if image is not None else (side, side)
            lap = MattingLaplacian(mat, shape, self.eps, self.window_radius)
            self._memory[key] = lap
            return lap
        if not self.precompute or image is None:
            raise LaplacianCacheMiss(f"no cached matting Laplacian for patch {source_id!r}")
        small = to_working_resolution(image.detach()[None].double(), self.resolution)[0]
        lap = build_matting_laplacian(unit_range_hwc(small), self.window_radius, self.eps)
        self._memory[key] = lap
        if self.directory is not None:
            self._store(key, lap)
        return lap

    def _store(self, key: str, lap: MattingLaplacian) -> None:
        with FileLock(str(self.directory / ".index.lock")):
            index = self._read_index()
            if key in index:
                return
            name = f"{len(index):08d}.lap"
            write_sparse(self.directory / name, lap.matrix)
            index[key] = name
            tmp = self._index_path.with_suffix(".json.tmp")
            tmp.write_text(json.dumps(index, indent=1, sort_keys=True), encoding="utf-8")
            os.replace(tmp, self._index_path)
