"""Heatmap head: keypoint tokens -> H x W x K heatmaps, Gaussian targets, MSE, decoding."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class HeatmapGeometry:
    """Grid of ``height x width`` cells, each covering ``stride`` crop pixels (edge to edge)."""

    height: int
    width: int
    stride: float = 4.0

    def crop_to_cell(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts + 0.5) / self.stride - 0.5

    def cell_to_crop(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts + 0.5) * self.stride - 0.5


@dataclass
class Heatmap:
    grid: Tensor | np.ndarray  # [H, W, K] or [B, H, W, K]
    geometry: HeatmapGeometry
    outside: np.ndarray | None = None  # keypoints whose centre fell off the grid when rendered

    @property
    def array(self) -> np.ndarray:
        return self.grid.data if isinstance(self.grid, Tensor) else np.asarray(self.grid)

    @property
    def num_k(self) -> int:
        return self.array.shape[-1]


@dataclass
class GroundTruthSpec:
    keypoints: np.ndarray  # [K, 2] crop pixels
    visibility: np.ndarray  # [K]
    sigma: float
    geometry: HeatmapGeometry


def project_keypoints(kpt_out: Tensor, head_w: Tensor, geometry: HeatmapGeometry, head_b: Tensor | None = None) -> Heatmap:
    """Map each keypoint row (K x D, optionally batched) to H*W and reshape row-major to H x W x K."""
    H, W = geometry.height, geometry.width
    if head_w.ndim != 2 or head_w.shape != (kpt_out.shape[-1], H * W):
        raise DimensionError(f"head weight {head_w.shape} does not map D={kpt_out.shape[-1]} to {H}x{W}")
    flat = T.matmul(kpt_out, head_w)
    if head_b is not None:
        flat = flat + head_b
    lead = flat.shape[:-2]
    K = flat.shape[-2]
    grid = T.reshape(flat, lead + (K, H, W))
    n = len(lead)
    grid = T.transpose(grid, tuple(range(n)) + (n + 1, n + 2, n))
    return Heatmap(grid, geometry)


def render_gaussian(spec: GroundTruthSpec) -> Heatmap:
    """exp(-d^2 / 2 sigma^2) around each visible keypoint (cell units); invisible -> zeros."""
    if spec.sigma <= 0:
        raise ValueError("sigma must be positive")
    g = spec.geometry
    H, W = g.height, g.width
    kp = np.asarray(spec.keypoints, dtype=np.float64).reshape(-1, 2)
    vis = np.asarray(spec.visibility).reshape(-1)
    K = len(kp)
    cells = g.crop_to_cell(kp)
    out = np.zeros((H, W, K), dtype=np.float32)
    outside = np.zeros(K, dtype=bool)
    ys = np.arange(H, dtype=np.float64)[:, None]
    xs = np.arange(W, dtype=np.float64)[None, :]
    for k in range(K):
        if vis[k] <= 0:
            continue
        u, v = cells[k]
        outside[k] = not (-0.5 <= u < W - 0.5 and -0.5 <= v < H - 0.5)
        out[:, :, k] = np.exp(-((xs - u) ** 2 + (ys - v) ** 2) / (2.0 * spec.sigma ** 2))
    return Heatmap(out, g, outside)


def mse_loss(pred: Heatmap, gt: Heatmap, vis) -> Tensor:
    """Mean squared error over every cell of the visible channels only."""
    p = pred.grid if isinstance(pred.grid, Tensor) else Tensor(pred.grid)
    target = gt.array
    if p.shape != target.shape:
        raise DimensionError(f"prediction {p.shape} vs target {target.shape}")
    mask = (np.asarray(vis) > 0).astype(p.dtype)
    if mask.shape != p.shape[:-3] + p.shape[-1:]:
        raise DimensionError(f"visibility {mask.shape} does not match heatmap {p.shape}")
    n_vis = int(mask.sum())
    if n_vis == 0:
        raise LossError("no visible keypoints: loss undefined")
    H, W = p.shape[-3], p.shape[-2]
    cell_mask = np.expand_dims(mask, (-3, -2))  # broadcast over H, W
    diff = T.mul(p - target.astype(p.dtype), cell_mask)
    return T.sum(T.square(diff)) * (1.0 / (n_vis * H * W))


def decode(hm: Heatmap, refine: bool = True) -> np.ndarray:
    """Per channel argmax (row-major first on ties) -> (x, y, score) in crop pixels.

    With ``refine`` the peak moves a quarter cell toward the larger neighbour on each axis
    (off-grid neighbours read as zero, so border peaks move inward).
    Returns [K, 3] or [B, K, 3].
    """
    a = hm.array
    batched = a.ndim == 4
    if not batched:
        a = a[None]
    B, H, W, K = a.shape
    flat = a.transpose(0, 3, 1, 2).reshape(B, K, H * W)
    idx = flat.argmax(axis=-1)  # first occurrence in row-major order
    score = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    row, col = np.divmod(idx, W)
    x = col.astype(np.float64)
    y = row.astype(np.float64)
    if refine:
        # neighbours outside the grid count as zero response
        pad = np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)))
        bi, ki = np.meshgrid(np.arange(B), np.arange(K), indexing="ij")
        dx = pad[bi, row + 1, col + 2, ki] - pad[bi, row + 1, col, ki]
        dy = pad[bi, row + 2, col + 1, ki] - pad[bi, row, col + 1, ki]
        x = x + 0.25 * np.sign(dx)
        y = y + 0.25 * np.sign(dy)
    xy = hm.geometry.cell_to_crop(np.stack([x, y], axis=-1))
    out = np.concatenate([xy, score[..., None].astype(np.float64)], axis=-1)
    return out if batched else out[0]


def export_heatmap(hm: Heatmap, path: str | Path) -> None:
    """Raw little-endian float32 (HWC row-major) plus a JSON sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(hm.array, dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar = {"shape": list(arr.shape), "order": "HWC row-major", "dtype": "f32le"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar) + "\n")


def import_heatmap(path: str | Path, geometry: HeatmapGeometry) -> Heatmap:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if meta.get("dtype") != "f32le" or meta.get("order") != "HWC row-major":
        raise ValueError(f"unsupported heatmap sidecar {meta}")
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"]).astype(np.float32)
    return Heatmap(arr, geometry)
