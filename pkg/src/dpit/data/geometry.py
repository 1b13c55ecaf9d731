"""Affine geometry and bilinear resampling.

Coordinates are pixel-index coordinates: the centre of pixel (row i, col j) is
(x=j, y=i). Resampling follows the half-pixel-centre convention: scale maps
pixel *edges* onto pixel edges, so a 2x downscale sends x to (x + 0.5) / 2 - 0.5.
Affines are 2x3 arrays mapping source (x, y) to destination (x, y).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


def to3(A: np.ndarray) -> np.ndarray:
    M = np.eye(3)
    M[:2] = A
    return M


def compose(*affines: np.ndarray) -> np.ndarray:
    """compose(A, B) applies B first, then A."""
    M = np.eye(3)
    for A in affines:
        M = M @ to3(A)
    return M[:2]


def invert_affine(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    if not np.isfinite(det) or abs(det) < 1e-12:
        raise GeometryError(f"affine is singular (det={det})")
    return np.linalg.inv(to3(A))[:2]


def apply_affine(A: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts[..., :2] @ np.asarray(A)[:, :2].T + np.asarray(A)[:, 2]


def edge_affine_to_index(M: np.ndarray) -> np.ndarray:
    """Convert an affine in edge coordinates (u = x + 0.5) to index coordinates."""
    shift = np.array([[1.0, 0, 0.5], [0, 1.0, 0.5]])
    unshift = np.array([[1.0, 0, -0.5], [0, 1.0, -0.5]])
    return compose(unshift, M, shift)


def warp_affine(image: np.ndarray, A: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of ``image`` (H x W [x C]) through affine ``A``; zeros outside."""
    H, W = image.shape[:2]
    Ho, Wo = out_hw
    inv = invert_affine(A)
    img = image.astype(np.float32) if image.dtype != np.float64 else image
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    ys, xs = np.mgrid[0:Ho, 0:Wo]
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(img.dtype)[..., None]
    fy = (sy - y0).astype(img.dtype)[..., None]
    out = np.zeros((Ho, Wo, img.shape[2]), dtype=img.dtype)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            vals = np.zeros_like(out)
            vals[ok] = img[yy[ok], xx[ok]]
            out += wx * wy * vals
    return out[..., 0] if squeeze else out


def crop_affine(bbox, target_hw: tuple[int, int], expand: float = 1.25) -> np.ndarray:
    """Affine from image to crop for ``bbox`` = [x, y, w, h] (edge extents).

    The box is scaled by ``expand`` about its centre, grown to the target aspect
    ratio, then mapped onto the ``target_hw`` grid centre-to-centre.
    """
    x, y, w, h = (float(v) for v in bbox)
    if not (w > 0 and h > 0) or not np.isfinite([x, y, w, h]).all():
        raise GeometryError(f"degenerate bbox {list(bbox)}")
    Ht, Wt = target_hw
    cx, cy = x + w / 2.0, y + h / 2.0
    w, h = w * expand, h * expand
    aspect = Wt / Ht
    if w / h > aspect:
        h = w / aspect
    else:
        w = h * aspect
    s = Wt / w
    M = np.array([[s, 0.0, Wt / 2.0 - s * cx], [0.0, s, Ht / 2.0 - s * cy]])
    return edge_affine_to_index(M)


def crop_to_input(image: np.ndarray, bbox, target_hw: tuple[int, int], expand: float = 1.25):
    """Cut the person box out of ``image`` at ``target_hw``; returns (crop, forward affine)."""
    A = crop_affine(bbox, target_hw, expand)
    return warp_affine(image, A, target_hw), A


@dataclass(frozen=True)
class Letterbox:
    scale: float
    pad_x: float
    pad_y: float
    affine: np.ndarray


def letterbox_affine(src_hw: tuple[int, int], target_hw: tuple[int, int]) -> Letterbox:
    H, W = src_hw
    Ht, Wt = target_hw
    if min(H, W, Ht, Wt) <= 0:
        raise GeometryError(f"invalid sizes {src_hw} -> {target_hw}")
    s = min(Ht / H, Wt / W)
    pad_x = (Wt - s * W) / 2.0
    pad_y = (Ht - s * H) / 2.0
    M = np.array([[s, 0.0, pad_x], [0.0, s, pad_y]])
    return Letterbox(s, pad_x, pad_y, edge_affine_to_index(M))


def resize_full(image: np.ndarray, target_hw: tuple[int, int]):
    """Aspect-preserving resize with symmetric zero padding; returns (image, Letterbox)."""
    lb = letterbox_affine(image.shape[:2], target_hw)
    return warp_affine(image, lb.affine, target_hw), lb


def to_image_coords(crop_pts, crop_transform: np.ndarray) -> np.ndarray:
    """Map points from crop pixels back to original image pixels."""
    pts = np.asarray(crop_pts, dtype=np.float64)
    out = pts.copy()
    out[..., :2] = apply_affine(invert_affine(crop_transform), pts)
    return out
