"""Scene-level augmentation: rotation and scale about the image centre, horizontal flip."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .data.coco import PoseInstance
from .data.geometry import apply_affine, compose, edge_affine_to_index, warp_affine
from .data.skeleton import Skeleton


def augment_affine(hw: tuple[int, int], rotation_deg: float, scale: float, flip: bool) -> np.ndarray:
    H, W = hw
    cx, cy = W / 2.0, H / 2.0
    a = np.deg2rad(rotation_deg)
    c, s = np.cos(a) * scale, np.sin(a) * scale
    rot = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])
    mirror = np.array([[-1.0, 0.0, W], [0.0, 1.0, 0.0]]) if flip else np.array([[1.0, 0, 0], [0, 1.0, 0]])
    return edge_affine_to_index(compose(rot, mirror))


def transform_instance(inst: PoseInstance, A: np.ndarray, hw: tuple[int, int], flip_index: np.ndarray | None) -> PoseInstance:
    H, W = hw
    kp = inst.keypoints.copy()
    if flip_index is not None:
        kp = kp[flip_index]
    xy = apply_affine(A, kp[:, :2])
    v = kp[:, 2].copy()
    xi, yi = np.round(xy[:, 0]), np.round(xy[:, 1])
    out = (xi < 0) | (xi >= W) | (yi < 0) | (yi >= H)
    v[out] = 0
    x, y, w, h = inst.bbox
    corners = np.array([[x, y], [x + w, y], [x, y + h], [x + w, y + h]]) - 0.5  # edges -> index frame
    tc = apply_affine(A, corners) + 0.5
    lo = np.clip(tc.min(axis=0), 0, [W, H])
    hi = np.clip(tc.max(axis=0), 0, [W, H])
    wh = hi - lo
    scale = float(np.sqrt(abs(np.linalg.det(A[:, :2]))))
    return replace(
        inst,
        keypoints=np.column_stack([xy, v]),
        bbox=np.array([lo[0], lo[1], wh[0], wh[1]]),
        area=float(wh[0] * wh[1]),
        head_length=None if inst.head_length is None else inst.head_length * scale,
    )


def augment_with(image: np.ndarray, instances: list[PoseInstance], skel: Skeleton,
                 rotation: float = 0.0, scale: float = 1.0, flip: bool = False):
    """Apply one fixed draw; returns (image, instances, affine)."""
    hw = image.shape[:2]
    A = augment_affine(hw, rotation, scale, flip)
    if rotation == 0.0 and scale == 1.0 and not flip:
        warped = image.astype(np.float32) if image.dtype != np.float64 else image.copy()
    else:
        warped = warp_affine(image, A, hw)
    fi = skel.flip_index if flip else None
    return warped, [transform_instance(i, A, hw, fi) for i in instances], A


def augment(image: np.ndarray, instances: list[PoseInstance], skel: Skeleton, rng: np.random.Generator,
            rotation: float = 45.0, scale=(0.65, 1.35), flip_prob: float = 0.5):
    """Random rotation in [-rotation, rotation] deg, scale in ``scale``, flip with ``flip_prob``."""
    r = float(rng.uniform(-rotation, rotation)) if rotation > 0 else 0.0
    s = float(rng.uniform(*scale)) if scale[1] > scale[0] else float(scale[0])
    f = bool(rng.random() < flip_prob)
    return augment_with(image, instances, skel, r, s, f)
