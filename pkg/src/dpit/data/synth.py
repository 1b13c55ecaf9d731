"""Synthetic multi-person stick-figure scenes with exact keypoint labels.

Each figure is a filled torso, limb segments in the person's colour and one
disc per joint in a fixed per-joint colour, so left/right joints are
distinguishable. Figures drawn later cover earlier ones; a joint whose centre
pixel ends up owned by another figure is labelled occluded (v=1).
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .coco import CocoDataset, PoseInstance
from .skeleton import Skeleton

COCO17 = "coco17"


@dataclass(frozen=True)
class SceneSpec:
    image_hw: tuple[int, int] = (256, 256)
    persons: tuple[int, int] = (1, 3)
    scale: tuple[float, float] = (0.35, 0.7)  # figure height as a fraction of image height
    overlap_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.image_hw) <= 0:
            raise ValueError(f"image size must be positive, got {self.image_hw}")
        lo, hi = self.persons
        if lo < 0 or hi < lo:
            raise ValueError(f"empty person-count range {self.persons}")
        if not (0 < self.scale[0] <= self.scale[1]):
            raise ValueError(f"empty scale range {self.scale}")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ValueError("overlap_prob must lie in [0, 1]")


def joint_colors(K: int) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb(i / K, 0.9, 1.0) for i in range(K)]
    return np.round(np.asarray(cols) * 255).astype(np.uint8)


def _rot(v, a):
    c, s = np.cos(a), np.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def coco_pose(rng: np.random.Generator) -> np.ndarray:
    """Random 17-joint pose in figure units (height ~1, y down, pelvis at origin)."""
    P = np.zeros((17, 2))
    down = np.array([0.0, 1.0])
    neck = np.array([0.0, -0.30])
    head_tilt = rng.uniform(-0.25, 0.25)
    nose = neck + _rot(np.array([0.0, -0.10]), head_tilt)
    P[0] = nose
    P[1] = nose + _rot(np.array([0.04, -0.035]), head_tilt)
    P[2] = nose + _rot(np.array([-0.04, -0.035]), head_tilt)
    P[3] = nose + _rot(np.array([0.08, -0.01]), head_tilt)
    P[4] = nose + _rot(np.array([-0.08, -0.01]), head_tilt)
    for side, (sh, el, wr) in ((1, (5, 7, 9)), (-1, (6, 8, 10))):
        P[sh] = neck + np.array([side * 0.12, 0.02])
        a_up = -side * rng.uniform(-0.3, 2.4)
        P[el] = P[sh] + _rot(down * 0.16, a_up)
        a_lo = a_up - side * rng.uniform(-0.4, 1.6)
        P[wr] = P[el] + _rot(down * 0.15, a_lo)
    for side, (hp, kn, an) in ((1, (11, 13, 15)), (-1, (12, 14, 16))):
        P[hp] = np.array([side * 0.08, 0.0])
        a_up = -side * rng.uniform(-0.2, 0.7)
        P[kn] = P[hp] + _rot(down * 0.24, a_up)
        a_lo = a_up - side * rng.uniform(-0.8, 0.2)
        P[an] = P[kn] + _rot(down * 0.23, a_lo)
    return P


def generic_pose(rng: np.random.Generator, skel: Skeleton) -> np.ndarray:
    """Fallback for non-COCO skeletons: a jittered walk along the limb graph."""
    K = skel.K
    P = np.full((K, 2), np.nan)
    P[0] = 0.0
    changed = True
    while changed:
        changed = False
        for a, b in skel.limbs:
            for s, d in ((a, b), (b, a)):
                if not np.isnan(P[s, 0]) and np.isnan(P[d, 0]):
                    P[d] = P[s] + _rot(np.array([0.0, 0.18]), rng.uniform(-np.pi, np.pi))
                    changed = True
    missing = np.isnan(P[:, 0])
    P[missing] = rng.uniform(-0.3, 0.3, (int(missing.sum()), 2))
    return P


def _disc_mask(shape, cx, cy, r):
    H, W = shape
    x0, x1 = max(int(np.floor(cx - r)), 0), min(int(np.ceil(cx + r)) + 1, W)
    y0, y1 = max(int(np.floor(cy - r)), 0), min(int(np.ceil(cy + r)) + 1, H)
    if x0 >= x1 or y0 >= y1:
        return None, None
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return (slice(y0, y1), slice(x0, x1)), (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def _segment_mask(shape, p, q, half):
    H, W = shape
    x0 = max(int(np.floor(min(p[0], q[0]) - half)), 0)
    x1 = min(int(np.ceil(max(p[0], q[0]) + half)) + 1, W)
    y0 = max(int(np.floor(min(p[1], q[1]) - half)), 0)
    y1 = min(int(np.ceil(max(p[1], q[1]) + half)) + 1, H)
    if x0 >= x1 or y0 >= y1:
        return None, None
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    d = q - p
    L2 = float(d @ d)
    t = np.zeros_like(xs) if L2 == 0 else np.clip(((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / L2, 0, 1)
    dist2 = (xs - p[0] - t * d[0]) ** 2 + (ys - p[1] - t * d[1]) ** 2
    return (slice(y0, y1), slice(x0, x1)), dist2 <= half * half


def _polygon_mask(shape, poly):
    H, W = shape
    x0 = max(int(np.floor(poly[:, 0].min())), 0)
    x1 = min(int(np.ceil(poly[:, 0].max())) + 1, W)
    y0 = max(int(np.floor(poly[:, 1].min())), 0)
    y1 = min(int(np.ceil(poly[:, 1].max())) + 1, H)
    if x0 >= x1 or y0 >= y1:
        return None, None
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(poly)
    for i in range(n):  # even-odd rule
        (xa, ya), (xb, yb) = poly[i], poly[(i + 1) % n]
        cross = (ya > ys) != (yb > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (xb - xa) * (ys - ya) / (yb - ya) + xa
        inside ^= cross & (xs < xint)
    return (slice(y0, y1), slice(x0, x1)), inside


def _paint(image, owner, sl, mask, color, who):
    if sl is None:
        return
    image[sl][mask] = color
    owner[sl][mask] = who


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 uint8
    instances: list[PoseInstance]


def _sample_pose(rng, skel, height):
    base = coco_pose(rng) if skel.K == 17 and skel.name == COCO17 else generic_pose(rng, skel)
    tilt = rng.uniform(-0.2, 0.2)
    c, s = np.cos(tilt), np.sin(tilt)
    return base @ np.array([[c, s], [-s, c]]) * height


def generate_scene(spec: SceneSpec, skel: Skeleton, image_id: int = 0, first_ann_id: int = 1) -> Scene:
    """Render one scene; identical (spec, skeleton, ids) give bit-identical output."""
    rng = np.random.default_rng([spec.seed, image_id])
    H, W = spec.image_hw
    K = skel.K
    bg = rng.integers(10, 50, size=3)
    image = np.clip(bg + rng.integers(-6, 7, size=(H, W, 3)), 0, 255).astype(np.uint8)
    owner = np.full((H, W), -1, dtype=np.int64)
    jcol = joint_colors(K)
    n = int(rng.integers(spec.persons[0], spec.persons[1] + 1))

    people = []
    for p in range(n):
        height = rng.uniform(*spec.scale) * H
        r = max(1.5, 0.02 * height)
        for _ in range(50):  # reject poses where joint discs touch each other
            pose = _sample_pose(rng, skel, height)
            d = np.linalg.norm(pose[:, None] - pose[None], axis=-1) + np.eye(K) * 1e9
            if d.min() > 2.5 * r + 1:
                break
        lo, hi = pose.min(axis=0) - r, pose.max(axis=0) + r
        if people and rng.random() < spec.overlap_prob:
            # pin one of this figure's joints onto an in-frame joint of an earlier figure,
            # so its disc is guaranteed to cover that joint
            anchor = people[int(rng.integers(len(people)))]["pts"]
            inside = np.flatnonzero((np.round(anchor[:, 0]) >= 0) & (np.round(anchor[:, 0]) < W)
                                    & (np.round(anchor[:, 1]) >= 0) & (np.round(anchor[:, 1]) < H))
            a = anchor[inside[int(rng.integers(len(inside)))]] if len(inside) else anchor.mean(axis=0)
            j = int(rng.integers(K))
            offset = a - pose[j] + rng.uniform(-0.4, 0.4, 2) * r
        else:
            offset = np.array([rng.uniform(-lo[0], W - 1 - hi[0]) if W - 1 - hi[0] > -lo[0] else (W - 1) / 2 - (lo[0] + hi[0]) / 2,
                               rng.uniform(-lo[1], H - 1 - hi[1]) if H - 1 - hi[1] > -lo[1] else (H - 1) / 2 - (lo[1] + hi[1]) / 2])
        pts = pose + offset
        color = np.round(np.asarray(colorsys.hsv_to_rgb(rng.random(), 0.5, 0.75)) * 255).astype(np.uint8)
        people.append({"pts": pts, "r": r, "color": color, "height": height})

    for p, person in enumerate(people):
        pts, r, color = person["pts"], person["r"], person["color"]
        if skel.name == COCO17:
            torso = pts[[5, 6, 12, 11]]
            _paint(image, owner, *_polygon_mask((H, W), torso), color, p)
        for a, b in skel.limbs:
            _paint(image, owner, *_segment_mask((H, W), pts[a], pts[b], max(1.0, 0.018 * person["height"])), color, p)
        for j in range(K):
            _paint(image, owner, *_disc_mask((H, W), pts[j, 0], pts[j, 1], r), jcol[j], p)

    instances = []
    for p, person in enumerate(people):
        pts, r = person["pts"], person["r"]
        kp = np.zeros((K, 3))
        for j in range(K):
            x, y = pts[j]
            xi, yi = int(round(x)), int(round(y))
            if not (0 <= xi < W and 0 <= yi < H):
                continue
            kp[j] = (x, y, 2 if owner[yi, xi] == p else 1)
        lo = pts.min(axis=0) - r
        hi = pts.max(axis=0) + r
        lo = np.clip(lo + 0.5, 0, [W, H])  # index -> edge coordinates, clipped to frame
        hi = np.clip(hi + 0.5, 0, [W, H])
        wh = hi - lo
        a, b = skel.head_pair
        head = 0.6 * float(np.linalg.norm(pts[a] - pts[b]))
        instances.append(PoseInstance(
            keypoints=kp, bbox=[lo[0], lo[1], wh[0], wh[1]], area=float(wh[0] * wh[1]),
            image_id=image_id, id=first_ann_id + p, head_length=head,
        ))
    return Scene(image=image, instances=instances)


def generate_dataset(spec: SceneSpec, skel: Skeleton, count: int):
    """Generate ``count`` scenes; returns (list of images, CocoDataset)."""
    ds = CocoDataset(keypoint_names=list(skel.joints))
    images = []
    ann_id = 1
    for i in range(count):
        iid = i + 1
        scene = generate_scene(spec, skel, image_id=iid, first_ann_id=ann_id)
        ann_id += len(scene.instances)
        images.append(scene.image)
        ds.images[iid] = {"id": iid, "file_name": f"{iid:06d}.png", "height": spec.image_hw[0], "width": spec.image_hw[1]}
        ds.instances[iid] = scene.instances
    return images, ds
