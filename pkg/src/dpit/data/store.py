"""On-disk dataset layout: ``images/*.png``, ``annotations.json``, ``skeleton.json``."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .coco import CocoDataset, parse_coco, serialize_coco
from .skeleton import Skeleton, load_skeleton, save_skeleton

ANNOTATIONS = "annotations.json"
SKELETON = "skeleton.json"
IMAGES = "images"


def save_dataset(out: str | Path, images: list[np.ndarray], ds: CocoDataset, skel: Skeleton) -> Path:
    out = Path(out)
    (out / IMAGES).mkdir(parents=True, exist_ok=True)
    for img, meta in zip(images, ds.images.values()):
        Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(out / IMAGES / meta["file_name"])
    (out / ANNOTATIONS).write_text(serialize_coco(ds, skel))
    save_skeleton(skel, out / SKELETON)
    return out


def load_dataset(root: str | Path, skel: Skeleton | None = None) -> tuple[list[np.ndarray], CocoDataset, Skeleton]:
    """Read a dataset directory. The directory's own skeleton file wins unless ``skel`` is given."""
    root = Path(root)
    if skel is None:
        skel = load_skeleton(root / SKELETON) if (root / SKELETON).exists() else load_skeleton("coco17")
    ds = parse_coco((root / ANNOTATIONS).read_text(), skel)
    images = []
    for meta in ds.images.values():
        with Image.open(root / IMAGES / meta["file_name"]) as im:
            images.append(np.asarray(im.convert("RGB")))
    return images, ds, skel
