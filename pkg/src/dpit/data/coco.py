"""COCO keypoint JSON subset: read, write, and per-image grouping."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .skeleton import Skeleton


class CocoParseError(ValueError):
    pass


@dataclass
class PoseInstance:
    """One person: K x 3 keypoints (x, y, visibility) and an [x, y, w, h] box."""

    keypoints: np.ndarray
    bbox: np.ndarray
    area: float
    image_id: int
    id: int = 0
    head_length: float | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(4)
        self.area = float(self.area)

    @property
    def visibility(self) -> np.ndarray:
        return self.keypoints[:, 2].astype(np.int64)

    def to_dict(self) -> dict:
        kp = self.keypoints.copy()
        flat = []
        for x, y, v in kp:
            flat += [float(x), float(y), int(v)]
        d = {
            "id": int(self.id),
            "image_id": int(self.image_id),
            "category_id": 1,
            "keypoints": flat,
            "num_keypoints": int((kp[:, 2] > 0).sum()),
            "bbox": [float(v) for v in self.bbox],
            "area": float(self.area),
            "iscrowd": 0,
        }
        if self.head_length is not None:
            d["head_length"] = float(self.head_length)
        return d

    def __eq__(self, other):
        if not isinstance(other, PoseInstance):
            return NotImplemented
        return (
            self.id == other.id
            and self.image_id == other.image_id
            and np.array_equal(self.keypoints, other.keypoints)
            and np.array_equal(self.bbox, other.bbox)
            and self.area == other.area
            and self.head_length == other.head_length
        )


@dataclass
class CocoDataset:
    images: dict[int, dict] = field(default_factory=dict)
    instances: dict[int, list[PoseInstance]] = field(default_factory=dict)
    keypoint_names: list[str] | None = None

    def all_instances(self) -> list[PoseInstance]:
        return [inst for iid in self.images for inst in self.instances.get(iid, [])]

    def __eq__(self, other):
        if not isinstance(other, CocoDataset):
            return NotImplemented
        return (
            self.images == other.images
            and self.keypoint_names == other.keypoint_names
            and {k: v for k, v in self.instances.items() if v} == {k: v for k, v in other.instances.items() if v}
        )


def parse_coco(json_text: str, skeleton: Skeleton | None = None) -> CocoDataset:
    """Parse COCO keypoint annotations, grouping instances by image.

    When ``skeleton`` is given, keypoint arity must be 3K and category keypoint
    names (if present) must match the skeleton's joint names.
    """
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as e:
        raise CocoParseError(f"malformed JSON: {e}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list) or not isinstance(doc.get("annotations"), list):
        raise CocoParseError("expected an object with 'images' and 'annotations' arrays")

    names = None
    for cat in doc.get("categories") or []:
        if cat.get("keypoints"):
            names = list(cat["keypoints"])
            break
    if skeleton is not None and names is not None and names != list(skeleton.joints):
        raise CocoParseError(f"category keypoints do not match skeleton {skeleton.name!r}")
    K = skeleton.K if skeleton is not None else (len(names) if names is not None else None)

    ds = CocoDataset(keypoint_names=names)
    for img in doc["images"]:
        try:
            iid = int(img["id"])
        except (KeyError, TypeError, ValueError):
            raise CocoParseError(f"image entry without integer id: {img!r}") from None
        ds.images[iid] = {k: img[k] for k in ("id", "file_name", "width", "height") if k in img}
        ds.instances.setdefault(iid, [])

    for ann in doc["annotations"]:
        aid = ann.get("id", "?")
        try:
            kp = ann["keypoints"]
            bbox = ann["bbox"]
            area = ann["area"]
            iid = int(ann["image_id"])
        except KeyError as e:
            raise CocoParseError(f"annotation {aid}: missing field {e}") from None
        if not isinstance(kp, list) or len(kp) % 3 != 0 or (K is not None and len(kp) != 3 * K):
            expected = f"3*{K}={3 * K}" if K is not None else "a multiple of 3"
            raise CocoParseError(f"annotation {aid}: keypoints length {len(kp)} (expected {expected})")
        if K is None:
            K = len(kp) // 3
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise CocoParseError(f"annotation {aid}: bbox must be [x, y, w, h]")
        inst = PoseInstance(
            keypoints=np.asarray(kp, dtype=np.float64).reshape(-1, 3),
            bbox=bbox,
            area=area,
            image_id=iid,
            id=int(ann.get("id", 0)),
            head_length=ann.get("head_length"),
        )
        ds.instances.setdefault(iid, []).append(inst)
        if iid not in ds.images:
            ds.images[iid] = {"id": iid}
    return ds


def to_coco_dict(ds: CocoDataset, skeleton: Skeleton | None = None) -> dict:
    names = list(skeleton.joints) if skeleton is not None else ds.keypoint_names
    cat = {"id": 1, "name": "person", "supercategory": "person"}
    if names is not None:
        cat["keypoints"] = names
    if skeleton is not None:
        cat["skeleton"] = [[a + 1, b + 1] for a, b in skeleton.limbs]
    return {
        "images": [ds.images[i] for i in sorted(ds.images)],
        "annotations": [inst.to_dict() for i in sorted(ds.images) for inst in ds.instances.get(i, [])],
        "categories": [cat],
    }


def serialize_coco(ds: CocoDataset, skeleton: Skeleton | None = None) -> str:
    return json.dumps(to_coco_dict(ds, skeleton), indent=1, sort_keys=True) + "\n"


def parse_predictions(json_text: str) -> list[dict]:
    """COCO keypoint results: [{image_id, keypoints, score, ...}]."""
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as e:
        raise CocoParseError(f"malformed JSON: {e}") from None
    if not isinstance(doc, list):
        raise CocoParseError("predictions file must be a JSON array")
    for i, d in enumerate(doc):
        if not isinstance(d, dict) or "image_id" not in d or "keypoints" not in d or len(d["keypoints"]) % 3:
            raise CocoParseError(f"prediction {i}: needs image_id and 3K keypoints")
        d.setdefault("score", 1.0)
    return doc
