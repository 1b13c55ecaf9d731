"""Sample preparation, batching, the training loop, checkpoint/resume and inference."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import checkpoint as ckpt
from .augment import augment
from .data.coco import PoseInstance
from .data.geometry import GeometryError, crop_to_input, resize_full, to_image_coords
from .data.skeleton import Skeleton
from .heatmap import GroundTruthSpec, decode, render_gaussian
from .model import DPIT, ModelConfig
from .optim import AdamState, NonFiniteGradient, TrainConfig, adam_step, lr_at
from .tensor import Tape

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, last_checkpoint: Path | None):
        super().__init__(f"{msg}; last good checkpoint: {last_checkpoint}")
        self.last_checkpoint = last_checkpoint


def normalize(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


@dataclass
class PersonSample:
    crop: np.ndarray  # H2 x W2 x 3, normalised
    target: np.ndarray  # h x w x K
    vis: np.ndarray  # K, 1 where the target is supervised
    affine: np.ndarray  # image -> crop
    ann_id: int = 0


@dataclass
class PreparedScene:
    image_id: int
    bu_image: np.ndarray | None
    persons: list[PersonSample]


@dataclass
class Batch:
    bu_images: np.ndarray | None
    crops: np.ndarray
    image_index: np.ndarray
    targets: np.ndarray
    target_vis: np.ndarray
    image_ids: list[int] = field(default_factory=list)


@dataclass
class TrainData:
    """Full images (H x W x 3 uint8) and their annotated persons, aligned by position."""

    images: list[np.ndarray]
    instances: list[list[PoseInstance]]
    image_ids: list[int]

    @classmethod
    def from_coco(cls, images: list[np.ndarray], ds) -> "TrainData":
        ids = list(ds.images)
        return cls(list(images), [ds.instances.get(i, []) for i in ids], ids)

    def __len__(self) -> int:
        return len(self.images)


def person_crop(image: np.ndarray, bbox, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    crop, A = crop_to_input(image, bbox, cfg.td_input)
    return normalize(crop), A


def prepare_scene(image: np.ndarray, instances: list[PoseInstance], cfg: ModelConfig, skel: Skeleton,
                  image_id: int = 0, rng: np.random.Generator | None = None, tcfg: TrainConfig | None = None) -> PreparedScene:
    """Crop and target every usable person of one image; augment first when ``rng`` is given."""
    if rng is not None and tcfg is not None:
        image, instances, _ = augment(image, instances, skel, rng, tcfg.rotation, tcfg.scale, tcfg.flip_prob)
    bu = normalize(resize_full(image, cfg.bu_input)[0]) if cfg.use_bu else None
    geo = cfg.heatmap_geometry
    persons = []
    for inst in instances:
        vis = inst.keypoints[:, 2] > 0
        if not vis.any():
            continue
        try:
            crop, A = person_crop(image, inst.bbox, cfg)
        except GeometryError:
            continue
        pts = inst.keypoints[:, :2] @ A[:, :2].T + A[:, 2]
        hm = render_gaussian(GroundTruthSpec(pts, vis.astype(np.int64), cfg.sigma, geo))
        v = (vis & ~hm.outside).astype(np.float32)
        if not v.any():
            continue
        persons.append(PersonSample(crop, hm.array, v, A, inst.id))
    return PreparedScene(image_id, bu, persons)


def collate(scenes: list[tuple[PreparedScene, list[int]]], use_bu: bool) -> Batch:
    """``scenes`` pairs each scene with the indices of its persons placed in this batch."""
    bu, crops, idx, tg, vis, ids = [], [], [], [], [], []
    for slot, (sc, which) in enumerate(scenes):
        if use_bu:
            bu.append(sc.bu_image)
        ids.append(sc.image_id)
        for j in which:
            p = sc.persons[j]
            crops.append(p.crop)
            idx.append(slot)
            tg.append(p.target)
            vis.append(p.vis)
    return Batch(
        np.stack(bu) if use_bu else None,
        np.stack(crops),
        np.asarray(idx, dtype=np.intp),
        np.stack(tg),
        np.stack(vis),
        ids,
    )


class BatchSource:
    """Deterministic batches for each epoch: order and augmentation derive from (seed, epoch, image)."""

    def __init__(self, data: TrainData, cfg: ModelConfig, tcfg: TrainConfig, skel: Skeleton):
        self.data, self.cfg, self.tcfg, self.skel = data, cfg, tcfg, skel
        self._cache: dict[int, PreparedScene] = {}

    def scene(self, i: int, epoch: int) -> PreparedScene:
        if not self.tcfg.augment:
            if i not in self._cache:
                self._cache[i] = prepare_scene(self.data.images[i], self.data.instances[i], self.cfg, self.skel,
                                               self.data.image_ids[i])
            return self._cache[i]
        rng = np.random.default_rng([self.tcfg.seed, epoch, i])
        return prepare_scene(self.data.images[i], self.data.instances[i], self.cfg, self.skel,
                             self.data.image_ids[i], rng, self.tcfg)

    def batches(self, epoch: int) -> Iterator[Batch]:
        order = np.random.default_rng([self.tcfg.seed, epoch]).permutation(len(self.data))
        pending: list[tuple[PreparedScene, list[int]]] = []
        n = 0
        B = self.tcfg.batch_size
        for i in order:
            sc = self.scene(int(i), epoch)
            j = 0
            while j < len(sc.persons):
                take = min(B - n, len(sc.persons) - j)
                pending.append((sc, list(range(j, j + take))))
                n += take
                j += take
                if n == B:
                    yield collate(pending, self.cfg.use_bu)
                    pending, n = [], 0
        if n:
            yield collate(pending, self.cfg.use_bu)

    def steps_per_epoch(self) -> int:
        return sum(1 for _ in self.batches(0))


# ---------------------------------------------------------------------------- checkpoints


def checkpoint_tensors(model: DPIT, opt: AdamState, epoch: int, step: int, tcfg: TrainConfig) -> dict[str, np.ndarray]:
    t: dict[str, np.ndarray] = {}
    for k, p in model.params.items():
        t[f"param.{k}"] = p.data
    for k in model.params:
        t[f"adam.m.{k}"] = opt.m[k]
    for k in model.params:
        t[f"adam.v.{k}"] = opt.v[k]
    meta = {"epoch": epoch, "step": step, "adam_t": opt.t, "model": model.cfg.to_dict(), "train": asdict(tcfg)}
    t["meta.json"] = ckpt.encode_json(meta)
    return t


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    t = ckpt.load(path)
    if "meta.json" not in t:
        raise ckpt.CheckpointError(f"{path}: missing meta.json")
    meta = ckpt.decode_json(t.pop("meta.json"))
    return t, meta


def model_from_checkpoint(path: str | Path) -> tuple[DPIT, dict]:
    t, meta = read_checkpoint(path)
    cfg = ModelConfig(**meta["model"])
    model = DPIT(cfg)
    model.load_state_dict({k[len("param."):]: v for k, v in t.items() if k.startswith("param.")})
    return model, meta


def restore(model: DPIT, path: str | Path, opt: AdamState) -> dict:
    t, meta = read_checkpoint(path)
    if meta["model"]["num_keypoints"] != model.cfg.num_keypoints:
        raise ckpt.CheckpointError(
            f"checkpoint has K={meta['model']['num_keypoints']} keypoints, model expects {model.cfg.num_keypoints}")
    model.load_state_dict({k[len("param."):]: v for k, v in t.items() if k.startswith("param.")})
    for k in model.params:
        opt.m[k] = t[f"adam.m.{k}"].astype(model.dtype)
        opt.v[k] = t[f"adam.v.{k}"].astype(model.dtype)
    opt.t = int(meta["adam_t"])
    return meta


# ---------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    losses: list[float]
    steps: int
    epochs_done: int
    checkpoints: list[Path]


def train(model: DPIT, data: TrainData, tcfg: TrainConfig, skel: Skeleton, out_dir: str | Path | None = None,
          resume: str | Path | None = None, on_step: Callable[[int, int, float, float], None] | None = None,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Adam training on heatmap MSE. Checkpoints after each epoch when ``out_dir`` is set.

    ``stop_after_epoch`` ends the run early (for interruption tests); the schedule
    still refers to ``tcfg.epochs``.
    """
    if skel.K != model.cfg.num_keypoints:
        raise ValueError(f"skeleton {skel.name} has K={skel.K}; model expects {model.cfg.num_keypoints}")
    src = BatchSource(data, model.cfg, tcfg, skel)
    opt = AdamState.for_params(model.params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
    start, step = 0, 0
    last: Path | None = None
    if resume is not None:
        meta = restore(model, resume, opt)
        start, step, last = int(meta["epoch"]), int(meta["step"]), Path(resume)
    out = Path(out_dir) if out_dir is not None else None
    losses: list[float] = []
    saved: list[Path] = []
    if out is not None and resume is None:
        last = ckpt.save(out / "epoch_0000.ckpt", checkpoint_tensors(model, opt, 0, 0, tcfg))
        saved.append(last)
    epoch = start
    for epoch in range(start, tcfg.epochs):
        lr = lr_at(epoch, tcfg)
        for batch in src.batches(epoch):
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                break
            model.zero_grad()
            with Tape() as tape:
                loss = model.loss(batch)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at step {step}", last)
                tape.backward(loss)
            try:
                adam_step(model.params, opt, lr=lr, weight_decay=tcfg.weight_decay, grad_clip=tcfg.grad_clip)
            except NonFiniteGradient as e:
                raise TrainingDiverged(f"{e} at step {step}", last) from None
            losses.append(value)
            if on_step is not None:
                on_step(step, epoch, lr, value)
            step += 1
        if out is not None:
            last = ckpt.save(out / f"epoch_{epoch + 1:04d}.ckpt", checkpoint_tensors(model, opt, epoch + 1, step, tcfg))
            saved.append(last)
        if tcfg.max_steps is not None and step >= tcfg.max_steps:
            epoch += 1
            break
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            epoch += 1
            break
    else:
        epoch = tcfg.epochs
    return TrainResult(losses, step, epoch, saved)


# ---------------------------------------------------------------------------- inference


def predict_image(model: DPIT, image: np.ndarray, boxes, image_id: int = 0, mask_bu: bool = False,
                  scores=None) -> list[dict]:
    """Top-down inference for each box; keypoints are returned in image pixels."""
    cfg = model.cfg
    boxes = [np.asarray(b, dtype=np.float64) for b in boxes]
    keep, crops, affines = [], [], []
    for i, b in enumerate(boxes):
        try:
            c, A = person_crop(image, b, cfg)
        except GeometryError:
            continue
        keep.append(i)
        crops.append(c)
        affines.append(A)
    if not crops:
        return []
    bu = normalize(resize_full(image, cfg.bu_input)[0])[None] if cfg.use_bu else None
    out = model.forward(bu, np.stack(crops), np.zeros(len(crops), dtype=np.intp), mask_bu=mask_bu)
    dec = decode(out.heatmap)  # [B, K, 3] in crop pixels
    preds = []
    for n, i in enumerate(keep):
        pts = to_image_coords(dec[n], affines[n])
        kp = np.column_stack([pts[:, :2], np.ones(len(pts))])
        conf = float(np.clip(dec[n, :, 2], 0, None).mean())
        if scores is not None:
            conf *= float(scores[i])
        preds.append({
            "image_id": int(image_id),
            "category_id": 1,
            "keypoints": [round(float(v), 4) for v in kp.reshape(-1)],
            "score": conf,
            "bbox": [float(v) for v in boxes[i]],
        })
    return preds


def predict_dataset(model: DPIT, data: TrainData, mask_bu: bool = False) -> list[dict]:
    """Predict every annotated person using its ground-truth box."""
    preds = []
    for img, insts, iid in zip(data.images, data.instances, data.image_ids):
        preds += predict_image(model, img, [p.bbox for p in insts], iid, mask_bu=mask_bu)
    return preds


def write_loss_log(path: str | Path, rows: list[tuple[int, int, float, float]]) -> None:
    with open(path, "w") as f:
        for step, epoch, lr, loss in rows:
            f.write(json.dumps({"step": step, "epoch": epoch, "lr": lr, "loss": loss}) + "\n")
