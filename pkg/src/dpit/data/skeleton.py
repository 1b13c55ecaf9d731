"""Skeleton definitions: joint names, flip pairs, limbs, OKS constants."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    name: str
    joints: tuple[str, ...]
    swap_pairs: tuple[tuple[int, int], ...]
    sigmas: tuple[float, ...]
    head_pair: tuple[int, int]
    limbs: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        K = self.K
        if len(self.sigmas) != K:
            raise SkeletonError(f"{self.name}: {len(self.sigmas)} sigmas for {K} joints")
        if any(s <= 0 for s in self.sigmas):
            raise SkeletonError(f"{self.name}: sigmas must be positive")
        seen = set()
        for a, b in self.swap_pairs:
            if not (0 <= a < K and 0 <= b < K) or a == b or a in seen or b in seen:
                raise SkeletonError(f"{self.name}: swap pair ({a}, {b}) is not part of an involution")
            seen.update((a, b))
        for a, b in (*self.limbs, self.head_pair):
            if not (0 <= a < K and 0 <= b < K):
                raise SkeletonError(f"{self.name}: joint pair ({a}, {b}) out of range")

    @property
    def K(self) -> int:
        return len(self.joints)

    @property
    def flip_index(self) -> np.ndarray:
        """Permutation mapping each joint to its mirror partner (itself if unpaired)."""
        perm = np.arange(self.K)
        for a, b in self.swap_pairs:
            perm[a], perm[b] = b, a
        return perm

    @property
    def oks_k(self) -> np.ndarray:
        # COCO convention: falloff constant k_i = 2 * sigma_i
        return 2.0 * np.asarray(self.sigmas, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "K": self.K,
            "joints": list(self.joints),
            "swap_pairs": [list(p) for p in self.swap_pairs],
            "sigmas": list(self.sigmas),
            "head_pair": list(self.head_pair),
            "limbs": [list(p) for p in self.limbs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        try:
            sk = cls(
                name=str(d["name"]),
                joints=tuple(d["joints"]),
                swap_pairs=tuple(tuple(p) for p in d.get("swap_pairs", [])),
                sigmas=tuple(float(s) for s in d["sigmas"]),
                head_pair=tuple(d["head_pair"]),
                limbs=tuple(tuple(p) for p in d.get("limbs", [])),
            )
        except KeyError as e:
            raise SkeletonError(f"skeleton definition missing field {e}") from None
        if "K" in d and int(d["K"]) != sk.K:
            raise SkeletonError(f"{sk.name}: K={d['K']} but {sk.K} joint names")
        return sk


BUILTIN = ("coco17", "mpii16")


def load_skeleton(name_or_path: str | Path = "coco17") -> Skeleton:
    """Load a builtin skeleton by name or a skeleton JSON file by path."""
    if str(name_or_path) in BUILTIN:
        text = resources.files("dpit.data").joinpath(f"skeletons/{name_or_path}.json").read_text()
    else:
        text = Path(name_or_path).read_text()
    return Skeleton.from_dict(json.loads(text))


def save_skeleton(skel: Skeleton, path: str | Path) -> None:
    Path(path).write_text(json.dumps(skel.to_dict(), indent=2) + "\n")
