"""Patch tokens, 2D sine-cosine positions, keypoint queries and sequence assembly."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import tensor as T
from .backbones import ConfigError
from .tensor import DimensionError, Tensor

KEYPOINT, BU, TD = 0, 1, 2
SEGMENT_NAMES = {KEYPOINT: "keypoint", BU: "bu", TD: "td"}


@dataclass(frozen=True)
class PatchGrid:
    patch_h: int
    patch_w: int
    feat_h: int
    feat_w: int
    channels: int

    def __post_init__(self):
        if min(self.patch_h, self.patch_w, self.feat_h, self.feat_w, self.channels) <= 0:
            raise ConfigError(f"non-positive extent in {self}")
        if self.feat_h % self.patch_h or self.feat_w % self.patch_w:
            raise ConfigError(
                f"feature {self.feat_h}x{self.feat_w} not divisible into {self.patch_h}x{self.patch_w} patches"
            )

    @property
    def rows(self) -> int:
        return self.feat_h // self.patch_h

    @property
    def cols(self) -> int:
        return self.feat_w // self.patch_w

    @property
    def n_tokens(self) -> int:
        return (self.feat_h * self.feat_w) // (self.patch_h * self.patch_w)

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w * self.channels


def split_patches(feat: Tensor, grid: PatchGrid) -> Tensor:
    """[H, W, C] -> [N, Ph*Pw*C] (leading batch axis kept if present).

    Patches are enumerated row-major over the grid and flattened row-major inside.
    """
    batched = feat.ndim == 4
    if feat.shape[-3:] != (grid.feat_h, grid.feat_w, grid.channels):
        raise ConfigError(f"feature shape {feat.shape} does not match grid {grid}")
    B = feat.shape[0] if batched else 1
    x = T.reshape(feat, (B, grid.rows, grid.patch_h, grid.cols, grid.patch_w, grid.channels))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (B, grid.n_tokens, grid.patch_dim))
    return x if batched else T.reshape(x, (grid.n_tokens, grid.patch_dim))


def merge_patches(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`split_patches` on plain arrays."""
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, grid.rows, grid.cols, grid.patch_h, grid.patch_w, grid.channels)
    n = len(lead)
    x = np.moveaxis(x, n + 2, n + 1)
    return x.reshape(*lead, grid.feat_h, grid.feat_w, grid.channels)


def sincos_1d(positions: np.ndarray, dim: int, temperature: float = 10000.0) -> np.ndarray:
    half = dim // 2
    omega = 1.0 / temperature ** (np.arange(half) / half)
    ang = positions[:, None] * omega[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class PositionalTable:
    """Fixed 2D sine-cosine codes: first D/2 channels encode the row, last D/2 the column."""

    rows: int
    cols: int
    dim: int

    def __post_init__(self):
        if self.dim % 4:
            raise ConfigError(f"2D sine-cosine positions need D divisible by 4, got {self.dim}")

    @cached_property
    def table(self) -> np.ndarray:
        r, c = np.divmod(np.arange(self.rows * self.cols), self.cols)
        return np.concatenate([sincos_1d(r.astype(np.float64), self.dim // 2),
                               sincos_1d(c.astype(np.float64), self.dim // 2)], axis=1)

    def lookup(self, row: int, col: int) -> np.ndarray:
        return self.table[row * self.cols + col]


def embed_tokens(patches: Tensor, proj: Tensor, pos: PositionalTable, branch: Tensor | None) -> Tensor:
    """patches @ proj + pos(row, col) + branch embedding."""
    if proj.ndim != 2 or proj.shape[0] != patches.shape[-1] or proj.shape[1] != pos.dim:
        raise DimensionError(f"projection {proj.shape} does not map patch dim {patches.shape[-1]} to D={pos.dim}")
    if patches.shape[-2] != pos.rows * pos.cols:
        raise DimensionError(f"{patches.shape[-2]} patches but positional table has {pos.rows * pos.cols} cells")
    out = T.matmul(patches, proj) + pos.table.astype(patches.dtype)
    if branch is not None:
        out = out + branch
    return out


def make_keypoint_queries(K: int, D: int, seed: int, dtype=np.float32) -> Tensor:
    if K <= 0 or D <= 0:
        raise ConfigError(f"K and D must be positive, got K={K}, D={D}")
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, 0.02, (K, D)).astype(dtype), requires_grad=True)


@dataclass
class TokenSequence:
    tokens: Tensor  # [L, D] or [B, L, D]
    segments: np.ndarray  # [L] of KEYPOINT / BU / TD

    @property
    def K(self) -> int:
        return int((self.segments == KEYPOINT).sum())

    @property
    def n_bu(self) -> int:
        return int((self.segments == BU).sum())

    @property
    def n_td(self) -> int:
        return int((self.segments == TD).sum())

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def __len__(self) -> int:
        return len(self.segments)

    def keypoint_rows(self) -> Tensor:
        return self.tokens[..., : self.K, :]


def _batchify(t: Tensor, B: int) -> Tensor:
    return t if t.ndim == 3 else t + np.zeros((B, 1, 1), dtype=t.dtype)


def assemble(kpt: Tensor, bu: Tensor | None, td: Tensor) -> TokenSequence:
    """Concatenate [kpt | bu | td]; ``bu`` may be None or have zero rows (no bottom-up branch)."""
    parts = [kpt, bu, td]
    batched = any(p is not None and p.ndim == 3 for p in parts)
    D = kpt.shape[-1]
    for p in parts:
        if p is not None and p.shape[-1] != D:
            raise DimensionError(f"token dimension mismatch: {[q.shape for q in parts if q is not None]}")
    B = next(p.shape[0] for p in parts if p is not None and p.ndim == 3) if batched else None
    seq, seg = [], []
    for label, p in zip((KEYPOINT, BU, TD), parts):
        if p is None or p.shape[-2] == 0:
            continue
        seq.append(_batchify(p, B) if batched else p)
        seg.append(np.full(p.shape[-2], label, dtype=np.int8))
    tokens = T.concat(seq, axis=-2)
    return TokenSequence(tokens, np.concatenate(seg))
