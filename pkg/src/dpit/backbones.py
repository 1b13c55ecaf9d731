"""Small convolutional encoders for the bottom-up (full image) and top-down (person crop) branches.

Each stage is ``conv3x3 -> GELU -> conv3x3/2``; the last stride-2 conv emits
``out_channels`` and is left linear.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 32)
    out_channels: int = 32
    in_channels: int = 3

    def __post_init__(self):
        if not self.widths or any(w <= 0 for w in self.widths) or self.out_channels <= 0:
            raise ConfigError(f"invalid backbone widths {self.widths} / channels {self.out_channels}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    def output_hw(self, hw: tuple[int, int]) -> tuple[int, int]:
        H, W = hw
        s = self.stride
        if H % s or W % s:
            raise ConfigError(f"input {H}x{W} not divisible by backbone stride {s}")
        return H // s, W // s


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, prefix: str, dtype=np.float32) -> dict[str, Tensor]:
    """Kaiming fan-in normal conv weights, zero biases."""
    params = {}
    cin = cfg.in_channels
    for i, w in enumerate(cfg.widths):
        cout = cfg.out_channels if i == len(cfg.widths) - 1 else w
        for name, (ci, co) in (("conv", (cin, w)), ("down", (w, cout))):
            std = np.sqrt(2.0 / (9 * ci))
            params[f"{prefix}.s{i}.{name}.w"] = Tensor(rng.normal(0, std, (3, 3, ci, co)).astype(dtype), requires_grad=True)
            params[f"{prefix}.s{i}.{name}.b"] = Tensor(np.zeros(co, dtype=dtype), requires_grad=True)
        cin = cout
    return params


def run_backbone(x: Tensor, params: dict[str, Tensor], cfg: BackboneConfig, prefix: str) -> Tensor:
    """``x``: [H, W, 3] or [B, H, W, 3], normalised -> [H/s, W/s, C] (batched likewise)."""
    cfg.output_hw(x.shape[-3:-1])
    h = x
    for i in range(len(cfg.widths)):
        p = f"{prefix}.s{i}"
        h = T.gelu(T.conv2d(h, params[f"{p}.conv.w"], params[f"{p}.conv.b"], stride=1, padding=1))
        h = T.conv2d(h, params[f"{p}.down.w"], params[f"{p}.down.b"], stride=2, padding=1)
    return h


def encode_bu(image: Tensor, params: dict[str, Tensor], cfg: BackboneConfig) -> Tensor:
    return run_backbone(image, params, cfg, "bu")


def encode_td(crop: Tensor, params: dict[str, Tensor], cfg: BackboneConfig) -> Tensor:
    return run_backbone(crop, params, cfg, "td")
