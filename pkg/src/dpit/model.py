"""Dual-branch pose transformer: BU + TD conv features -> tokens -> encoder -> heatmaps."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbones import BackboneConfig, ConfigError, init_backbone, run_backbone
from .encoder import LN_EPS, EncoderConfig, EncoderLayerWeights, encode
from .heatmap import Heatmap, HeatmapGeometry, mse_loss, project_keypoints
from .tensor import Tensor
from .tokenizer import (
    PatchGrid,
    PositionalTable,
    TokenSequence,
    assemble,
    embed_tokens,
    make_keypoint_queries,
    split_patches,
)


@dataclass(frozen=True)
class ModelConfig:
    name: str = "dpit-b"
    num_keypoints: int = 17
    bu_input: tuple[int, int] = (512, 512)
    td_input: tuple[int, int] = (256, 192)
    bu_widths: tuple[int, ...] = (16, 32, 32)
    td_widths: tuple[int, ...] = (16, 32)
    channels: int = 32
    bu_patch: tuple[int, int] = (8, 8)
    td_patch: tuple[int, int] = (4, 3)
    dim: int = 192
    depth: int = 12
    heads: int = 8
    ffn_mult: int = 3
    dropout: float = 0.0
    heatmap_stride: int = 4
    sigma: float = 2.0
    use_bu: bool = True
    seed: int = 0

    def __post_init__(self):
        # normalise list inputs (e.g. from TOML) to tuples
        for f in ("bu_input", "td_input", "bu_widths", "td_widths", "bu_patch", "td_patch"):
            object.__setattr__(self, f, tuple(int(v) for v in getattr(self, f)))
        if self.num_keypoints <= 0:
            raise ConfigError("num_keypoints must be positive")
        self.encoder  # validates heads / dim
        self.bu_grid
        self.td_grid
        self.heatmap_geometry
        if self.dim % 4:
            raise ConfigError(f"D={self.dim} must be divisible by 4 for 2D sine-cosine positions")

    @property
    def bu_backbone(self) -> BackboneConfig:
        return BackboneConfig(self.bu_widths, self.channels)

    @property
    def td_backbone(self) -> BackboneConfig:
        return BackboneConfig(self.td_widths, self.channels)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.depth, self.heads, self.dim, self.ffn_mult, self.dropout)

    @property
    def bu_grid(self) -> PatchGrid:
        h, w = self.bu_backbone.output_hw(self.bu_input)
        return PatchGrid(*self.bu_patch, h, w, self.channels)

    @property
    def td_grid(self) -> PatchGrid:
        h, w = self.td_backbone.output_hw(self.td_input)
        return PatchGrid(*self.td_patch, h, w, self.channels)

    @property
    def heatmap_geometry(self) -> HeatmapGeometry:
        H, W = self.td_input
        s = self.heatmap_stride
        if H % s or W % s:
            raise ConfigError(f"TD input {self.td_input} not divisible by heatmap stride {s}")
        return HeatmapGeometry(H // s, W // s, float(s))

    @property
    def sequence_length(self) -> int:
        return self.num_keypoints + (self.bu_grid.n_tokens if self.use_bu else 0) + self.td_grid.n_tokens

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, ModelConfig] = {
    "dpit-b": ModelConfig(name="dpit-b", depth=12, heads=8, dim=192),
    "dpit-d6": ModelConfig(name="dpit-d6", depth=6, heads=8, dim=192),
    "dpit-d16": ModelConfig(name="dpit-d16", depth=16, heads=8, dim=192),
    "dpit-mpii": ModelConfig(name="dpit-mpii", num_keypoints=16, td_input=(256, 256), td_patch=(4, 4), depth=6),
    "dpit-tiny": ModelConfig(
        name="dpit-tiny",
        bu_input=(128, 128),
        td_input=(96, 72),
        bu_widths=(8, 16, 16),
        td_widths=(16, 16),
        channels=16,
        bu_patch=(4, 4),
        td_patch=(3, 3),
        dim=64,
        depth=2,
        heads=4,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


@dataclass
class ForwardOutput:
    heatmap: Heatmap
    sequence: TokenSequence
    attention: list = field(default_factory=list)


class DPIT:
    """Parameters live in ``self.params`` (name -> Tensor), in a fixed order."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        D = cfg.dim
        p: dict[str, Tensor] = {}
        p.update(init_backbone(cfg.bu_backbone, rng, "bu", dtype))
        p.update(init_backbone(cfg.td_backbone, rng, "td", dtype))

        def lecun(n_in, n_out):
            return Tensor(rng.normal(0, 1.0 / np.sqrt(n_in), (n_in, n_out)).astype(dtype), requires_grad=True)

        def small(*shape):
            return Tensor(rng.normal(0, 0.02, shape).astype(dtype), requires_grad=True)

        p["tok.bu_proj"] = lecun(cfg.bu_grid.patch_dim, D)
        p["tok.td_proj"] = lecun(cfg.td_grid.patch_dim, D)
        p["tok.bu_branch"] = small(D)
        p["tok.td_branch"] = small(D)
        p["tok.kpt"] = make_keypoint_queries(cfg.num_keypoints, D, seed=int(rng.integers(2**31)), dtype=dtype)
        for i in range(cfg.depth):
            p.update(EncoderLayerWeights.init(cfg.encoder, rng, dtype).named(f"enc.{i}"))
        p["head.ln_g"] = Tensor(np.ones(D, dtype=dtype), requires_grad=True)
        p["head.ln_b"] = Tensor(np.zeros(D, dtype=dtype), requires_grad=True)
        g = cfg.heatmap_geometry
        p["head.w"] = small(D, g.height * g.width)
        p["head.b"] = Tensor(np.zeros(g.height * g.width, dtype=dtype), requires_grad=True)
        self.params = p
        bg, tg = cfg.bu_grid, cfg.td_grid
        self.bu_pos = PositionalTable(bg.rows, bg.cols, D)
        self.td_pos = PositionalTable(tg.rows, tg.cols, D)

    # ------------------------------------------------------------------ params

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def layers(self) -> list[EncoderLayerWeights]:
        return [EncoderLayerWeights.from_named(self.params, f"enc.{i}") for i in range(self.cfg.depth)]

    def astype(self, dtype) -> "DPIT":
        m = DPIT.__new__(DPIT)
        m.cfg, m.dtype = self.cfg, np.dtype(dtype)
        m.params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        m.bu_pos, m.td_pos = self.bu_pos, self.td_pos
        return m

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=self.dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # ------------------------------------------------------------------ forward

    def bu_tokens(self, bu_images: np.ndarray) -> Tensor:
        p = self.params
        x = Tensor(np.asarray(bu_images, dtype=self.dtype))
        feat = run_backbone(x, p, self.cfg.bu_backbone, "bu")
        return embed_tokens(split_patches(feat, self.cfg.bu_grid), p["tok.bu_proj"], self.bu_pos, p["tok.bu_branch"])

    def td_tokens(self, crops: np.ndarray) -> Tensor:
        p = self.params
        x = Tensor(np.asarray(crops, dtype=self.dtype))
        feat = run_backbone(x, p, self.cfg.td_backbone, "td")
        return embed_tokens(split_patches(feat, self.cfg.td_grid), p["tok.td_proj"], self.td_pos, p["tok.td_branch"])

    def forward(
        self,
        bu_images: np.ndarray | None,
        crops: np.ndarray,
        image_index=None,
        mask_bu: bool = False,
        probe: bool = False,
        rng: np.random.Generator | None = None,
    ) -> ForwardOutput:
        """Run the network on a batch of person crops.

        ``bu_images``: [I, H1, W1, 3], one per distinct source image; ``crops``:
        [B, H2, W2, 3]; ``image_index[b]`` selects the source image of crop b so
        BU tokens are computed once per image. ``mask_bu`` zeroes the BU tokens.
        """
        cfg = self.cfg
        crops = np.asarray(crops)
        B = crops.shape[0]
        td = self.td_tokens(crops)
        bu = None
        if cfg.use_bu:
            if bu_images is None:
                raise ConfigError("model uses the BU branch but no full images were given")
            bu_all = self.bu_tokens(bu_images)
            idx = np.zeros(B, dtype=np.intp) if image_index is None else np.asarray(image_index, dtype=np.intp)
            bu = T.take(bu_all, idx, axis=0)
            if mask_bu:
                bu = Tensor(np.zeros(bu.shape, dtype=self.dtype))
        seq = assemble(self.params["tok.kpt"], bu, td)
        attn: list = [] if probe else None
        out = encode(seq, self.layers(), cfg.encoder, probe=attn, rng=rng)
        kpt = out.keypoint_rows()
        p = self.params
        kpt = T.layer_norm(kpt, p["head.ln_g"], p["head.ln_b"], LN_EPS)
        hm = project_keypoints(kpt, p["head.w"], cfg.heatmap_geometry, p["head.b"])
        return ForwardOutput(hm, out, attn or [])

    def loss(self, batch, rng: np.random.Generator | None = None) -> Tensor:
        out = self.forward(batch.bu_images, batch.crops, batch.image_index, rng=rng)
        return mse_loss(out.heatmap, Heatmap(batch.targets, out.heatmap.geometry), batch.target_vis)
