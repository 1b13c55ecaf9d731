"""Pre-norm transformer encoder: x + MSA(LN(x)), then + FFN(LN(.)), unmasked attention."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .backbones import ConfigError
from .tensor import DimensionError, Tensor
from .tokenizer import TokenSequence

LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    heads: int = 8
    dim: int = 192
    ffn_mult: int = 3
    dropout: float = 0.0

    def __post_init__(self):
        if self.depth < 0 or self.heads <= 0 or self.dim <= 0 or self.ffn_mult <= 0:
            raise ConfigError(f"invalid encoder config {self}")
        if self.dim % self.heads:
            raise ConfigError(f"D={self.dim} not divisible by heads={self.heads}")

    @property
    def d_k(self) -> int:
        return self.dim // self.heads


@dataclass
class EncoderLayerWeights:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32, std: float = 0.02):
        D, F = cfg.dim, cfg.dim * cfg.ffn_mult

        def normal(*shape):
            return Tensor(rng.normal(0.0, std, shape).astype(dtype), requires_grad=True)

        def const(v, n):
            return Tensor(np.full(n, v, dtype=dtype), requires_grad=True)

        return cls(
            ln1_g=const(1.0, D), ln1_b=const(0.0, D),
            wq=normal(D, D), wk=normal(D, D), wv=normal(D, D),
            wo=normal(D, D), bo=const(0.0, D),
            ln2_g=const(1.0, D), ln2_b=const(0.0, D),
            w1=normal(D, F), b1=const(0.0, F),
            w2=normal(F, D), b2=const(0.0, D),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_named(cls, params: dict[str, Tensor], prefix: str) -> "EncoderLayerWeights":
        return cls(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(cls)})

    def check(self, cfg: EncoderConfig) -> None:
        D, F = cfg.dim, cfg.dim * cfg.ffn_mult
        want = {"wq": (D, D), "wk": (D, D), "wv": (D, D), "wo": (D, D), "w1": (D, F), "w2": (F, D)}
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")


def attention(Q: Tensor, K: Tensor, V: Tensor, probe: list | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes; no mask."""
    d_k = Q.shape[-1]
    if K.shape[-1] != d_k:
        raise DimensionError(f"query dim {Q.shape} and key dim {K.shape} differ")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    axes = tuple(range(K.ndim - 2)) + (K.ndim - 1, K.ndim - 2)
    scores = T.matmul(Q, T.transpose(K, axes)) * (1.0 / math.sqrt(d_k))
    probs = T.softmax(scores, axis=-1)
    if probe is not None:
        probe.append(probs.data)
    return T.matmul(probs, V)


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def msa(x: Tensor, w: EncoderLayerWeights, cfg: EncoderConfig, probe: list | None = None) -> Tensor:
    """Multi-head self-attention over x: [L, D] or [B, L, D]."""
    batched = x.ndim == 3
    h = x if batched else T.reshape(x, (1,) + x.shape)
    B, L, D = h.shape
    H, dk = cfg.heads, cfg.d_k

    def heads(t):
        return T.transpose(T.reshape(t, (B, L, H, dk)), (0, 2, 1, 3))

    q, k, v = heads(h @ w.wq), heads(h @ w.wk), heads(h @ w.wv)
    o = attention(q, k, v, probe)
    o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, L, D))
    out = o @ w.wo + w.bo
    return out if batched else T.reshape(out, (L, D))


def ffn(x: Tensor, w: EncoderLayerWeights) -> Tensor:
    return T.gelu(x @ w.w1 + w.b1) @ w.w2 + w.b2


def _tokens(x):
    return (x.tokens, x.segments) if isinstance(x, TokenSequence) else (x, None)


def encoder_layer(x, w: EncoderLayerWeights, cfg: EncoderConfig, probe: list | None = None,
                  rng: np.random.Generator | None = None):
    tok, seg = _tokens(x)
    if tok.shape[-1] != cfg.dim:
        raise DimensionError(f"token dim {tok.shape[-1]} != D={cfg.dim}")
    h = tok + _dropout(msa(T.layer_norm(tok, w.ln1_g, w.ln1_b, LN_EPS), w, cfg, probe), cfg.dropout, rng)
    h = h + _dropout(ffn(T.layer_norm(h, w.ln2_g, w.ln2_b, LN_EPS), w), cfg.dropout, rng)
    return TokenSequence(h, seg) if seg is not None else h


def encode(x, layers: list[EncoderLayerWeights], cfg: EncoderConfig, probe: list | None = None,
           rng: np.random.Generator | None = None):
    if len(layers) != cfg.depth:
        raise ConfigError(f"{len(layers)} layers supplied for depth {cfg.depth}")
    for w in layers:
        x = encoder_layer(x, w, cfg, probe, rng)
    return x
