"""Embedding-free attention, the embedded baseline, and key/value reducers.

The embedding-free operator uses the input tokens directly as queries and a
spatially pooled copy as keys and values; only the output projection carries
parameters. The embedded variant adds the conventional query/key/value
projections and exists for ablations. Reducing the key/value resolution never
changes the output shape, which is what makes the inference-time ratio swap
legal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError
from .numerics import Tensor

POOLINGS = ("average", "max", "overlapped")
VARIANTS = ("embedding_free", "embedded")


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    heads: int
    train_ratio: int = 1
    variant: str = "embedding_free"
    pooling: str = "average"
    sr_projection: bool = False
    bias_free_projections: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1:
            raise ConfigError(f"channels/heads must be positive, got {self.channels}/{self.heads}")
        if self.channels % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide channels ({self.channels})")
        if self.train_ratio < 1:
            raise ConfigError(f"train_ratio must be >= 1, got {self.train_ratio}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass
class AttentionWeights:
    """Learned tensors for one attention layer.

    The embedding-free variant stores no query/key/value projections; their
    absence is the mechanism. The optional reduced-token projection is a
    c -> c linear followed by a parameter-free normalization.
    """

    wo: Tensor
    bo: Optional[Tensor] = None
    wq: Optional[Tensor] = None
    wk: Optional[Tensor] = None
    wv: Optional[Tensor] = None
    bq: Optional[Tensor] = None
    bk: Optional[Tensor] = None
    bv: Optional[Tensor] = None
    w_sr: Optional[Tensor] = None
    b_sr: Optional[Tensor] = None

    def named_parameters(self, prefix: str = ""):
        for name in ("wo", "bo", "wq", "wk", "wv", "bq", "bk", "bv", "w_sr", "b_sr"):
            t = getattr(self, name)
            if t is not None:
                yield prefix + name, t


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype):
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def init_attention_weights(cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float32) -> AttentionWeights:
    c = cfg.channels
    biased = not cfg.bias_free_projections

    def bias():
        return Tensor(np.zeros(c, dtype=dtype), requires_grad=True) if biased else None

    w = AttentionWeights(wo=_glorot(rng, c, c, (c, c), dtype), bo=bias())
    if cfg.variant == "embedded":
        w.wq = _glorot(rng, c, c, (c, c), dtype)
        w.wk = _glorot(rng, c, c, (c, c), dtype)
        w.wv = _glorot(rng, c, c, (c, c), dtype)
        w.bq, w.bk, w.bv = bias(), bias(), bias()
    if cfg.sr_projection:
        w.w_sr = _glorot(rng, c, c, (c, c), dtype)
        w.b_sr = bias()
    return w


def _pool(x: Tensor, r: int, pooling: str) -> Tensor:
    if pooling == "average":
        return nm.avg_pool2d(x, r)
    if pooling == "max":
        return nm.max_pool2d(x, r)
    if pooling == "overlapped":
        return nm.overlapped_avg_pool2d(x, r)
    raise ConfigError(f"unknown pooling {pooling!r}")


def spatial_reduce(
    x: Tensor,
    r: int,
    pooling: str = "average",
    sr_projection: bool = False,
    weights: Optional[AttentionWeights] = None,
) -> Tensor:
    """Pool [b,h,w,c] down by ratio r; optionally project + normalize the tokens."""
    if r < 1:
        raise ConfigError(f"reduction ratio must be >= 1, got {r}")
    out = _pool(x, r, pooling) if r > 1 or pooling == "overlapped" else x
    if sr_projection:
        if weights is None or weights.w_sr is None:
            raise ConfigError("sr_projection requested but no projection weights present")
        b, h, w, c = out.shape
        tokens = nm.reshape(out, (b, h * w, c))
        tokens = nm.matmul(tokens, weights.w_sr)
        if weights.b_sr is not None:
            tokens = nm.add(tokens, weights.b_sr)
        tokens = nm.normalize_lastdim(tokens)
        out = nm.reshape(tokens, (b, h, w, c))
    return out


def _linear(tokens: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    out = nm.matmul(tokens, w)
    return nm.add(out, b) if b is not None else out


def _split_heads(tokens: Tensor, heads: int) -> Tensor:
    b, n, c = tokens.shape
    dk = c // heads
    t = nm.reshape(tokens, (b, n, heads, dk))
    t = nm.transpose(t, (0, 2, 1, 3))
    return nm.reshape(t, (b * heads, n, dk))


def _merge_heads(t: Tensor, b: int, heads: int) -> Tensor:
    bh, n, dk = t.shape
    t = nm.reshape(t, (b, heads, n, dk))
    t = nm.transpose(t, (0, 2, 1, 3))
    return nm.reshape(t, (b, n, heads * dk))


def _attention_core(q_tokens: Tensor, kv_q: Tensor, kv_v: Tensor, cfg: AttentionConfig,
                    return_map: bool = False):
    """Scaled dot-product over heads. q_tokens [b,n,c]; kv_* [b,m,c]."""
    b, n, c = q_tokens.shape
    q = _split_heads(q_tokens, cfg.heads)
    k = _split_heads(kv_q, cfg.heads)
    v = _split_heads(kv_v, cfg.heads)
    logits = nm.matmul(q, nm.transpose(k, (0, 2, 1)))
    logits = nm.scale(logits, 1.0 / math.sqrt(cfg.head_dim))
    att = nm.softmax_lastdim(logits)
    if return_map:
        m = kv_q.shape[1]
        return nm.reshape(att, (b, cfg.heads, n, m))
    out = nm.matmul(att, v)
    return _merge_heads(out, b, cfg.heads)


def _forward(x: Tensor, cfg: AttentionConfig, w: AttentionWeights, r_effective: int,
             embedded: bool, return_map: bool = False):
    if x.ndim != 4:
        raise DimensionError(f"attention expects [b,h,w,c], got {x.shape}")
    b, h, wd, c = x.shape
    if c != cfg.channels:
        raise DimensionError(f"input has {c} channels, config expects {cfg.channels}")
    if r_effective < 1:
        raise ConfigError(f"effective ratio must be >= 1, got {r_effective}")

    tokens = nm.reshape(x, (b, h * wd, c))
    reduced = spatial_reduce(x, r_effective, cfg.pooling, cfg.sr_projection, w)
    rb, rh, rw, _ = reduced.shape
    kv = nm.reshape(reduced, (rb, rh * rw, c))

    if embedded:
        q_tok = _linear(tokens, w.wq, w.bq)
        k_tok = _linear(kv, w.wk, w.bk)
        v_tok = _linear(kv, w.wv, w.bv)
    else:
        q_tok, k_tok, v_tok = tokens, kv, kv

    if return_map:
        return _attention_core(q_tok, k_tok, v_tok, cfg, return_map=True)

    out = _attention_core(q_tok, k_tok, v_tok, cfg)
    out = _linear(out, w.wo, w.bo)
    return nm.reshape(out, (b, h, wd, c))


def efa_forward(x: Tensor, cfg: AttentionConfig, w: AttentionWeights, r_effective: int) -> Tensor:
    """Embedding-free attention: query is the input, key/value its pooled copy."""
    return _forward(x, cfg, w, r_effective, embedded=False)


def embedded_sra_forward(x: Tensor, cfg: AttentionConfig, w: AttentionWeights, r_effective: int) -> Tensor:
    """Conventional spatial-reduction attention with learned q/k/v projections."""
    if w.wq is None or w.wk is None or w.wv is None:
        raise ConfigError("embedded attention requires wq/wk/wv weights")
    return _forward(x, cfg, w, r_effective, embedded=True)


def attention_map(x: Tensor, cfg: AttentionConfig, w: AttentionWeights, r_effective: int) -> Tensor:
    """Post-softmax attention, [b, heads, queries, reduced keys]; rows sum to 1."""
    embedded = cfg.variant == "embedded"
    return _forward(x, cfg, w, r_effective, embedded=embedded, return_map=True)


def forward(x: Tensor, cfg: AttentionConfig, w: AttentionWeights, r_effective: int) -> Tensor:
    """Dispatch on the configured operator variant."""
    if cfg.variant == "embedded":
        return embedded_sra_forward(x, cfg, w, r_effective)
    return efa_forward(x, cfg, w, r_effective)
