"""Composite layers: patch embedding, feed-forward layer, transformer block.

The feed-forward layer is linear -> depthwise 3x3 -> GELU -> linear and
preserves shape. The transformer block wires attention and the feed-forward
layer with pre-norm residuals; zeroing every learned weight reduces the whole
block to the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import attention as attn
from . import numerics as nm
from .attention import AttentionConfig, AttentionWeights
from .errors import ConfigError, DimensionError
from .numerics import Tensor

DW_KERNEL = 3


@dataclass
class FflWeights:
    w1: Tensor          # c -> e*c
    b1: Tensor
    dw: Tensor          # [3, 3, e*c]
    dwb: Tensor
    w2: Tensor          # e*c -> c
    b2: Tensor

    def named_parameters(self, prefix: str = ""):
        for name in ("w1", "b1", "dw", "dwb", "w2", "b2"):
            yield prefix + name, getattr(self, name)


@dataclass
class EftBlockWeights:
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    attn: AttentionWeights
    ffl: FflWeights

    def named_parameters(self, prefix: str = ""):
        for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            yield prefix + name, getattr(self, name)
        yield from self.attn.named_parameters(prefix + "attn.")
        yield from self.ffl.named_parameters(prefix + "ffl.")


@dataclass
class PatchEmbedWeights:
    kernel: Tensor      # [kh, kw, cin, cout]
    bias: Tensor
    ln_g: Tensor
    ln_b: Tensor
    stride: int
    pad: int

    def named_parameters(self, prefix: str = ""):
        for name in ("kernel", "bias", "ln_g", "ln_b"):
            yield prefix + name, getattr(self, name)


def _param(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_ffl_weights(c: int, expansion: int, rng: np.random.Generator, dtype=np.float32) -> FflWeights:
    e = expansion * c
    return FflWeights(
        w1=_param(rng, (c, e), np.sqrt(2.0 / (c + e)), dtype),
        b1=_zeros(e, dtype),
        dw=_param(rng, (DW_KERNEL, DW_KERNEL, e), np.sqrt(1.0 / (DW_KERNEL * DW_KERNEL)), dtype),
        dwb=_zeros(e, dtype),
        w2=_param(rng, (e, c), np.sqrt(2.0 / (c + e)), dtype),
        b2=_zeros(c, dtype),
    )


def init_eft_block_weights(cfg: AttentionConfig, expansion: int, rng: np.random.Generator,
                           dtype=np.float32) -> EftBlockWeights:
    c = cfg.channels
    return EftBlockWeights(
        ln1_g=_ones(c, dtype), ln1_b=_zeros(c, dtype),
        ln2_g=_ones(c, dtype), ln2_b=_zeros(c, dtype),
        attn=attn.init_attention_weights(cfg, rng, dtype),
        ffl=init_ffl_weights(c, expansion, rng, dtype),
    )


def init_patch_embed_weights(cin: int, cout: int, kernel: int, stride: int, pad: int,
                             rng: np.random.Generator, dtype=np.float32) -> PatchEmbedWeights:
    fan_in = kernel * kernel * cin
    fan_out = kernel * kernel * cout
    return PatchEmbedWeights(
        kernel=_param(rng, (kernel, kernel, cin, cout), np.sqrt(2.0 / (fan_in + fan_out)), dtype),
        bias=_zeros(cout, dtype),
        ln_g=_ones(cout, dtype),
        ln_b=_zeros(cout, dtype),
        stride=stride,
        pad=pad,
    )


def ffl_forward(x: Tensor, w: FflWeights) -> Tensor:
    """linear -> depthwise 3x3 (same pad) -> GELU -> linear, shape preserving."""
    if x.ndim != 4:
        raise DimensionError(f"ffl_forward expects [b,h,w,c], got {x.shape}")
    b, h, wd, c = x.shape
    if w.w1.shape[0] != c:
        raise DimensionError(f"ffl input channels {c} do not match weights {w.w1.shape}")
    e = w.w1.shape[1]
    tokens = nm.reshape(x, (b, h * wd, c))
    hidden = nm.add(nm.matmul(tokens, w.w1), w.b1)
    grid = nm.reshape(hidden, (b, h, wd, e))
    grid = nm.add(nm.depthwise_conv2d(grid, w.dw), w.dwb)
    grid = nm.gelu(grid)
    tokens = nm.reshape(grid, (b, h * wd, e))
    tokens = nm.add(nm.matmul(tokens, w.w2), w.b2)
    return nm.reshape(tokens, (b, h, wd, c))


def eft_block_forward(x: Tensor, cfg: AttentionConfig, w: EftBlockWeights, r_effective: int) -> Tensor:
    """Pre-norm residual block: attention then feed-forward."""
    z = nm.add(attn.forward(nm.layer_norm(x, w.ln1_g, w.ln1_b), cfg, w.attn, r_effective), x)
    return nm.add(ffl_forward(nm.layer_norm(z, w.ln2_g, w.ln2_b), w.ffl), z)


def patch_embed_forward(x: Tensor, w: PatchEmbedWeights) -> Tensor:
    """Strided overlapping convolution, bias, then layer norm over channels."""
    if x.ndim != 4:
        raise DimensionError(f"patch_embed_forward expects [b,h,w,c], got {x.shape}")
    kh = w.kernel.shape[0]
    if x.shape[1] + 2 * w.pad < kh or x.shape[2] + 2 * w.pad < kh:
        raise ConfigError(
            f"input {x.shape[1]}x{x.shape[2]} smaller than patch kernel {kh} (pad {w.pad})"
        )
    out = nm.conv2d(x, w.kernel, stride=w.stride, pad=w.pad)
    out = nm.add(out, w.bias)
    return nm.layer_norm(out, w.ln_g, w.ln_b)
