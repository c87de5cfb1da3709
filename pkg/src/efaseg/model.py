"""Four-stage encoder, all-attention decoder, and checkpoint container.

Encoder stage i downsamples to 1/2^(i+1) of the input resolution (stride-4
patch embedding, then stride-2 ones) and runs its transformer blocks at that
stage's key/value reduction ratio. The decoder feeds encoder features F4, F3,
F2 through 3/2/1 blocks respectively, upsamples everything to the F2
resolution, concatenates, and fuses with two linear layers into the class
mask. F1 is produced but never consumed by the decoder.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict, replace
from typing import Optional

import numpy as np

from . import blocks as blk
from . import numerics as nm
from .attention import AttentionConfig
from .blocks import EftBlockWeights, PatchEmbedWeights
from .errors import ConfigError, DimensionError
from .isr import ReductionSchedule, effective_ratios
from .numerics import Tensor

IMG_CHANNELS = 3
MIN_INPUT = 32

# decoder stage j consumes encoder feature F_i: (j, i) in (1,4), (2,3), (3,2)
DECODER_SOURCES = (4, 3, 2)


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    stage_depths: tuple = (2, 2, 2, 2)
    stage_heads: tuple = (1, 2, 4, 8)
    decoder_depths: tuple = (3, 2, 1)
    num_classes: int = 3
    fusion_channels: int = 128
    expansion: int = 4
    variant: str = "embedding_free"
    pooling: str = "average"
    sr_projection: bool = False
    bias_free_projections: bool = True

    def __post_init__(self):
        for name, n in (("stage_channels", 4), ("stage_depths", 4), ("stage_heads", 4),
                        ("decoder_depths", 3)):
            v = getattr(self, name)
            if len(v) != n or any(int(e) < 0 for e in v):
                raise ConfigError(f"{name} must be {n} non-negative integers, got {v}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for c, h in zip(self.stage_channels, self.stage_heads):
            if h >= 1 and c % h != 0:
                raise ConfigError(f"stage heads {h} must divide channels {c}")
        if self.expansion < 1 or self.fusion_channels < 1:
            raise ConfigError("expansion and fusion_channels must be positive")

    def attention_config(self, stage: int, train_ratio: int = 1) -> AttentionConfig:
        """Attention settings for encoder stage 1..4 (decoder stages reuse their source's)."""
        return AttentionConfig(
            channels=self.stage_channels[stage - 1],
            heads=self.stage_heads[stage - 1],
            train_ratio=train_ratio,
            variant=self.variant,
            pooling=self.pooling,
            sr_projection=self.sr_projection,
            bias_free_projections=self.bias_free_projections,
        )


def nano_config(num_classes: int = 3, **overrides) -> ModelConfig:
    return ModelConfig(num_classes=num_classes, **overrides)


def micro_config(num_classes: int = 3, **overrides) -> ModelConfig:
    return ModelConfig(stage_channels=(32, 64, 128, 256), num_classes=num_classes, **overrides)


# patch embedding geometry: stage 1 maps H -> H/4, later stages halve
PATCH_SPECS = ((7, 4, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1))


@dataclass
class StageWeights:
    patch: PatchEmbedWeights
    blocks: list

    def named_parameters(self, prefix: str = ""):
        yield from self.patch.named_parameters(prefix + "patch.")
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(f"{prefix}b{i}.")


@dataclass
class DecoderStageWeights:
    ln_g: Tensor
    ln_b: Tensor
    blocks: list

    def named_parameters(self, prefix: str = ""):
        yield prefix + "ln_g", self.ln_g
        yield prefix + "ln_b", self.ln_b
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(f"{prefix}b{i}.")


@dataclass
class FusionWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self, prefix: str = ""):
        for name in ("w1", "b1", "w2", "b2"):
            yield prefix + name, getattr(self, name)


@dataclass
class ModelWeights:
    stages: list
    decoder: list
    fusion: FusionWeights

    def named_parameters(self):
        for i, s in enumerate(self.stages, start=1):
            yield from s.named_parameters(f"enc.s{i}.")
        for j, d in enumerate(self.decoder, start=1):
            yield from d.named_parameters(f"dec.s{j}.")
        yield from self.fusion.named_parameters("fusion.")

    def parameters(self):
        for _, t in self.named_parameters():
            yield t


def init_model_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelWeights:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    stages = []
    cin = IMG_CHANNELS
    for i in range(4):
        c = cfg.stage_channels[i]
        k, s, p = PATCH_SPECS[i]
        patch = blk.init_patch_embed_weights(cin, c, k, s, p, rng, dtype)
        acfg = cfg.attention_config(i + 1)
        blocks = [blk.init_eft_block_weights(acfg, cfg.expansion, rng, dtype)
                  for _ in range(cfg.stage_depths[i])]
        stages.append(StageWeights(patch=patch, blocks=blocks))
        cin = c
    decoder = []
    for j in range(3):
        src = DECODER_SOURCES[j]
        c = cfg.stage_channels[src - 1]
        acfg = cfg.attention_config(src)
        blocks = [blk.init_eft_block_weights(acfg, cfg.expansion, rng, dtype)
                  for _ in range(cfg.decoder_depths[j])]
        decoder.append(DecoderStageWeights(
            ln_g=blk._ones(c, dtype), ln_b=blk._zeros(c, dtype), blocks=blocks))
    csum = sum(cfg.stage_channels[s - 1] for s in DECODER_SOURCES)
    fusion = FusionWeights(
        w1=blk._param(rng, (csum, cfg.fusion_channels),
                      np.sqrt(2.0 / (csum + cfg.fusion_channels)), dtype),
        b1=blk._zeros(cfg.fusion_channels, dtype),
        w2=blk._param(rng, (cfg.fusion_channels, cfg.num_classes),
                      np.sqrt(2.0 / (cfg.fusion_channels + cfg.num_classes)), dtype),
        b2=blk._zeros(cfg.num_classes, dtype),
    )
    return ModelWeights(stages=stages, decoder=decoder, fusion=fusion)


def count_parameters(weights: ModelWeights) -> int:
    """Exact number of learned scalars."""
    return sum(t.size for _, t in weights.named_parameters())


def _check_input(img: Tensor):
    if img.ndim != 4 or img.shape[3] != IMG_CHANNELS:
        raise DimensionError(f"expected [b,H,W,{IMG_CHANNELS}] input, got {img.shape}")
    h, w = img.shape[1], img.shape[2]
    if h < MIN_INPUT or w < MIN_INPUT or h % MIN_INPUT or w % MIN_INPUT:
        raise ConfigError(f"input extents must be multiples of {MIN_INPUT}, got {h}x{w}")


def encoder_forward(img: Tensor, cfg: ModelConfig, weights: ModelWeights, enc_ratios):
    """Run the four stages; returns (F1, F2, F3, F4)."""
    _check_input(img)
    feats = []
    x = img
    for i in range(4):
        stage = weights.stages[i]
        x = blk.patch_embed_forward(x, stage.patch)
        acfg = cfg.attention_config(i + 1)
        for bw in stage.blocks:
            x = blk.eft_block_forward(x, acfg, bw, int(enc_ratios[i]))
        feats.append(x)
    return tuple(feats)


def _decoder_stage(feat: Tensor, cfg: ModelConfig, dw: DecoderStageWeights,
                   src_stage: int, ratio: int) -> Tensor:
    # outer pre-norm + residual wrap around the whole block stack
    x = nm.layer_norm(feat, dw.ln_g, dw.ln_b)
    acfg = cfg.attention_config(src_stage)
    for bw in dw.blocks:
        x = blk.eft_block_forward(x, acfg, bw, ratio)
    return nm.add(x, feat)


def decoder_forward(f2: Tensor, f3: Tensor, f4: Tensor, cfg: ModelConfig,
                    weights: ModelWeights, dec_ratios, return_features: bool = False):
    """All-attention decoder; output mask lives at the F2 resolution."""
    sources = {4: f4, 3: f3, 2: f2}
    out_h, out_w = f2.shape[1], f2.shape[2]
    upsampled = []
    for j in range(3):
        src = DECODER_SOURCES[j]
        feat = sources[src]
        if feat.shape[3] != cfg.stage_channels[src - 1]:
            raise DimensionError(
                f"decoder stage {j + 1} expected {cfg.stage_channels[src - 1]} channels, "
                f"got {feat.shape[3]}")
        refined = _decoder_stage(feat, cfg, weights.decoder[j], src, int(dec_ratios[j]))
        upsampled.append(nm.bilinear_upsample(refined, out_h, out_w))
    fused = nm.concat_lastdim(upsampled)
    if return_features:
        return fused
    b = fused.shape[0]
    tokens = nm.reshape(fused, (b, out_h * out_w, fused.shape[3]))
    hidden = nm.gelu(nm.add(nm.matmul(tokens, weights.fusion.w1), weights.fusion.b1))
    mask = nm.add(nm.matmul(hidden, weights.fusion.w2), weights.fusion.b2)
    return nm.reshape(mask, (b, out_h, out_w, cfg.num_classes))


def model_forward(img: Tensor, cfg: ModelConfig, weights: ModelWeights,
                  schedule: ReductionSchedule, phase: str = "train") -> Tensor:
    """Full network; per-pixel class logits at the input resolution."""
    enc_r, dec_r = effective_ratios(schedule, phase)
    _, f2, f3, f4 = encoder_forward(img, cfg, weights, enc_r)
    mask = decoder_forward(f2, f3, f4, cfg, weights, dec_r)
    return nm.bilinear_upsample(mask, img.shape[1], img.shape[2])


def decoder_features(img: Tensor, cfg: ModelConfig, weights: ModelWeights,
                     schedule: ReductionSchedule, phase: str = "inference") -> Tensor:
    """Concatenated upsampled decoder features (the fusion input)."""
    enc_r, dec_r = effective_ratios(schedule, phase)
    _, f2, f3, f4 = encoder_forward(img, cfg, weights, enc_r)
    return decoder_forward(f2, f3, f4, cfg, weights, dec_r, return_features=True)


# ---------------------------------------------------------------------------
# checkpoints: JSON header (canonical, sorted keys) + tensor blobs with a
# name -> offset manifest.

_CKPT_MAGIC = b"EFC1"


@dataclass
class Checkpoint:
    config: ModelConfig
    schedule: ReductionSchedule
    weights: ModelWeights
    step: int = 0
    seed: int = 0
    rng_state: Optional[dict] = None
    opt_state: Optional[dict] = None   # name -> {"m": ndarray, "v": ndarray}
    extra: dict = field(default_factory=dict)


def _config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    for k in ("stage_channels", "stage_depths", "stage_heads", "decoder_depths"):
        d[k] = list(d[k])
    return d


def _config_from_dict(d: dict) -> ModelConfig:
    kw = dict(d)
    for k in ("stage_channels", "stage_depths", "stage_heads", "decoder_depths"):
        kw[k] = tuple(kw[k])
    return ModelConfig(**kw)


def save_checkpoint(path, ckpt: Checkpoint):
    blobs = io.BytesIO()
    manifest = {}
    entries = list(ckpt.weights.named_parameters())
    if ckpt.opt_state:
        for name, mv in ckpt.opt_state.items():
            entries.append((f"opt.m.{name}", Tensor(mv["m"])))
            entries.append((f"opt.v.{name}", Tensor(mv["v"])))
    for name, t in entries:
        manifest[name] = blobs.tell()
        nm.write_tensor(blobs, t.data)
    header = {
        "config": _config_to_dict(ckpt.config),
        "schedule": {
            "enc_ratios": list(ckpt.schedule.enc_ratios),
            "dec_ratios": list(ckpt.schedule.dec_ratios),
            "enc_mults": list(ckpt.schedule.enc_mults),
            "dec_mults": list(ckpt.schedule.dec_mults),
        },
        "step": ckpt.step,
        "seed": ckpt.seed,
        "rng_state": ckpt.rng_state,
        "manifest": manifest,
        "extra": ckpt.extra,
    }
    htext = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(len(htext).to_bytes(8, "little"))
        f.write(htext)
        f.write(blobs.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode())
        blob_start = f.tell()
        cfg = _config_from_dict(header["config"])
        sd = header["schedule"]
        schedule = ReductionSchedule(
            enc_ratios=tuple(sd["enc_ratios"]), dec_ratios=tuple(sd["dec_ratios"]),
            enc_mults=tuple(sd["enc_mults"]), dec_mults=tuple(sd["dec_mults"]))
        weights = init_model_weights(cfg, seed=0)
        arrays = {}
        for name, off in header["manifest"].items():
            f.seek(blob_start + off)
            arrays[name] = nm.read_tensor(f)
        for name, t in weights.named_parameters():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing weight {name!r}")
            if arrays[name].shape != t.shape:
                raise ConfigError(
                    f"checkpoint weight {name!r} has shape {arrays[name].shape}, "
                    f"expected {t.shape}")
            t.data = arrays[name]
        opt_state = {}
        for name in arrays:
            if name.startswith("opt.m."):
                base = name[len("opt.m."):]
                opt_state[base] = {"m": arrays[name], "v": arrays[f"opt.v.{base}"]}
        return Checkpoint(
            config=cfg, schedule=schedule, weights=weights,
            step=int(header["step"]), seed=int(header["seed"]),
            rng_state=header.get("rng_state"),
            opt_state=opt_state or None,
            extra=header.get("extra", {}),
        )


def checkpoint_digest(ckpt: Checkpoint) -> str:
    """Stable digest over every weight byte; used by no-mutation guards."""
    import hashlib

    h = hashlib.sha256()
    for name, t in ckpt.weights.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
