"""Synthetic segmentation data, training, evaluation, and ISR experiments.

Scenes are procedurally generated: a textured background (class 0) plus one
to four axis-aligned rectangles and circles carrying the remaining classes,
each with a distinct mean color plus noise. Every scene regenerates
pixel-exactly from its seed, so datasets are reproducible byte for byte.

Training is plain pixel-wise cross-entropy with a decoupled-weight-decay
adaptive-moment optimizer, linear warmup and cosine decay. Everything is
deterministic given the seed; resuming from a checkpoint reproduces the
uninterrupted run bit for bit.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nm
from .errors import ConfigError, NumericError, UsageError
from .isr import ReductionSchedule, effective_ratios, schedule_text
from .model import (Checkpoint, ModelConfig, ModelWeights, checkpoint_digest,
                    decoder_features, init_model_weights, model_forward)
from .numerics import Tensor

IGNORE_INDEX = 255


def worker_count(n_items: int) -> int:
    """Worker cap from EFASEG_THREADS (defaults to serial)."""
    raw = os.environ.get("EFASEG_THREADS", "1")
    try:
        cap = max(1, int(raw))
    except ValueError:
        cap = 1
    return max(1, min(cap, n_items))


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticScene:
    image: np.ndarray    # [H, W, 3] float32 in [0, 1]
    label: np.ndarray    # [H, W] int32 class ids
    seed: int


def class_palette(num_classes: int) -> np.ndarray:
    """Distinct, saturated mean color per foreground class; class 0 unused."""
    colors = [np.array([0.16, 0.17, 0.20])]
    for k in range(1, num_classes):
        hue = (k - 1) / max(1, num_classes - 1)
        colors.append(np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.9)))
    return np.stack(colors).astype(np.float64)


def generate_scene(height: int, width: int, num_classes: int, seed: int) -> SyntheticScene:
    if height < 1 or width < 1:
        raise ConfigError(f"scene extents must be positive, got {height}x{width}")
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    palette = class_palette(num_classes)

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(0.06, 0.28, size=3)
    fy, fx = rng.uniform(1.0, 4.0, size=2) * 2 * math.pi
    phase = rng.uniform(0, 2 * math.pi)
    amp = rng.uniform(0.02, 0.05)
    texture = amp * np.sin(fy * ys / height + fx * xs / width + phase)
    image = base[None, None, :] + texture[:, :, None]
    label = np.zeros((height, width), dtype=np.int32)

    extent = min(height, width)
    n_shapes = int(rng.integers(1, 5))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, num_classes))
        color = palette[cls] + rng.normal(0.0, 0.04, size=3)
        if rng.integers(0, 2) == 0:
            hh = rng.uniform(0.18, 0.34) * extent
            hw_ = rng.uniform(0.18, 0.34) * extent
            cy = rng.uniform(hh, height - hh)
            cx = rng.uniform(hw_, width - hw_)
            mask = (np.abs(ys - cy) <= hh) & (np.abs(xs - cx) <= hw_)
        else:
            rad = rng.uniform(0.16, 0.30) * extent
            cy = rng.uniform(rad, height - rad)
            cx = rng.uniform(rad, width - rad)
            mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= rad * rad
        image[mask] = color
        label[mask] = cls

    image = image + rng.normal(0.0, 0.03, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SyntheticScene(image=image, label=label, seed=seed)


def generate_dataset(n: int, height: int, width: int, num_classes: int, seed: int):
    """n scenes, each regenerable from its own derived seed."""
    if n < 1:
        raise ConfigError(f"dataset size must be positive, got {n}")
    scene_seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
    return [generate_scene(height, width, num_classes, int(s)) for s in scene_seeds]


def save_dataset(scenes, outdir):
    """One file per scene (image tensor then label tensor) plus an index."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    index = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.bin"
        with open(outdir / name, "wb") as f:
            nm.write_tensor(f, scene.image.astype(np.float32))
            nm.write_tensor(f, scene.label.astype(np.float32))
        index.append({"seed": int(scene.seed), "path": name})
    with open(outdir / "index.jsonl", "w") as f:
        for entry in index:
            f.write(json.dumps(entry) + "\n")


def load_dataset(directory):
    directory = Path(directory)
    index_path = directory / "index.jsonl"
    if not index_path.exists():
        raise ConfigError(f"no index.jsonl in {directory}")
    scenes = []
    with open(index_path) as f:
        for line in f:
            entry = json.loads(line)
            with open(directory / entry["path"], "rb") as sf:
                image = nm.read_tensor(sf).astype(np.float32)
                label = nm.read_tensor(sf).astype(np.int32)
            scenes.append(SyntheticScene(image=image, label=label, seed=int(entry["seed"])))
    return scenes


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 50
    min_lr_frac: float = 0.05
    hflip: bool = True
    seed: int = 0
    log_every: int = 0


def lr_at(tc: TrainConfig, step: int) -> float:
    """Linear warmup then cosine decay to min_lr_frac of the peak."""
    if tc.warmup_steps > 0 and step < tc.warmup_steps:
        return tc.lr * (step + 1) / tc.warmup_steps
    span = max(1, tc.steps - tc.warmup_steps)
    progress = min(1.0, (step - tc.warmup_steps) / span)
    return tc.lr * (tc.min_lr_frac + (1 - tc.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * progress)))


class AdamW:
    """Decoupled weight decay Adam. Decay applies to rank >= 2 tensors only."""

    def __init__(self, named_params, tc: TrainConfig, state: Optional[dict] = None):
        self.named_params = list(named_params)
        self.tc = tc
        self.t = 0
        self.state = {}
        for name, p in self.named_params:
            if state and name in state:
                self.state[name] = {"m": state[name]["m"].copy(), "v": state[name]["v"].copy()}
            else:
                self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}

    def step(self, lr: float):
        b1, b2 = self.tc.betas
        self.t += 1
        bc1 = 1 - b1 ** self.t
        bc2 = 1 - b2 ** self.t
        scale = lr / bc1                 # folds the first-moment bias correction
        vscale = 1.0 / math.sqrt(bc2)    # folds the second-moment bias correction
        wd = lr * self.tc.weight_decay
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            st = self.state[name]
            m, v = st["m"], st["v"]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            denom = np.sqrt(v)
            denom *= vscale
            denom += self.tc.eps
            delta = m / denom
            delta *= scale
            if self.tc.weight_decay and p.data.ndim >= 2:
                delta += wd * p.data
            p.data = p.data - delta

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.named_params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def export_state(self) -> dict:
        return {name: {"m": st["m"].copy(), "v": st["v"].copy()}
                for name, st in self.state.items()}


def _make_batch(scenes, idx, flips):
    images = np.stack([scenes[i].image[:, ::-1] if fl else scenes[i].image
                       for i, fl in zip(idx, flips)])
    labels = np.stack([scenes[i].label[:, ::-1] if fl else scenes[i].label
                       for i, fl in zip(idx, flips)])
    return np.ascontiguousarray(images), np.ascontiguousarray(labels)


def train(cfg: ModelConfig, schedule: ReductionSchedule, scenes, tc: TrainConfig,
          resume: Optional[Checkpoint] = None):
    """Train to tc.steps; returns (Checkpoint, per-step loss curve).

    Pass a loaded checkpoint as ``resume`` to continue (or to fine-tune at a
    different schedule: the schedule argument always wins).
    """
    if not scenes:
        raise UsageError("train needs a non-empty dataset")
    for s in scenes:
        if s.label.max(initial=0) >= cfg.num_classes:
            raise ConfigError("dataset contains class ids outside the model's range")

    if resume is not None:
        weights = resume.weights
        start_step = resume.step
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        opt = AdamW(list(weights.named_parameters()), tc, state=resume.opt_state)
        opt.t = start_step
    else:
        weights = init_model_weights(cfg, seed=tc.seed)
        start_step = 0
        rng = np.random.default_rng(np.random.SeedSequence(entropy=tc.seed, spawn_key=(1,)))
        opt = AdamW(list(weights.named_parameters()), tc)

    n = len(scenes)
    losses = []
    last_grad_norm = float("nan")
    t0 = time.time()
    for step in range(start_step, tc.steps):
        idx = rng.integers(0, n, size=tc.batch_size)
        flips = rng.random(tc.batch_size) < 0.5 if tc.hflip else np.zeros(tc.batch_size, bool)
        images, labels = _make_batch(scenes, idx, flips)
        lr = lr_at(tc, step)
        try:
            logits = model_forward(Tensor(images), cfg, weights, schedule, phase="train")
            loss = nm.cross_entropy_logits(logits, labels, ignore_index=IGNORE_INDEX)
            nm.backward(loss)
        except NumericError as exc:
            raise NumericError(
                f"training aborted at step {step}: {exc} "
                f"(lr {lr:.3e}, last grad-norm {last_grad_norm:.3e})") from exc
        last_grad_norm = opt.grad_norm()
        opt.step(lr)
        opt.zero_grad()
        losses.append(float(loss.data))
        if tc.log_every and (step + 1) % tc.log_every == 0:
            rate = (step + 1 - start_step) / max(1e-9, time.time() - t0)
            print(f"step {step + 1}/{tc.steps}  loss {losses[-1]:.4f}  "
                  f"lr {lr:.2e}  {rate:.1f} it/s")

    ckpt = Checkpoint(
        config=cfg, schedule=schedule, weights=weights,
        step=tc.steps, seed=tc.seed,
        rng_state=rng.bit_generator.state,
        opt_state=opt.export_state(),
        extra={"final_loss": losses[-1] if losses else None},
    )
    return ckpt, losses


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    pixel_accuracy: float
    per_class_iou: np.ndarray     # NaN for classes absent from both sides
    miou: float
    confusion: np.ndarray         # [C, C], rows are ground truth

    def summary(self) -> str:
        ious = ", ".join("-" if np.isnan(v) else f"{v:.4f}" for v in self.per_class_iou)
        return (f"pixel accuracy {self.pixel_accuracy:.4f}  mIoU {self.miou:.4f}  "
                f"per-class IoU [{ious}]")


def _scene_confusion(cfg, weights, schedule, phase, scene) -> np.ndarray:
    ncls = cfg.num_classes
    with nm.no_grad():
        logits = model_forward(Tensor(scene.image[None]), cfg, weights, schedule, phase=phase)
    pred = np.argmax(logits.data[0], axis=-1)
    label = scene.label
    keep = label != IGNORE_INDEX
    flat = label[keep].astype(np.int64) * ncls + pred[keep].astype(np.int64)
    return np.bincount(flat, minlength=ncls * ncls).reshape(ncls, ncls)


def confusion_to_result(confusion: np.ndarray) -> EvalResult:
    tp = np.diag(confusion).astype(np.float64)
    rows = confusion.sum(axis=1).astype(np.float64)
    cols = confusion.sum(axis=0).astype(np.float64)
    denom = rows + cols - tp
    iou = np.full(confusion.shape[0], np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    total = confusion.sum()
    acc = float(tp.sum() / total) if total else 0.0
    miou = float(np.nanmean(iou)) if present.any() else 0.0
    return EvalResult(pixel_accuracy=acc, per_class_iou=iou, miou=miou, confusion=confusion)


def evaluate(cfg: ModelConfig, weights: ModelWeights, scenes, schedule: ReductionSchedule,
             phase: str = "inference") -> EvalResult:
    """Aggregate confusion over the dataset; mIoU skips classes absent everywhere."""
    if not scenes:
        raise UsageError("evaluate needs a non-empty dataset")
    for s in scenes:
        valid = s.label[s.label != IGNORE_INDEX]
        if valid.size and valid.max() >= cfg.num_classes:
            raise UsageError("dataset class ids exceed the model's class count")
    workers = worker_count(len(scenes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda s: _scene_confusion(cfg, weights, schedule, phase, s), scenes))
    else:
        parts = [_scene_confusion(cfg, weights, schedule, phase, s) for s in scenes]
    confusion = np.sum(parts, axis=0)
    return confusion_to_result(confusion)


# ---------------------------------------------------------------------------
# ISR experiments (desk-scale analogs of the ratio studies)

RAISED_ENC_MULTS = (2, 2, 1, 1)   # default [8,4,2,1] -> [16,8,2,1]
RAISED_DEC_MULTS = (2, 2, 2)      # default [1,2,4] -> [2,4,8]


@dataclass
class IsrReport:
    train_low_infer_high: EvalResult
    train_high_infer_high: EvalResult
    ramp_embedding_free: list                 # [(schedule text, EvalResult)]
    ramp_embedded: Optional[list]
    feature_cosine: float

    def render(self) -> str:
        lines = ["ISR experiments", "=" * 60]
        lo, hi = self.train_low_infer_high, self.train_high_infer_high
        lines.append("train-low / infer-high vs train-high / infer-high:")
        lines.append(f"  w/ ISR   mIoU {lo.miou:.4f}  acc {lo.pixel_accuracy:.4f}")
        lines.append(f"  w/o ISR  mIoU {hi.miou:.4f}  acc {hi.pixel_accuracy:.4f}")
        lines.append("")
        lines.append("decoder ratio ramp (embedding-free):")
        base = self.ramp_embedding_free[0][1].miou
        for text, res in self.ramp_embedding_free:
            lines.append(f"  {text:28s} mIoU {res.miou:.4f} ({res.miou - base:+.4f})")
        if self.ramp_embedded:
            lines.append("decoder ratio ramp (embedded):")
            base = self.ramp_embedded[0][1].miou
            for text, res in self.ramp_embedded:
                lines.append(f"  {text:28s} mIoU {res.miou:.4f} ({res.miou - base:+.4f})")
        lines.append("")
        lines.append(f"decoder feature cosine similarity (base vs raised): {self.feature_cosine:.4f}")
        status = "pass" if self.feature_cosine >= 0.9 else "warn"
        lines.append(f"  [{status}] expectation: features are largely preserved (>= 0.9)")
        return "\n".join(lines) + "\n"


def _ramp(ckpt: Checkpoint, scenes, mult_values=(1, 2, 3, 4)):
    rows = []
    for m in mult_values:
        sched = ckpt.schedule.with_mults((1, 1, 1, 1), (m, m, m))
        res = evaluate(ckpt.config, ckpt.weights, scenes, sched, phase="inference")
        rows.append((schedule_text(sched), res))
    return rows


def feature_similarity(ckpt: Checkpoint, scenes, n_samples: int = 4) -> float:
    """Mean cosine similarity of decoder features, base vs raised schedule."""
    base = ckpt.schedule.with_mults((1, 1, 1, 1), (1, 1, 1))
    raised = ckpt.schedule.with_mults(RAISED_ENC_MULTS, RAISED_DEC_MULTS)
    sims = []
    with nm.no_grad():
        for scene in scenes[:n_samples]:
            img = Tensor(scene.image[None])
            fa = decoder_features(img, ckpt.config, ckpt.weights, base).data.ravel()
            fb = decoder_features(img, ckpt.config, ckpt.weights, raised).data.ravel()
            denom = np.linalg.norm(fa) * np.linalg.norm(fb)
            sims.append(float(fa @ fb / denom) if denom else 0.0)
    return float(np.mean(sims))


def isr_experiments(ckpt_low: Checkpoint, ckpt_high: Checkpoint, scenes,
                    embedded_ckpt: Optional[Checkpoint] = None) -> IsrReport:
    """The ratio studies on trained checkpoints; weights are never mutated.

    ``ckpt_low`` must be trained at the base schedule, ``ckpt_high`` at the
    raised one; both are evaluated at the raised effective ratios.
    """
    if ckpt_low.config != ckpt_high.config:
        raise UsageError("checkpoints were built from different model configs")
    raised = ckpt_low.schedule.with_mults(RAISED_ENC_MULTS, RAISED_DEC_MULTS)
    low_eval = evaluate(ckpt_low.config, ckpt_low.weights, scenes, raised, phase="inference")
    high_eval = evaluate(ckpt_high.config, ckpt_high.weights, scenes, ckpt_high.schedule,
                         phase="train")
    ramp_free = _ramp(ckpt_low, scenes)
    ramp_emb = _ramp(embedded_ckpt, scenes) if embedded_ckpt is not None else None
    cosine = feature_similarity(ckpt_low, scenes)
    return IsrReport(
        train_low_infer_high=low_eval,
        train_high_infer_high=high_eval,
        ramp_embedding_free=ramp_free,
        ramp_embedded=ramp_emb,
        feature_cosine=cosine,
    )
