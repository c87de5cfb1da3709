"""Reduction-ratio schedules and the inference-time spatial reduction sweep.

A schedule holds the training reduction ratios for the four encoder stages
and three decoder stages plus per-stage inference multipliers. The effective
ratio at inference is ratio * multiplier, computed on demand; with all
multipliers at one, inference is identical to training. Sweeping schedules
over a trained model never touches the weights.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import ConfigError, ScheduleParseError

DEFAULT_ENC_RATIOS = (8, 4, 2, 1)
DEFAULT_DEC_RATIOS = (1, 2, 4)


@dataclass(frozen=True)
class ReductionSchedule:
    enc_ratios: tuple = DEFAULT_ENC_RATIOS   # training ratios, encoder stages 1..4
    dec_ratios: tuple = DEFAULT_DEC_RATIOS   # training ratios, decoder stages 1..3
    enc_mults: tuple = (1, 1, 1, 1)          # inference multipliers
    dec_mults: tuple = (1, 1, 1)

    def __post_init__(self):
        for name, n in (("enc_ratios", 4), ("dec_ratios", 3), ("enc_mults", 4), ("dec_mults", 3)):
            v = getattr(self, name)
            if len(v) != n:
                raise ConfigError(f"{name} needs {n} entries, got {v}")
            if any(int(e) < 1 for e in v):
                raise ConfigError(f"{name} entries must be positive integers, got {v}")

    def with_mults(self, enc_mults: Sequence[int], dec_mults: Sequence[int]) -> "ReductionSchedule":
        return ReductionSchedule(self.enc_ratios, self.dec_ratios,
                                 tuple(int(m) for m in enc_mults),
                                 tuple(int(m) for m in dec_mults))


def effective_ratios(s: ReductionSchedule, phase: str):
    """(encoder ratios, decoder ratios) actually applied in the given phase."""
    if phase == "train":
        return tuple(s.enc_ratios), tuple(s.dec_ratios)
    if phase == "inference":
        enc = tuple(r * m for r, m in zip(s.enc_ratios, s.enc_mults))
        dec = tuple(r * m for r, m in zip(s.dec_ratios, s.dec_mults))
        return enc, dec
    raise ConfigError(f"phase must be 'train' or 'inference', got {phase!r}")


_SCHEDULE_RE = re.compile(
    r"^\s*\[\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]\s*-"
    r"\s*\[\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]\s*$"
)


def format_schedule(enc: Sequence[int], dec: Sequence[int]) -> str:
    return "[" + ",".join(str(int(r)) for r in enc) + "]-[" + ",".join(str(int(r)) for r in dec) + "]"


_SCHEDULE_TEMPLATE = ("[", "int", ",", "int", ",", "int", ",", "int", "]",
                      "-", "[", "int", ",", "int", ",", "int", "]")


def _parse_error_position(text: str) -> int:
    """Index of the first character that breaks the '[i,i,i,i]-[i,i,i]' shape."""
    pos, n = 0, len(text)
    for token in _SCHEDULE_TEMPLATE:
        while pos < n and text[pos].isspace():
            pos += 1
        if token == "int":
            if pos >= n or not text[pos].isdigit():
                return pos
            while pos < n and text[pos].isdigit():
                pos += 1
        else:
            if pos >= n or text[pos] != token:
                return pos
            pos += 1
    while pos < n and text[pos].isspace():
        pos += 1
    return pos


def parse_schedule(text: str, train: Optional[ReductionSchedule] = None) -> ReductionSchedule:
    """Parse '[rE1,rE2,rE3,rE4]-[rD1,rD2,rD3]' effective inference ratios.

    The result keeps ``train``'s training ratios (defaults if omitted) and
    factors each requested ratio into ratio * multiplier; ratios that are not
    integer multiples of the training ratio are rejected.
    """
    if train is None:
        train = ReductionSchedule()
    m = _SCHEDULE_RE.match(text)
    if not m:
        pos = _parse_error_position(text)
        raise ScheduleParseError(
            f"malformed schedule {text!r}: expected '[i,i,i,i]-[i,i,i]' (error near position {pos})",
            position=pos,
        )
    values = [int(g) for g in m.groups()]
    enc_req, dec_req = values[:4], values[4:]
    if any(v < 1 for v in values):
        raise ConfigError(f"schedule ratios must be >= 1, got {text!r}")
    enc_mults, dec_mults = [], []
    for req, base in zip(enc_req, train.enc_ratios):
        if req % base:
            raise ConfigError(
                f"encoder ratio {req} is not an integer multiple of training ratio {base}")
        enc_mults.append(req // base)
    for req, base in zip(dec_req, train.dec_ratios):
        if req % base:
            raise ConfigError(
                f"decoder ratio {req} is not an integer multiple of training ratio {base}")
        dec_mults.append(req // base)
    return train.with_mults(enc_mults, dec_mults)


def schedule_text(s: ReductionSchedule, phase: str = "inference") -> str:
    enc, dec = effective_ratios(s, phase)
    return format_schedule(enc, dec)


@dataclass
class SweepRow:
    schedule: str
    attention_macs: int
    pixel_accuracy: float
    miou: float
    miou_delta: Optional[float] = None   # vs the all-ones baseline row, when present


def sweep(schedules, ckpt, dataset, input_hw: Optional[tuple] = None) -> list:
    """Evaluate each inference schedule on a trained checkpoint.

    Rows keep file order. The first all-multiplier-one schedule, if any,
    defines the degradation column. Weights are never mutated; a digest
    guard enforces that.
    """
    from .flops import model_cost
    from .harness import evaluate
    from .model import checkpoint_digest

    if input_hw is None:
        if not dataset:
            raise ConfigError("sweep needs a dataset to size its cost reports")
        input_hw = dataset[0].image.shape[:2]

    digest_before = checkpoint_digest(ckpt)
    rows = []
    baseline_miou = None
    for sched in schedules:
        if isinstance(sched, str):
            sched = parse_schedule(sched, ckpt.schedule)
        if any(m < 1 for m in sched.enc_mults + sched.dec_mults):
            raise ConfigError("sweep multipliers must be >= 1")
        cost = model_cost(ckpt.config, sched, "inference", input_hw[0], input_hw[1])
        result = evaluate(ckpt.config, ckpt.weights, dataset, sched, phase="inference")
        if baseline_miou is None and all(m == 1 for m in sched.enc_mults + sched.dec_mults):
            baseline_miou = result.miou
        rows.append(SweepRow(
            schedule=schedule_text(sched),
            attention_macs=cost.attention_global_macs,
            pixel_accuracy=result.pixel_accuracy,
            miou=result.miou,
        ))
    if baseline_miou is not None:
        for row in rows:
            row.miou_delta = row.miou - baseline_miou
    if checkpoint_digest(ckpt) != digest_before:
        raise RuntimeError("sweep mutated checkpoint weights")
    return rows
