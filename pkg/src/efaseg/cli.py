"""Command-line interface.

Subcommands: train, eval, sweep, analyze-flops, gen-data. Runs are driven by
an INI config with sections [model], [schedule], [train], [data]; unknown
sections or keys are errors. Exit codes: 0 success, 2 usage or configuration
error, 3 numeric failure, 4 I/O failure. EFASEG_THREADS caps worker count
for data generation and evaluation.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import flops as fl
from . import harness as hz
from . import isr as isr_mod
from .errors import ConfigError, NumericError, ScheduleParseError, UsageError
from .isr import ReductionSchedule, parse_schedule, schedule_text
from .model import (Checkpoint, ModelConfig, load_checkpoint, micro_config,
                    nano_config, save_checkpoint)

PRESETS = {"nano": nano_config, "micro": micro_config}


@dataclass
class RunConfig:
    model: ModelConfig
    schedule: ReductionSchedule
    train: hz.TrainConfig
    data_n: int = 200
    data_image_size: int = 64
    data_classes: int = 3
    data_seed: int = 0
    eval_n: int = 50
    eval_seed: int = 1


def _parse_int_tuple(text: str, n: int, key: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != n:
        raise ConfigError(f"{key} needs {n} comma-separated integers, got {text!r}")
    return tuple(int(p) for p in parts)


def _parse_bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key} must be a boolean, got {text!r}")


_MODEL_KEYS = {"preset", "num_classes", "variant", "pooling", "sr_projection",
               "bias_free_projections", "stage_channels", "stage_depths",
               "stage_heads", "decoder_depths", "fusion_channels", "expansion"}
_SCHEDULE_KEYS = {"train", "inference"}
_TRAIN_KEYS = {"steps", "batch_size", "lr", "betas", "weight_decay",
               "warmup_steps", "min_lr_frac", "hflip", "seed", "log_every"}
_DATA_KEYS = {"n", "image_size", "classes", "seed", "eval_n", "eval_seed"}


def parse_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read(path)

    for section in parser.sections():
        if section not in ("model", "schedule", "train", "data"):
            raise ConfigError(f"unknown config section [{section}]")
    allowed = {"model": _MODEL_KEYS, "schedule": _SCHEDULE_KEYS,
               "train": _TRAIN_KEYS, "data": _DATA_KEYS}
    for section, keys in allowed.items():
        if parser.has_section(section):
            for key in parser[section]:
                if key not in keys:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")

    m = parser["model"] if parser.has_section("model") else {}
    base = PRESETS.get(m.get("preset", "nano"))
    if base is None:
        raise ConfigError(f"unknown model preset {m.get('preset')!r}")
    kw = {}
    if "num_classes" in m:
        kw["num_classes"] = int(m["num_classes"])
    elif parser.has_section("data") and "classes" in parser["data"]:
        kw["num_classes"] = int(parser["data"]["classes"])
    for key in ("variant", "pooling"):
        if key in m:
            kw[key] = m[key].strip()
    for key in ("sr_projection", "bias_free_projections"):
        if key in m:
            kw[key] = _parse_bool(m[key], key)
    for key, n in (("stage_channels", 4), ("stage_depths", 4), ("stage_heads", 4),
                   ("decoder_depths", 3)):
        if key in m:
            kw[key] = _parse_int_tuple(m[key], n, key)
    for key in ("fusion_channels", "expansion"):
        if key in m:
            kw[key] = int(m[key])
    model = dataclasses.replace(base(), **kw)

    s = parser["schedule"] if parser.has_section("schedule") else {}
    train_sched = ReductionSchedule()
    if "train" in s:
        t = parse_schedule(s["train"], ReductionSchedule((1, 1, 1, 1), (1, 1, 1)))
        enc, dec = isr_mod.effective_ratios(t, "inference")
        train_sched = ReductionSchedule(enc_ratios=enc, dec_ratios=dec)
    schedule = train_sched
    if "inference" in s:
        schedule = parse_schedule(s["inference"], train_sched)

    t = parser["train"] if parser.has_section("train") else {}
    tc = hz.TrainConfig()
    tkw = {}
    for key in ("steps", "batch_size", "warmup_steps", "seed", "log_every"):
        if key in t:
            tkw[key] = int(t[key])
    for key in ("lr", "weight_decay", "min_lr_frac"):
        if key in t:
            tkw[key] = float(t[key])
    if "betas" in t:
        b = [float(p) for p in t["betas"].split(",")]
        if len(b) != 2:
            raise ConfigError(f"betas needs two values, got {t['betas']!r}")
        tkw["betas"] = tuple(b)
    if "hflip" in t:
        tkw["hflip"] = _parse_bool(t["hflip"], "hflip")
    tc = dataclasses.replace(tc, **tkw)

    d = parser["data"] if parser.has_section("data") else {}
    rc = RunConfig(model=model, schedule=schedule, train=tc)
    if "n" in d:
        rc.data_n = int(d["n"])
    if "image_size" in d:
        rc.data_image_size = int(d["image_size"])
    if "classes" in d:
        rc.data_classes = int(d["classes"])
    if "seed" in d:
        rc.data_seed = int(d["seed"])
    if "eval_n" in d:
        rc.eval_n = int(d["eval_n"])
    if "eval_seed" in d:
        rc.eval_seed = int(d["eval_seed"])
    if rc.data_classes != model.num_classes:
        raise ConfigError(
            f"[data] classes ({rc.data_classes}) must match model num_classes "
            f"({model.num_classes})")
    return rc


def render_run_config(rc: RunConfig) -> str:
    m = rc.model
    lines = [
        "[model]",
        f"num_classes = {m.num_classes}",
        f"variant = {m.variant}",
        f"pooling = {m.pooling}",
        f"sr_projection = {str(m.sr_projection).lower()}",
        f"bias_free_projections = {str(m.bias_free_projections).lower()}",
        f"stage_channels = {','.join(str(c) for c in m.stage_channels)}",
        f"stage_depths = {','.join(str(c) for c in m.stage_depths)}",
        f"stage_heads = {','.join(str(c) for c in m.stage_heads)}",
        f"decoder_depths = {','.join(str(c) for c in m.decoder_depths)}",
        f"fusion_channels = {m.fusion_channels}",
        f"expansion = {m.expansion}",
        "",
        "[schedule]",
        f"train = {schedule_text(rc.schedule, 'train')}",
        f"inference = {schedule_text(rc.schedule, 'inference')}",
        "",
        "[train]",
        f"steps = {rc.train.steps}",
        f"batch_size = {rc.train.batch_size}",
        f"lr = {rc.train.lr}",
        f"betas = {rc.train.betas[0]},{rc.train.betas[1]}",
        f"weight_decay = {rc.train.weight_decay}",
        f"warmup_steps = {rc.train.warmup_steps}",
        f"min_lr_frac = {rc.train.min_lr_frac}",
        f"hflip = {str(rc.train.hflip).lower()}",
        f"seed = {rc.train.seed}",
        f"log_every = {rc.train.log_every}",
        "",
        "[data]",
        f"n = {rc.data_n}",
        f"image_size = {rc.data_image_size}",
        f"classes = {rc.data_classes}",
        f"seed = {rc.data_seed}",
        f"eval_n = {rc.eval_n}",
        f"eval_seed = {rc.eval_seed}",
        "",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    rc = parse_run_config(args.config)
    if args.seed is not None:
        rc.train = dataclasses.replace(rc.train, seed=args.seed)
    scenes = hz.generate_dataset(rc.data_n, rc.data_image_size, rc.data_image_size,
                                 rc.data_classes, rc.data_seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, losses = hz.train(rc.model, rc.schedule, scenes, rc.train, resume=resume)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, ckpt)
    with open(str(out) + ".loss.jsonl", "w") as f:
        for i, loss in enumerate(losses):
            f.write(json.dumps({"step": i + (resume.step if resume else 0), "loss": loss}) + "\n")
    print(f"trained {len(losses)} steps, final loss {losses[-1]:.4f}" if losses
          else "no steps run")
    print(f"checkpoint written to {out}")
    return 0


def _load_scenes(args, ckpt: Checkpoint):
    if args.data:
        return hz.load_dataset(args.data)
    extra = ckpt.extra or {}
    size = int(extra.get("image_size", 64))
    n = args.gen_n
    return hz.generate_dataset(n, size, size, ckpt.config.num_classes, args.gen_seed)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    scenes = _load_scenes(args, ckpt)
    schedule = parse_schedule(args.schedule, ckpt.schedule) if args.schedule else ckpt.schedule
    result = hz.evaluate(ckpt.config, ckpt.weights, scenes, schedule, phase="inference")
    h, w = scenes[0].image.shape[:2]
    cost = fl.model_cost(ckpt.config, schedule, "inference", h, w)
    base_cost = fl.model_cost(ckpt.config, ckpt.schedule, "train", h, w)
    print(f"schedule   {schedule_text(schedule)}")
    print(result.summary())
    print(f"attention MACs (analytic, per image): {cost.attention_global_macs}")
    delta = 1 - cost.attention_global_macs / max(1, base_cost.attention_global_macs)
    print(f"vs training schedule: {-100 * delta:+.1f}%")
    if args.json:
        with open(args.json, "w") as f:
            f.write(json.dumps({
                "schedule": schedule_text(schedule),
                "pixel_accuracy": result.pixel_accuracy,
                "miou": result.miou,
                "per_class_iou": [None if np.isnan(v) else v for v in result.per_class_iou],
                "attention_macs": cost.attention_global_macs,
            }) + "\n")
    return 0


def cmd_sweep(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    scenes = _load_scenes(args, ckpt)
    lines = Path(args.schedules).read_text().splitlines()
    texts = [ln.strip() for ln in lines if ln.strip() and not ln.strip().startswith("#")]
    rows = isr_mod.sweep(texts, ckpt, scenes)
    header = f"{'schedule':28s}  {'attn MACs':>12s}  {'accuracy':>8s}  {'mIoU':>7s}  {'dmIoU':>7s}"
    out_lines = [header, "-" * len(header)]
    for row in rows:
        delta = "" if row.miou_delta is None else f"{row.miou_delta:+.4f}"
        out_lines.append(f"{row.schedule:28s}  {row.attention_macs:12d}  "
                         f"{row.pixel_accuracy:8.4f}  {row.miou:7.4f}  {delta:>7s}")
    table = "\n".join(out_lines) + "\n"
    print(table, end="")
    if args.out:
        Path(args.out + ".txt").write_text(table)
        with open(args.out + ".jsonl", "w") as f:
            for row in rows:
                f.write(json.dumps(dataclasses.asdict(row)) + "\n")
        print(f"report written to {args.out}.txt / {args.out}.jsonl")
    return 0


def cmd_analyze_flops(args) -> int:
    if args.preset:
        if args.preset != "appendix-b":
            raise ConfigError(f"unknown preset {args.preset!r}")
        reports = fl.appendix_b_reports()
    else:
        if min(args.hw, args.c, args.r, args.a) < 1:
            raise ConfigError("hw, c, r and a must all be >= 1")
        reports = [fl.attention_cost(
            args.hw, args.c, r=args.r, a=args.a, variant=args.variant,
            sr_projection=args.sr_projection, bias_free=args.bias_free,
            label=f"{args.variant} r={args.r} a={args.a}")]
    print(fl.render_table(reports), end="")
    if args.json:
        with open(args.json, "w") as f:
            for rec in fl.report_records(reports):
                f.write(json.dumps(rec) + "\n")
    return 0


def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise ConfigError(f"need at least 2 classes, got {args.classes}")
    if args.n < 1 or args.size < 1:
        raise ConfigError("--n and --size must be positive")
    scenes = hz.generate_dataset(args.n, args.size, args.size, args.classes, args.seed)
    hz.save_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efaseg",
        description="Embedding-free attention segmentation with inference spatial reduction.",
        epilog="EFASEG_THREADS caps data-generation/evaluation workers.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("train", help="train a model from a run config",
                       formatter_class=fmt)
    p.add_argument("config", help="run config file (INI)")
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")
    p.add_argument("--out", default="model.ckpt", help="checkpoint output path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint at a reduction schedule",
                       formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", default=None, help="dataset directory (from gen-data)")
    p.add_argument("--gen-n", type=int, default=50,
                   help="scenes to synthesize when --data is omitted")
    p.add_argument("--gen-seed", type=int, default=1,
                   help="seed for synthesized eval scenes")
    p.add_argument("--schedule", default=None,
                   help="inference schedule like '[16,8,2,1]-[2,4,8]'")
    p.add_argument("--json", default=None, help="write metrics record here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="evaluate many schedules against one checkpoint",
                       formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--schedules", required=True, help="file with one schedule per line")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--gen-n", type=int, default=50)
    p.add_argument("--gen-seed", type=int, default=1)
    p.add_argument("--out", default=None, help="report prefix (.txt and .jsonl)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-flops", help="print the attention cost decomposition",
                       formatter_class=fmt)
    p.add_argument("--hw", type=int, default=196, help="token count")
    p.add_argument("--c", type=int, default=128, help="channel width")
    p.add_argument("--r", type=int, default=1, help="training reduction ratio")
    p.add_argument("--a", type=int, default=1, help="inference multiplier")
    p.add_argument("--variant", choices=("embedding_free", "embedded"),
                   default="embedding_free")
    p.add_argument("--sr-projection", action="store_true",
                   help="charge the reduced-token projection path")
    p.add_argument("--bias-free", action="store_true", default=False,
                   help="exclude projection biases from parameter counts")
    p.add_argument("--preset", default=None,
                   help="'appendix-b' prints the three reference rows")
    p.add_argument("--json", default=None, help="write records here")
    p.set_defaults(func=cmd_analyze_flops)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to disk",
                       formatter_class=fmt)
    p.add_argument("--n", type=int, default=200, help="number of scenes")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--size", type=int, default=64, help="square image extent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ScheduleParseError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
