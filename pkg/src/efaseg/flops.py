"""Exact analytic MAC / parameter cost model.

Counting convention: one multiply-accumulate is one counted FLOP. Matrix
multiplies and convolutions are counted; softmax, layer norms, activations,
bias adds and residual adds are not. Reduced-token counts use the exact
rational hw / (r*a)^2, so the closed-form identity cost(r, a) == cost(r*a, 1)
holds without rounding and divisible geometries agree with the instrumented
counters in the numerics engine.

Attention decomposes into four components:

  qkv_embedding       query/key/value projections (zero for embedding-free)
  global_functioning  the similarity softmax product pair, 2*hw*kv*c; this is
                      the ratio-dependent term and what "attention MACs"
                      refers to in sweep reports
  output_projection   hw*c^2
  others              the parameterized reduction path: pooling traversal
                      (hw*c accumulates + kv*c scales) plus the kv*c^2 token
                      projection; zero when the reduction path carries no
                      projection, matching the matmul/conv instrumentation

Table rendering rounds half-up (2 decimals in MFLOPs, 1 in KParams); the
percentage column compares displayed totals, which is how such tables are
conventionally laid out.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP
from fractions import Fraction

from .errors import ConfigError

APPENDIX_B_HW = 196     # 14x14 token grid of a 224 input at 1/16 scale
APPENDIX_B_C = 128


@dataclass(frozen=True)
class ComponentCost:
    macs: Fraction
    params: int

    def __add__(self, other):
        return ComponentCost(self.macs + other.macs, self.params + other.params)


_ZERO = ComponentCost(Fraction(0), 0)


@dataclass(frozen=True)
class FlopReport:
    label: str
    qkv_embedding: ComponentCost
    global_functioning: ComponentCost
    output_projection: ComponentCost
    others: ComponentCost

    @property
    def components(self):
        return (self.qkv_embedding, self.global_functioning,
                self.output_projection, self.others)

    @property
    def total_macs(self) -> Fraction:
        return sum(c.macs for c in self.components)

    @property
    def total_params(self) -> int:
        return sum(c.params for c in self.components)


def attention_cost(hw: int, c: int, r: int = 1, a: int = 1,
                   variant: str = "embedding_free", sr_projection: bool = False,
                   bias_free: bool = True, label: str = "") -> FlopReport:
    """Per-layer attention cost at token count hw and channel width c."""
    if hw < 1 or c < 1 or r < 1 or a < 1:
        raise ConfigError(f"attention_cost arguments must be positive, got hw={hw} c={c} r={r} a={a}")
    if variant not in ("embedding_free", "embedded"):
        raise ConfigError(f"unknown variant {variant!r}")
    kv = Fraction(hw, (r * a) ** 2)
    proj_params = c * c + (0 if bias_free else c)

    if variant == "embedded":
        qkv = ComponentCost(Fraction(hw) * c * c + 2 * kv * c * c, 3 * proj_params)
    else:
        qkv = _ZERO
    glob = ComponentCost(2 * hw * kv * c, 0)
    outp = ComponentCost(Fraction(hw) * c * c, proj_params)
    if sr_projection:
        pooling = Fraction(hw) * c + kv * c
        others = ComponentCost(kv * c * c + pooling, proj_params)
    else:
        others = _ZERO
    return FlopReport(label=label, qkv_embedding=qkv, global_functioning=glob,
                      output_projection=outp, others=others)


def appendix_b_reports() -> list:
    """The three reference rows: embedded SRA, embedding-free, embedding-free at a=2."""
    common = dict(hw=APPENDIX_B_HW, c=APPENDIX_B_C, r=2, sr_projection=True, bias_free=False)
    return [
        attention_cost(a=1, variant="embedded", label="SRA", **common),
        attention_cost(a=1, variant="embedding_free", label="EFA", **common),
        attention_cost(a=2, variant="embedding_free", label="EFA w/ ISR(a=2)", **common),
    ]


# ---------------------------------------------------------------------------
# whole-model cost


@dataclass
class LayerCost:
    name: str
    kind: str                 # "patch" | "attention" | "ffl" | "fusion"
    macs: Fraction
    params: int
    attention: FlopReport = None


@dataclass
class ModelCost:
    layers: list

    @property
    def total_macs(self) -> Fraction:
        return sum(l.macs for l in self.layers)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def attention_global_macs(self) -> int:
        """The ratio-dependent attention term summed over every block."""
        total = Fraction(0)
        for l in self.layers:
            if l.attention is not None:
                total += l.attention.global_functioning.macs
        return int(total) if total.denominator == 1 else float(total)

    @property
    def attention_total_macs(self):
        total = sum((l.attention.total_macs for l in self.layers if l.attention is not None),
                    Fraction(0))
        return int(total) if total.denominator == 1 else float(total)


def _ffl_cost(hw: int, c: int, expansion: int):
    e = expansion * c
    macs = Fraction(hw) * c * e + Fraction(hw) * 9 * e + Fraction(hw) * e * c
    params = c * e + e + 9 * e + e + e * c + c
    return macs, params


def _block_cost(name: str, hw: int, c: int, r: int, a: int, cfg) -> list:
    rep = attention_cost(hw, c, r=r, a=a, variant=cfg.variant,
                         sr_projection=cfg.sr_projection,
                         bias_free=cfg.bias_free_projections, label=name)
    layers = [LayerCost(name + ".attn", "attention", rep.total_macs,
                        rep.total_params + 4 * c, rep)]  # + the two block norms
    fmacs, fparams = _ffl_cost(hw, c, cfg.expansion)
    layers.append(LayerCost(name + ".ffl", "ffl", fmacs, fparams))
    return layers


def model_cost(cfg, schedule, phase: str, input_h: int, input_w: int) -> ModelCost:
    """Aggregate analytic cost of a full forward at the phase's ratios.

    Reported per single image. Bilinear upsampling and the loss are outside
    the MAC convention.
    """
    from .isr import effective_ratios
    from .model import DECODER_SOURCES, IMG_CHANNELS, PATCH_SPECS

    enc_r, dec_r = effective_ratios(schedule, phase)
    mults_e = [a for a in getattr(schedule, "enc_mults", (1, 1, 1, 1))]
    layers = []
    cin = IMG_CHANNELS
    h, w = input_h, input_w
    stage_hw = []
    for i in range(4):
        c = cfg.stage_channels[i]
        k, s, p = PATCH_SPECS[i]
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        macs = Fraction(oh * ow) * k * k * cin * c
        params = k * k * cin * c + c + 2 * c
        layers.append(LayerCost(f"enc.s{i + 1}.patch", "patch", macs, params))
        hw = oh * ow
        stage_hw.append((oh, ow))
        for b in range(cfg.stage_depths[i]):
            layers.extend(_block_cost(f"enc.s{i + 1}.b{b}", hw, c, int(enc_r[i]), 1, cfg))
        cin, h, w = c, oh, ow
    for j in range(3):
        src = DECODER_SOURCES[j]
        c = cfg.stage_channels[src - 1]
        oh, ow = stage_hw[src - 1]
        hw = oh * ow
        layers.append(LayerCost(f"dec.s{j + 1}.norm", "patch", Fraction(0), 2 * c))
        for b in range(cfg.decoder_depths[j]):
            layers.extend(_block_cost(f"dec.s{j + 1}.b{b}", hw, c, int(dec_r[j]), 1, cfg))
    csum = sum(cfg.stage_channels[s - 1] for s in DECODER_SOURCES)
    fh, fw = stage_hw[1]
    fmacs = Fraction(fh * fw) * (csum * cfg.fusion_channels
                                 + cfg.fusion_channels * cfg.num_classes)
    fparams = (csum * cfg.fusion_channels + cfg.fusion_channels
               + cfg.fusion_channels * cfg.num_classes + cfg.num_classes)
    layers.append(LayerCost("fusion", "fusion", fmacs, fparams))
    return ModelCost(layers=layers)


# ---------------------------------------------------------------------------
# rendering


def _round_half_up(x, decimals: int) -> Decimal:
    if isinstance(x, Fraction):
        d = Decimal(x.numerator) / Decimal(x.denominator)
    else:
        d = Decimal(str(x))
    q = Decimal(1).scaleb(-decimals)
    return d.quantize(q, rounding=ROUND_HALF_UP)


def mflops_str(macs) -> str:
    return str(_round_half_up(Fraction(macs) / 1_000_000, 2))


def kparams_str(params) -> str:
    return str(_round_half_up(Fraction(int(params)) / 1_000, 1))


def _pct_str(value: Decimal, base: Decimal) -> str:
    if base == 0:
        return ""
    delta = (Decimal(1) - value / base) * 100
    return f"(-{_round_half_up(delta, 1)}%)" if delta >= 0 else f"(+{_round_half_up(-delta, 1)}%)"


def render_table(reports, baseline_label: str = None) -> str:
    """Fixed-width component table; percentages compare displayed totals."""
    headers = ["Mechanism", "QKV Embedding", "Global Functioning",
               "Output Projection", "Others", "Total"]
    rows = []
    base_m = base_p = None
    for i, rep in enumerate(reports):
        cells = [rep.label or f"row {i}"]
        for comp in rep.components:
            cells.append(f"{mflops_str(comp.macs)} / {kparams_str(comp.params)}")
        tot_m = _round_half_up(Fraction(rep.total_macs) / 1_000_000, 2)
        tot_p = _round_half_up(Fraction(rep.total_params) / 1_000, 1)
        is_base = (baseline_label is None and i == 0) or rep.label == baseline_label
        if is_base and base_m is None:
            base_m, base_p = tot_m, tot_p
            cells.append(f"{tot_m} / {tot_p}")
        else:
            cells.append(f"{tot_m} {_pct_str(tot_m, base_m)} / {tot_p} {_pct_str(tot_p, base_p)}")
        rows.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
             "  ".join("-" * w for w in widths)]
    for cells in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    return "\n".join(lines) + "\n"


def report_records(reports) -> list:
    """Machine-readable mirror of render_table (exact integer/float MACs)."""
    records = []
    for rep in reports:
        rec = {"label": rep.label, "total_params": rep.total_params,
               "total_mflops": float(rep.total_macs) / 1e6}
        for name, comp in zip(("qkv_embedding", "global_functioning",
                               "output_projection", "others"), rep.components):
            rec[name] = {"mflops": float(comp.macs) / 1e6, "params": comp.params}
        records.append(rec)
    return records
