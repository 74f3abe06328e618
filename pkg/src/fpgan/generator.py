"""Lightweight few-shot generator with configurable UpBlock convolutions.

latent -> dense seed map at 4x4 -> UpBlocks (upsample, 3x3 conv, batch
norm, GLU) up to the output resolution -> 3x3 toRGB -> tanh. Skip-layer
excitation (SLE) blocks gate a high-resolution map with channel weights
computed from a low-resolution one.

Variants:

* ``baseline``: standard convolutions everywhere.
* ``fpg_g``: depthwise-separable convolutions in the UpBlocks only; SLE
  blocks keep standard convolutions.
* ``fpg_dg``: separable convolutions in UpBlocks and SLE blocks (and in the
  discriminator stacks, see :mod:`fpgan.discriminator`).
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .conv import BatchNormParams, Conv, ConvSpec, CostReport, count_cost, dtype_width
from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor

FASTGAN_SLE_PAIRS = ((8, 128), (16, 256), (32, 512))
SLE_POOL = 4
SLE_SLOPE = 0.1


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    FPG_G = "fpg_g"
    FPG_DG = "fpg_dg"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower().replace("-", "_"))
        except ValueError:
            raise ConfigError(
                f"unknown variant {value!r}; expected baseline, fpg-g or fpg-dg") from None

    @property
    def cli_name(self) -> str:
        return self.value.replace("_", "-")

    @property
    def separable_upblocks(self) -> bool:
        return self is not Variant.BASELINE

    @property
    def separable_sle(self) -> bool:
        return self is Variant.FPG_DG

    @property
    def separable_discriminator(self) -> bool:
        return self is Variant.FPG_DG


def default_schedule(resolution: int, base_channels: int, floor: int = 32) -> dict[int, int]:
    sched = {}
    r, c = 4, 16 * base_channels
    while r <= resolution:
        sched[r] = max(c, floor)
        r, c = r * 2, c // 2
    return sched


def default_sle_pairs(resolution: int) -> list[tuple[int, int]]:
    pairs = [(lo, hi) for lo, hi in FASTGAN_SLE_PAIRS if hi <= resolution]
    if not pairs and resolution >= 16:
        # below 128px none of the 16x pairs fit; keep one excitation path
        pairs = [(8, resolution)]
    return pairs


def _is_pow2(v: int) -> bool:
    return v >= 1 and v & (v - 1) == 0


@dataclass
class GeneratorConfig:
    latent_dim: int = 256
    output_resolution: int = 256
    base_channels: int = 64
    channel_floor: int = 32
    channel_schedule: dict[int, int] | None = None
    sle_pairs: list[tuple[int, int]] | None = None
    variant: Variant = Variant.BASELINE
    seed: int = 0
    dsc_order: str = "depthwise_first"
    dtype: str = "float32"

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        r = self.output_resolution
        if not _is_pow2(r) or r < 16:
            raise ConfigError(f"output_resolution must be a power of two >= 16, got {r}")
        if self.latent_dim < 1 or self.base_channels < 1:
            raise ConfigError("latent_dim and base_channels must be positive")
        if self.channel_schedule is None:
            self.channel_schedule = default_schedule(r, self.base_channels, self.channel_floor)
        else:
            self.channel_schedule = {int(k): int(v) for k, v in self.channel_schedule.items()}
        if self.sle_pairs is None:
            self.sle_pairs = default_sle_pairs(r)
        else:
            self.sle_pairs = [(int(a), int(b)) for a, b in self.sle_pairs]
        self.validate()

    def validate(self) -> None:
        r = self.output_resolution
        expected = []
        res = 4
        while res <= r:
            expected.append(res)
            res *= 2
        if sorted(self.channel_schedule) != expected:
            raise ConfigError(
                f"channel_schedule must cover resolutions {expected}, got {sorted(self.channel_schedule)}")
        if any(c < 1 for c in self.channel_schedule.values()):
            raise ConfigError("channel counts must be positive")
        highs = set()
        for lo, hi in self.sle_pairs:
            if lo not in self.channel_schedule or hi not in self.channel_schedule:
                raise ConfigError(f"SLE pair {(lo, hi)} references a missing resolution")
            if not lo < hi:
                raise ConfigError(f"SLE pair {(lo, hi)} needs low < high")
            if lo < SLE_POOL:
                raise ConfigError(f"SLE low resolution must be >= {SLE_POOL}")
            if hi in highs:
                raise ConfigError(f"two SLE pairs target resolution {hi}")
            highs.add(hi)

    def resolutions(self) -> list[int]:
        return sorted(self.channel_schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["channel_schedule"] = {str(k): v for k, v in self.channel_schedule.items()}
        d["sle_pairs"] = [list(p) for p in self.sle_pairs]
        return d


def _conv_spec(kind_separable: bool, cin: int, cout: int, k: int, padding: int, bias: bool,
               order: str) -> ConvSpec:
    kind = "separable" if kind_separable and k > 1 else "standard"
    return ConvSpec(kind, cin, cout, k, 1, padding, bias, order)


@dataclass
class UpBlock:
    conv: Conv
    norm: BatchNormParams
    in_res: int

    def named_parameters(self, prefix=""):
        yield from self.conv.named_parameters(prefix + "conv.")
        yield from self.norm.named_parameters(prefix + "norm.")

    def named_buffers(self, prefix=""):
        yield from self.norm.named_buffers(prefix + "norm.")

    def __call__(self, x: Tensor, bn_mode="training", update_running=True) -> Tensor:
        return upblock_forward(x, self, bn_mode, update_running)


def upblock_forward(x: Tensor, block: UpBlock, bn_mode="training", update_running=True) -> Tensor:
    """Double the resolution: upsample, conv to 2*C_out, batch norm, GLU."""
    if x.data.ndim != 4 or x.shape[1] != block.conv.spec.in_channels:
        raise ShapeError(
            f"upblock expects [N, {block.conv.spec.in_channels}, H, W], got dims {x.dims}")
    h = ops.upsample_nearest(x, 2)
    h = block.conv(h)
    h = block.norm(h, bn_mode, update_running)
    return ops.glu(h)


@dataclass
class SLEBlock:
    low_res: int
    high_res: int
    gate_conv: Conv
    out_conv: Conv

    def named_parameters(self, prefix=""):
        yield from self.gate_conv.named_parameters(prefix + "gate.")
        yield from self.out_conv.named_parameters(prefix + "out.")

    def __call__(self, low: Tensor, high: Tensor) -> Tensor:
        return sle_forward(low, high, self)


def sle_forward(low: Tensor, high: Tensor, block: SLEBlock) -> Tensor:
    """Gate ``high`` channel-wise with sigmoid weights computed from ``low``."""
    if low.data.ndim != 4 or high.data.ndim != 4 or low.shape[0] != high.shape[0]:
        raise ShapeError(f"SLE inputs must be 4-D with equal batch: {low.dims} vs {high.dims}")
    if low.shape[1] != block.gate_conv.spec.in_channels or \
            high.shape[1] != block.out_conv.spec.out_channels:
        raise ShapeError(
            f"SLE pair ({block.low_res}, {block.high_res}) does not match dims {low.dims}, {high.dims}")
    g = ops.avg_pool_to(low, SLE_POOL)
    g = block.gate_conv(g)
    g = ops.leaky_relu(g, SLE_SLOPE)
    g = block.out_conv(g)
    g = ops.sigmoid(g)
    return ops.mul(high, g)


class Generator:
    def __init__(self, config: GeneratorConfig, seed_weight: Tensor, seed_norm: BatchNormParams,
                 upblocks: dict[int, UpBlock], sle_blocks: dict[int, SLEBlock], to_rgb: Conv):
        self.config = config
        self.seed_weight = seed_weight
        self.seed_norm = seed_norm
        self.upblocks = upblocks
        self.sle_blocks = sle_blocks
        self.to_rgb = to_rgb

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "seed.weight", self.seed_weight
        yield from self.seed_norm.named_parameters("seed.norm.")
        for r, blk in self.upblocks.items():
            yield from blk.named_parameters(f"up{r}.")
        for r, blk in self.sle_blocks.items():
            yield from blk.named_parameters(f"sle{r}.")
        yield from self.to_rgb.named_parameters("to_rgb.")

    def named_buffers(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.seed_norm.named_buffers("seed.norm.")
        for r, blk in self.upblocks.items():
            yield from blk.named_buffers(f"up{r}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_params(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def __call__(self, z: Tensor, bn_mode="training", update_running=True) -> Tensor:
        return generator_forward(self, z, bn_mode, update_running)


def build_generator(cfg: GeneratorConfig, rng: Rng | None = None) -> Generator:
    """Instantiate all weights deterministically from ``cfg.seed`` (or ``rng``)."""
    cfg.validate()
    rng = rng if rng is not None else Rng(cfg.seed).child("weights_g")
    sched, dt, order = cfg.channel_schedule, cfg.dtype, cfg.dsc_order
    c4 = sched[4]
    fan = cfg.latent_dim
    seed_out = 2 * c4 * 16
    w = (rng.child("seed").normal(seed_out * fan) * np.sqrt(2.0 / fan)).reshape(seed_out, fan)
    seed_weight = Tensor(w.astype(dt), requires_grad=True)
    seed_norm = BatchNormParams.build(2 * c4, dt)
    upblocks = {}
    for r in cfg.resolutions()[:-1]:
        spec = _conv_spec(cfg.variant.separable_upblocks, sched[r], 2 * sched[2 * r], 3, 1, False, order)
        conv = Conv.build(spec, rng.child(f"up{2 * r}"), dt)
        upblocks[2 * r] = UpBlock(conv, BatchNormParams.build(2 * sched[2 * r], dt), r)
    sle_blocks = {}
    for lo, hi in cfg.sle_pairs:
        srng = rng.child(f"sle{hi}")
        sep = cfg.variant.separable_sle
        gate = Conv.build(_conv_spec(sep, sched[lo], sched[hi], SLE_POOL, 0, True, order),
                          srng.child("gate"), dt)
        out_spec = ConvSpec("pointwise" if sep else "standard", sched[hi], sched[hi], 1, 1, 0, True)
        sle_blocks[hi] = SLEBlock(lo, hi, gate, Conv.build(out_spec, srng.child("out"), dt))
    rgb_spec = ConvSpec("standard", sched[cfg.output_resolution], 3, 3, 1, 1, True)
    to_rgb = Conv.build(rgb_spec, rng.child("to_rgb"), dt)
    return Generator(cfg, seed_weight, seed_norm, upblocks, sle_blocks, to_rgb)


def generator_forward(g: Generator, z: Tensor, bn_mode="training", update_running=True) -> Tensor:
    cfg = g.config
    if z.data.ndim != 2 or z.shape[1] != cfg.latent_dim:
        raise ShapeError(f"latent must be [N, {cfg.latent_dim}], got dims {z.dims}")
    n = z.shape[0]
    c4 = cfg.channel_schedule[4]
    h = ops.linear(z, g.seed_weight)
    h = ops.reshape(h, (n, 2 * c4, 4, 4))
    h = ops.glu(g.seed_norm(h, bn_mode, update_running))
    feats = {4: h}
    for r, blk in g.upblocks.items():
        h = blk(h, bn_mode, update_running)
        if r in g.sle_blocks:
            sle = g.sle_blocks[r]
            h = sle(feats[sle.low_res], h)
        feats[r] = h
    return ops.tanh(g.to_rgb(h))


@dataclass
class BlockCost:
    block: str
    resolution: int
    cost: CostReport
    activation_elems: int = 0  # per sample, summed over the block's intermediates


@dataclass
class ParamReport:
    rows: list[BlockCost] = field(default_factory=list)

    @property
    def total(self) -> CostReport:
        tot = CostReport(0, 0, 0)
        for r in self.rows:
            tot = tot + r.cost
        return tot

    def row(self, name: str) -> BlockCost:
        for r in self.rows:
            if r.block == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        lines = ["block,resolution,params,param_bytes,flops"]
        for r in self.rows:
            c = r.cost
            lines.append(f"{r.block},{r.resolution},{c.params},{c.param_bytes},{c.flops}")
        t = self.total
        lines.append(f"total,,{t.params},{t.param_bytes},{t.flops}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = ("block", "res", "params", "param_bytes", "flops")
        body = [(r.block, str(r.resolution), str(r.cost.params), str(r.cost.param_bytes),
                 str(r.cost.flops)) for r in self.rows]
        t = self.total
        body.append(("total", "", str(t.params), str(t.param_bytes), str(t.flops)))
        widths = [max(len(x[i]) for x in [head] + body) for i in range(5)]
        def fmt(row):
            cells = [row[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(row[1:], widths[1:])]
            return "  ".join(cells)

        out = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(row) for row in body]
        return "\n".join(out) + "\n"


def generator_param_report(g: Generator | GeneratorConfig) -> ParamReport:
    """Per-block parameter, byte and FLOP counts at each block's resolution.

    Works from the configuration alone, so it is cheap even for 256px models.
    Batch-norm gamma/beta are counted as parameters; normalization FLOPs are
    not. ``activation_elems`` feeds :func:`fpgan.metrics.memory_estimate`.
    """
    cfg = g.config if isinstance(g, Generator) else g
    sched, dt, order = cfg.channel_schedule, cfg.dtype, cfg.dsc_order
    width = dtype_width(dt)
    rep = ParamReport()
    c4, lat = sched[4], cfg.latent_dim
    seed_params = lat * 2 * c4 * 16 + 2 * 2 * c4
    seed_act = 3 * (2 * c4 * 16) + c4 * 16  # dense out, norm out, glu out
    rep.rows.append(BlockCost("seed", 4, CostReport(seed_params, seed_params * width,
                                                    2 * lat * 2 * c4 * 16), seed_act))
    for r in cfg.resolutions()[:-1]:
        hi = 2 * r
        spec = _conv_spec(cfg.variant.separable_upblocks, sched[r], 2 * sched[hi], 3, 1, False, order)
        c = _conv_cost(spec, hi, dt)
        norm = 2 * 2 * sched[hi]
        c = CostReport(c.params + norm, (c.params + norm) * width, c.flops)
        act = sched[r] * hi * hi  # upsampled input
        if spec.kind == "separable":
            act += (sched[r] if order == "depthwise_first" else 2 * sched[hi]) * hi * hi
        act += 2 * (2 * sched[hi]) * hi * hi + sched[hi] * hi * hi  # conv, norm, glu
        rep.rows.append(BlockCost(f"up{hi}", hi, c, act))
        for lo, h2 in cfg.sle_pairs:
            if h2 != hi:
                continue
            sep = cfg.variant.separable_sle
            gate = _conv_cost(_conv_spec(sep, sched[lo], sched[hi], SLE_POOL, 0, True, order),
                              SLE_POOL, dt)
            out_spec = ConvSpec("pointwise" if sep else "standard", sched[hi], sched[hi], 1, 1, 0, True)
            oc = _conv_cost(out_spec, 1, dt)
            sact = sched[lo] * SLE_POOL ** 2 + 4 * sched[hi] + sched[hi] * hi * hi
            if sep:
                sact += sched[lo]
            rep.rows.append(BlockCost(f"sle{hi}", hi, gate + oc, sact))
    rgb = ConvSpec("standard", sched[cfg.output_resolution], 3, 3, 1, 1, True)
    res = cfg.output_resolution
    rep.rows.append(BlockCost("to_rgb", res, _conv_cost(rgb, res, dt), 2 * 3 * res * res))
    return rep


def _conv_cost(spec: ConvSpec, hw: int, dtype) -> CostReport:
    return count_cost(spec, (hw, hw), dtype)
