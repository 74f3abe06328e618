"""Projected multi-scale discriminator at desk scale.

A frozen, randomly initialised feature network yields a four-level
pyramid; frozen random 1x1 projections mix channels at every level; one
small trainable conv stack per level emits a logit map. The frozen parts
are built from untracked tensors, so gradients flow through them to the
image but never accumulate on their weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

from . import ops
from .conv import Conv, ConvSpec, CostReport, count_cost
from .errors import ConfigError, ContractError, ShapeError
from .generator import Variant
from .rng import Rng
from .tensor import Tensor

FEATURE_CHANNELS = (16, 32, 64, 64)
PROJ_CHANNELS = (32, 32, 64, 64)
D_SLOPE = 0.2


def _frozen(conv: Conv) -> Conv:
    for _, t in conv.named_parameters():
        t.requires_grad = False
    return conv


@dataclass
class FeatureNetwork:
    resolution: int
    seed: int
    stages: list[Conv]

    frozen = True

    def named_tensors(self, prefix: str = "feat.") -> Iterator[tuple[str, Tensor]]:
        for i, st in enumerate(self.stages):
            yield from st.named_parameters(f"{prefix}stage{i}.")

    def __call__(self, x: Tensor) -> list[Tensor]:
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (self.resolution,) * 2:
            raise ShapeError(
                f"feature network built for [N, 3, {self.resolution}, {self.resolution}], got {x.dims}")
        feats = []
        h = x
        for st in self.stages:
            h = ops.leaky_relu(st(h), D_SLOPE)
            feats.append(h)
        return feats


@dataclass
class ProjectionSet:
    projections: list[Conv]

    def named_tensors(self, prefix: str = "proj.") -> Iterator[tuple[str, Tensor]]:
        for i, p in enumerate(self.projections):
            yield from p.named_parameters(f"{prefix}scale{i}.")


def build_feature_network(resolution: int, seed: int,
                          channels: Sequence[int] = FEATURE_CHANNELS,
                          proj_channels: Sequence[int] = PROJ_CHANNELS,
                          dtype="float32") -> tuple[FeatureNetwork, ProjectionSet]:
    """Frozen 4-stage stride-2 (4x4 kernel) extractor plus per-scale random projections."""
    if resolution < 32:
        raise ConfigError(f"feature network needs resolution >= 32, got {resolution}")
    rng = Rng(seed).child("frozen")
    stages, cin = [], 3
    for i, c in enumerate(channels):
        spec = ConvSpec("standard", cin, c, 4, 2, 1, True)
        conv = Conv.build(spec, rng.child(f"stage{i}"), dtype)
        # small random biases so a blank image still has a distinctive response
        conv.bias.data[...] = 0.1 * rng.child(f"bias{i}").normal(c)
        stages.append(_frozen(conv))
        cin = c
    projs = []
    for i, (c, pc) in enumerate(zip(channels, proj_channels)):
        spec = ConvSpec("pointwise", c, pc, 1, 1, 0, False)
        projs.append(_frozen(Conv.build(spec, rng.child(f"proj{i}"), dtype)))
    return FeatureNetwork(resolution, seed, stages), ProjectionSet(projs)


def extract_and_project(f: FeatureNetwork, proj: ProjectionSet, x: Tensor) -> list[Tensor]:
    feats = f(x)
    return [p(h) for p, h in zip(proj.projections, feats)]


@dataclass
class ScaleDiscriminator:
    """Three conv + leaky ReLU layers (stride 2 while the map is >= 4px), then a 1x1 logit conv."""

    layers: list[Conv]
    head: Conv

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}conv{i}.")
        yield from self.head.named_parameters(prefix + "head.")

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.layers:
            h = ops.leaky_relu(layer(h), D_SLOPE)
        return self.head(h)


def _scale_specs(in_ch: int, size: int, width: int, separable: bool,
                 order: str) -> list[tuple[ConvSpec, int]]:
    specs, c, s = [], in_ch, size
    kind = "separable" if separable else "standard"
    for _ in range(3):
        # 4x4/stride-2/pad-1 halves even sizes exactly; tiny maps keep 3x3/stride-1
        k, stride = (4, 2) if s >= 4 else (3, 1)
        specs.append((ConvSpec(kind, c, width, k, stride, 1, True, order), s))
        c, s = width, s // stride
    specs.append((ConvSpec("standard", c, 1, 1, 1, 0, True), s))
    return specs


@dataclass
class ProjectedDiscriminator:
    feature: FeatureNetwork
    projections: ProjectionSet
    heads: list[ScaleDiscriminator]
    variant: Variant
    specs: list[list[tuple[ConvSpec, int]]]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, h in enumerate(self.heads):
            yield from h.named_parameters(f"scale{i}.")

    def named_frozen(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.feature.named_tensors()
        yield from self.projections.named_tensors()

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_params(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def cost(self, dtype="float32") -> CostReport:
        tot = CostReport(0, 0, 0)
        for scale in self.specs:
            for spec, size in scale:
                tot = tot + count_cost(spec, (size, size), dtype)
        return tot

    def __call__(self, x: Tensor) -> list[Tensor]:
        pyramid = extract_and_project(self.feature, self.projections, x)
        return discriminator_forward(self.heads, pyramid)


def build_discriminator(resolution: int, variant, seed: int, width: int = 64,
                        dsc_order: str = "depthwise_first", dtype="float32",
                        frozen_seed: int | None = None) -> ProjectedDiscriminator:
    variant = Variant.parse(variant)
    feat, proj = build_feature_network(resolution, seed if frozen_seed is None else frozen_seed,
                                       dtype=dtype)
    rng = Rng(seed).child("weights_d")
    heads, all_specs = [], []
    for i, pc in enumerate(PROJ_CHANNELS):
        size = resolution >> (i + 1)
        specs = _scale_specs(pc, size, width, variant.separable_discriminator, dsc_order)
        srng = rng.child(f"scale{i}")
        layers = [Conv.build(sp, srng.child(f"conv{j}"), dtype) for j, (sp, _) in enumerate(specs[:-1])]
        head = Conv.build(specs[-1][0], srng.child("head"), dtype)
        heads.append(ScaleDiscriminator(layers, head))
        all_specs.append(specs)
    return ProjectedDiscriminator(feat, proj, heads, variant, all_specs)


def discriminator_forward(d: Sequence[ScaleDiscriminator], pyramid: Sequence[Tensor]) -> list[Tensor]:
    if len(d) != len(pyramid):
        raise ContractError(f"{len(pyramid)} feature scales for {len(d)} discriminators")
    return [head(feat) for head, feat in zip(d, pyramid)]


def hinge_d_loss(real_logits: Sequence[Tensor], fake_logits: Sequence[Tensor]) -> Tensor:
    """Sum over scales of mean(relu(1 - real)) + mean(relu(1 + fake))."""
    if not real_logits or len(real_logits) != len(fake_logits):
        raise ContractError("hinge_d_loss needs equal, non-empty lists of logits")
    total = None
    for r, f in zip(real_logits, fake_logits):
        term = ops.mean(ops.relu(1.0 - r)) + ops.mean(ops.relu(f + 1.0))
        total = term if total is None else total + term
    return total


def hinge_g_loss(fake_logits: Sequence[Tensor]) -> Tensor:
    """Sum over scales of -mean(fake)."""
    if not fake_logits:
        raise ContractError("hinge_g_loss needs at least one scale")
    total = None
    for f in fake_logits:
        term = -ops.mean(f)
        total = term if total is None else total + term
    return total
