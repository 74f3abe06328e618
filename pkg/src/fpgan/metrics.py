"""Sample-quality metrics and cost measurement.

The feature extractor here is a frozen random conv net, not Inception-V3.
FID/KID values it produces are only comparable with each other (same
extractor seed, same resolution) and never with published numbers.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .checkpoint import load_tensors, save_tensors
from .conv import Conv, ConvSpec, count_cost, dtype_width
from .errors import ConfigError, ContractError, InsufficientSamplesError, NumericError, ShapeError
from .generator import Generator, GeneratorConfig, generator_param_report
from .rng import Rng
from .tensor import Tensor, backward

EXTRACTOR_CHANNELS = (16, 32, 64)


class FeatureExtractor:
    """Frozen strided conv net + global average pool -> ``d`` features per image."""

    def __init__(self, stages: list[Conv], source: str):
        self.stages = stages
        self.source = source

    @property
    def dim(self) -> int:
        return self.stages[-1].spec.out_channels

    @classmethod
    def seeded_random(cls, seed: int, channels: Sequence[int] = EXTRACTOR_CHANNELS) -> "FeatureExtractor":
        rng = Rng(seed).child("extractor")
        stages, cin = [], 3
        for i, c in enumerate(channels):
            conv = Conv.build(ConvSpec("standard", cin, c, 4, 2, 1, True), rng.child(i), "float64")
            for _, t in conv.named_parameters():
                t.requires_grad = False
            stages.append(conv)
            cin = c
        return cls(stages, f"random:{seed}")

    @classmethod
    def from_checkpoint(cls, path) -> "FeatureExtractor":
        """Load ``stage{i}.weight`` / ``stage{i}.bias`` tensors from an FPGN file."""
        t = load_tensors(path)
        stages, i = [], 0
        while f"stage{i}.weight" in t:
            w = t[f"stage{i}.weight"].astype(np.float64)
            b = t.get(f"stage{i}.bias")
            spec = ConvSpec("standard", w.shape[1], w.shape[0], w.shape[2], 2, 1, b is not None)
            stages.append(Conv(spec, weight=Tensor(w),
                               bias=None if b is None else Tensor(b.astype(np.float64))))
            i += 1
        if not stages:
            raise ConfigError(f"{path}: no stage0.weight tensor for a feature extractor")
        return cls(stages, f"ckpt:{path}")

    @classmethod
    def parse(cls, text: str) -> "FeatureExtractor":
        kind, _, arg = text.partition(":")
        if kind == "random":
            try:
                return cls.seeded_random(int(arg))
            except ValueError:
                raise ConfigError(f"bad extractor seed in {text!r}") from None
        if kind == "ckpt" and arg:
            return cls.from_checkpoint(arg)
        raise ConfigError(f"extractor must be random:SEED or ckpt:PATH, got {text!r}")

    def __call__(self, images, chunk: int = 64) -> np.ndarray:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ShapeError(f"extractor expects [N, 3, R, R] images, got {list(arr.shape)}")
        out = []
        for s in range(0, arr.shape[0], chunk):
            h = Tensor(arr[s:s + chunk].astype(np.float64))
            for st in self.stages:
                h = ops.leaky_relu(st(h), 0.2)
            out.append(h.data.mean(axis=(2, 3)))
        return np.concatenate(out, axis=0)


@dataclass
class GaussianStats:
    n: int
    mu: np.ndarray
    sigma: np.ndarray

    def save(self, path) -> None:
        save_tensors(path, {"mu": self.mu, "sigma": self.sigma,
                            "n": np.array([self.n], dtype=np.float64)})

    @classmethod
    def load(cls, path) -> "GaussianStats":
        t = load_tensors(path)
        return cls(int(t["n"][0]), t["mu"], t["sigma"])


def stats_from_features(feats: np.ndarray) -> GaussianStats:
    feats = np.asarray(feats, dtype=np.float64)
    n = feats.shape[0]
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 samples for covariance, got {n}")
    # shift by the first sample: exact zeros for repeated rows, better conditioning
    shifted = feats - feats[0]
    m = shifted.mean(axis=0)
    xc = shifted - m
    sigma = xc.T @ xc / (n - 1)
    return GaussianStats(n, feats[0] + m, (sigma + sigma.T) / 2)


def feature_stats(images, extractor: FeatureExtractor) -> GaussianStats:
    n = (images.data if isinstance(images, Tensor) else np.asarray(images)).shape[0]
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 images, got {n}")
    return stats_from_features(extractor(images))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    w = np.where(w > 1e-10, w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance between two Gaussians.

    tr((S_a S_b)^1/2) is taken as the sum of square roots of the eigenvalues
    of the symmetric matrix S_a^1/2 S_b S_a^1/2, which has the same spectrum.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ContractError(f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    if not (np.all(np.isfinite(a.sigma)) and np.all(np.isfinite(b.sigma))):
        raise NumericError("covariance contains non-finite values")
    try:
        ra = _psd_sqrt(a.sigma)
        m = ra @ b.sigma @ ra
        w = np.linalg.eigvalsh((m + m.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from None
    tr_covmean = float(np.sqrt(np.where(w > 1e-10, w, 0.0)).sum())
    diff = a.mu - b.mu
    val = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_covmean)
    if np.isnan(val):
        raise NumericError("FID evaluated to NaN")
    return max(val, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel (single full-set estimate)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise InsufficientSamplesError(f"KID needs >= 2 samples per set, got {m} and {n}")
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    # the estimator is symmetric; evaluating in a canonical operand order
    # makes kid(A, B) and kid(B, A) bitwise equal too
    if (m, a.tobytes()) > (n, b.tobytes()):
        a, b, m, n = b, a, n, m
    kaa = polynomial_kernel(a, a)
    kbb = polynomial_kernel(b, b)
    kab = polynomial_kernel(a, b)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def pairwise_distances(x: np.ndarray, y: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty((x.shape[0], y.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s:s + chunk, None, :] - y[None, :, :]
        out[s:s + chunk] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point."""
    d = pairwise_distances(x, x)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def _coverage(points: np.ndarray, manifold: np.ndarray, k: int) -> float:
    radii = knn_radii(manifold, k)
    d = pairwise_distances(points, manifold)
    return float(np.mean(np.any(d <= radii[None, :], axis=1)))


def precision_recall(real_feats, fake_feats, k: int = 3) -> tuple[float, float]:
    """k-NN manifold precision (fakes inside the real manifold) and recall."""
    real = np.asarray(real_feats, dtype=np.float64)
    fake = np.asarray(fake_feats, dtype=np.float64)
    if k < 1 or real.shape[0] < k + 1 or fake.shape[0] < k + 1:
        raise ContractError(
            f"k={k} needs at least {k + 1} points per set, got {real.shape[0]} and {fake.shape[0]}")
    return _coverage(fake, real, k), _coverage(real, fake, k)


@dataclass
class BenchReport:
    label: str
    wall_ns_median: int
    wall_ns_min: int
    flops: int
    params: int
    bytes_touched: int
    batch: int
    iters: int

    def to_csv(self) -> str:
        return ("label,wall_ns_median,wall_ns_min,flops,params,bytes_touched,batch,iters\n"
                f"{self.label},{self.wall_ns_median},{self.wall_ns_min},{self.flops},"
                f"{self.params},{self.bytes_touched},{self.batch},{self.iters}\n")


def bench_layer(spec: ConvSpec, input_hw: tuple[int, int], batch: int, iters: int,
                seed: int = 0, dtype="float32") -> BenchReport:
    """Median/min wall time of forward+backward for one conv layer.

    ``flops`` is the per-image analytic count from :func:`count_cost`, so it
    is independent of the measurement. Run on an otherwise idle machine.
    """
    if iters < 3:
        raise ContractError("bench_layer needs iters >= 3")
    rng = Rng(seed).child("bench")
    conv = Conv.build(spec, rng.child("w"), dtype)
    h, w = input_hw
    x = Tensor(rng.child("x").normal(batch * spec.in_channels * h * w)
               .reshape(batch, spec.in_channels, h, w).astype(dtype), requires_grad=True)
    params = [t for _, t in conv.named_parameters()]

    def run():
        out = conv(x)
        backward(ops.sum(out))

    run()  # warm-up
    times = []
    for _ in range(iters):
        for p in params + [x]:
            p.grad = None
        t0 = time.perf_counter_ns()
        run()
        times.append(time.perf_counter_ns() - t0)
    cost = count_cost(spec, input_hw, dtype)
    ho, wo = spec.output_hw(input_hw)
    width = dtype_width(dtype)
    inter = 0
    if spec.kind == "separable":
        c_mid = spec.in_channels if spec.dsc_order == "depthwise_first" else spec.out_channels
        mh, mw = (ho, wo) if spec.dsc_order == "depthwise_first" else (h, w)
        inter = c_mid * mh * mw
    elems = batch * (spec.in_channels * h * w + spec.out_channels * ho * wo + inter)
    return BenchReport(f"{spec.kind}:{spec.in_channels}->{spec.out_channels}:k{spec.kernel_size}:{h}x{w}",
                       int(statistics.median(times)), int(min(times)), cost.flops, cost.params,
                       elems * width + cost.param_bytes, batch, iters)


@dataclass
class MemoryEstimate:
    params: int
    gradients: int
    optimizer_state: int
    activations: int

    @property
    def total(self) -> int:
        return self.params + self.gradients + self.optimizer_state + self.activations


def memory_estimate(model: Generator | GeneratorConfig, batch: int, resolution: int) -> MemoryEstimate:
    """Analytic training-memory breakdown (bytes) for a generator.

    Activations are the per-sample intermediate sizes of every forward op,
    summed over the graph and multiplied by ``batch``.
    """
    cfg = model.config if isinstance(model, Generator) else model
    if resolution != cfg.output_resolution:
        raise ContractError(f"model is built for {cfg.output_resolution}px, asked for {resolution}px")
    if batch < 1:
        raise ContractError("batch must be >= 1")
    rep = generator_param_report(cfg)
    width = dtype_width(cfg.dtype)
    p = rep.total.param_bytes
    act = (batch * cfg.latent_dim + batch * sum(r.activation_elems for r in rep.rows)) * width
    return MemoryEstimate(p, p, 2 * p, act)


def images_from_dir(directory, resolution: int | None = None) -> np.ndarray:
    from .data import load_dataset
    if resolution is None:
        resolution = infer_resolution(directory)
    return load_dataset(directory, resolution, Rng(0), np.float64).images


def infer_resolution(directory) -> int:
    from .data import decode_ppm, load_ften
    from .errors import DatasetError
    for p in sorted(Path(directory).iterdir()) if Path(directory).is_dir() else []:
        if p.suffix == ".ppm":
            return min(decode_ppm(p.read_bytes()).shape[1:])
        if p.suffix == ".ften":
            return min(load_ften(p).shape[-2:])
    raise DatasetError(f"no images found in {str(directory)!r}")
