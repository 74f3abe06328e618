"""Deterministic adversarial training, checkpointing and variant ablations.

Randomness is keyed rather than streamed: the latents of step ``t`` come
from ``Rng(seed).child("latents").child(t)`` and the batch of step ``t`` from
the seeded permutation of its epoch. A run resumed from any checkpoint
therefore replays exactly the same inputs as an uninterrupted one.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, load_dataset
from .discriminator import ProjectedDiscriminator, build_discriminator, hinge_d_loss, hinge_g_loss
from .errors import ConfigError, DataError, TrainingDivergenceError
from .generator import Generator, GeneratorConfig, Variant, build_generator, generator_param_report
from .metrics import FeatureExtractor, feature_stats, fid
from .optim import Adam, AdamHyper
from .rng import Rng
from .tensor import Tensor, backward, frozen

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "loss_g", "loss_d", "step_ms", "fid", "params_g", "param_bytes_g"]
CHECKPOINT_NAME = "checkpoint.fpgn"
RUN_PATH_KEYS = ("data_dir", "out_dir")


@dataclass
class TrainConfig:
    resolution: int = 32
    latent_dim: int = 64
    base_channels: int = 16
    variant: Variant = Variant.BASELINE
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.99
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    eval_every: int = 100
    dsc_order: str = "depthwise_first"
    data_dir: str | None = None
    out_dir: str | None = None
    disc_width: int = 64
    eval_samples: int = 64
    extractor_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("need lr > 0 and 0 <= beta1, beta2 < 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.steps < 0 or self.eval_every < 0:
            raise ConfigError("steps and eval_every must be non-negative")

    @property
    def total_steps(self) -> int:
        return self.steps

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(latent_dim=self.latent_dim, output_resolution=self.resolution,
                               base_channels=self.base_channels, variant=self.variant,
                               seed=self.seed, dsc_order=self.dsc_order, dtype=self.dtype)

    def hyper(self) -> AdamHyper:
        return AdamHyper(self.lr, self.beta1, self.beta2, self.adam_eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.cli_name
        return d


@dataclass
class TrainState:
    cfg: TrainConfig
    generator: Generator
    disc: ProjectedDiscriminator
    opt_g: Adam
    opt_d: Adam
    step: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        root = Rng(cfg.seed)
        g = build_generator(cfg.generator_config(), root.child("weights_g"))
        d = build_discriminator(cfg.resolution, cfg.variant, cfg.seed, cfg.disc_width,
                                cfg.dsc_order, cfg.dtype)
        return cls(cfg, g, d, Adam(g.parameters(), cfg.hyper()), Adam(d.parameters(), cfg.hyper()))

    def named_state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, t in self.generator.named_parameters():
            out[f"g/{name}"] = t.data
        for name, t in self.generator.named_buffers():
            out[f"g/{name}"] = t.data
        for name, t in self.disc.named_parameters():
            out[f"d/{name}"] = t.data
        for name, t in self.disc.named_frozen():
            out[f"frozen/{name}"] = t.data
        for tag, opt, named in (("opt_g", self.opt_g, self.generator.named_parameters()),
                                ("opt_d", self.opt_d, self.disc.named_parameters())):
            for (name, _), m, v in zip(named, opt.state.m, opt.state.v):
                out[f"{tag}/m/{name}"] = m
                out[f"{tag}/v/{name}"] = v
            out[f"{tag}/t"] = np.array([opt.state.t], dtype=np.float64)
        return out

    def to_checkpoint(self) -> Checkpoint:
        # paths say where a run lived, not what it is; leaving them out keeps
        # identical runs byte-identical wherever they were written
        echo = {k: v for k, v in self.cfg.to_dict().items() if k not in RUN_PATH_KEYS}
        return Checkpoint(self.named_state(), echo, self.step)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: TrainConfig | None = None) -> "TrainState":
        cfg = cfg or TrainConfig(**ckpt.config)
        st = cls.fresh(cfg)
        target = st.named_state()
        missing = sorted(set(target) - set(ckpt.tensors))
        if missing:
            raise DataError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
        for name, arr in target.items():
            src = ckpt.tensors[name]
            if src.shape != arr.shape:
                raise DataError(f"checkpoint tensor {name} has dims {list(src.shape)}, "
                                f"model expects {list(arr.shape)}")
            arr[...] = src
        st.opt_g.state.t = int(ckpt.tensors["opt_g/t"][0])
        st.opt_d.state.t = int(ckpt.tensors["opt_d/t"][0])
        st.step = ckpt.step
        return st


def sample_latents(seed: int, step: int, phase: str, n: int, dim: int, dtype) -> Tensor:
    rng = Rng(seed).child("latents").child(step).child(phase)
    return Tensor(rng.normal(n * dim).reshape(n, dim).astype(dtype))


def _check_finite(value: float, step: int, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingDivergenceError(step, f"{what} = {value}")


def train_step(g: Generator, d: ProjectedDiscriminator, opt_g: Adam, opt_d: Adam, batch: Tensor,
               step: int, cfg: TrainConfig) -> tuple[float, float]:
    """One discriminator update on detached fakes, then one generator update."""
    n = batch.shape[0]
    # D phase
    z = sample_latents(cfg.seed, step, "d", n, cfg.latent_dim, cfg.dtype)
    with frozen(g.parameters()):
        fake = ops.detach(g(z))
    opt_d.zero_grad()
    loss_d = hinge_d_loss(d(batch), d(fake))
    ld = loss_d.item()
    _check_finite(ld, step, "loss_d")
    backward(loss_d)
    opt_d.step()
    # G phase
    z = sample_latents(cfg.seed, step, "g", n, cfg.latent_dim, cfg.dtype)
    opt_g.zero_grad()
    with frozen(d.parameters()):
        loss_g = hinge_g_loss(d(g(z)))
        lg = loss_g.item()
        _check_finite(lg, step, "loss_g")
        backward(loss_g)
    opt_g.step()
    return ld, lg


class FidProbe:
    """Toy FID of a fixed latent set against precomputed real statistics."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig):
        self.extractor = FeatureExtractor.seeded_random(cfg.extractor_seed)
        self.real = feature_stats(dataset.images, self.extractor)
        rng = Rng(cfg.seed).child("eval")
        n = max(cfg.eval_samples, 2)
        self.z = Tensor(rng.normal(n * cfg.latent_dim).reshape(n, cfg.latent_dim).astype(cfg.dtype))

    def __call__(self, g: Generator) -> float:
        imgs = sample_images(g, self.z)
        return fid(self.real, feature_stats(imgs, self.extractor))


def sample_images(g: Generator, z: Tensor) -> np.ndarray:
    """Generate with batch statistics, leaving running statistics untouched."""
    return g(z, bn_mode="training", update_running=False).data


@dataclass
class TrainResult:
    state: TrainState
    rows: list[dict] = field(default_factory=list)
    initial_fid: float | None = None
    final_fid: float | None = None
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None

    @property
    def mean_step_ms(self) -> float:
        return float(np.mean([r["step_ms"] for r in self.rows])) if self.rows else float("nan")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train_loop(cfg: TrainConfig, dataset: Dataset | None = None, resume: str | Path | None = None,
               stop_at: int | None = None) -> TrainResult:
    """Train to ``cfg.steps`` (or ``stop_at``), logging every step to metrics.csv.

    Writes ``config.json`` (resolved config), ``metrics.csv``, ``summary.json``
    and ``checkpoint.fpgn`` into ``cfg.out_dir``. With ``resume`` the state is
    restored from that checkpoint and the CSV is appended to.
    """
    if cfg.out_dir is None:
        raise ConfigError("out_dir is required for training")
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write to out_dir {str(out)!r}: {exc}") from None
    if dataset is None:
        if cfg.data_dir is None:
            raise ConfigError("data_dir is required for training")
        dataset = load_dataset(cfg.data_dir, cfg.resolution, Rng(cfg.seed).child("data_shuffle"))
    if resume is not None:
        state = TrainState.from_checkpoint(load_checkpoint(resume), cfg)
    else:
        state = TrainState.fresh(cfg)
    last = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    probe = FidProbe(dataset, cfg) if cfg.eval_every > 0 else None
    result = TrainResult(state)
    rep = generator_param_report(state.generator)
    params_g, bytes_g = rep.total.params, rep.total.param_bytes
    if probe is not None and state.step == 0:
        result.initial_fid = probe(state.generator)
    metrics_path = out / "metrics.csv"
    append = resume is not None and metrics_path.exists()
    with open(metrics_path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(METRICS_HEADER)
        while state.step < last:
            t = state.step
            batch = dataset.batch_at(t, cfg.batch_size)
            t0 = time.perf_counter_ns()
            try:
                ld, lg = train_step(state.generator, state.disc, state.opt_g, state.opt_d,
                                    batch, t, cfg)
            except TrainingDivergenceError:
                fh.flush()
                raise
            ms = (time.perf_counter_ns() - t0) / 1e6
            state.step = t + 1
            score = None
            if probe is not None and (state.step % cfg.eval_every == 0 or state.step == cfg.steps):
                score = probe(state.generator)
                result.final_fid = score
            row = {"step": state.step, "loss_g": lg, "loss_d": ld, "step_ms": ms, "fid": score,
                   "params_g": params_g, "param_bytes_g": bytes_g}
            result.rows.append(row)
            writer.writerow([_fmt(row[k]) for k in METRICS_HEADER])
    ckpt_path = out / CHECKPOINT_NAME
    save_checkpoint(ckpt_path, state.to_checkpoint())
    result.checkpoint_path, result.metrics_path = ckpt_path, metrics_path
    summary = {"step": state.step, "initial_fid": result.initial_fid, "final_fid": result.final_fid,
               "mean_step_ms": result.mean_step_ms if result.rows else None,
               "params_g": params_g, "param_bytes_g": bytes_g,
               "params_d": state.disc.num_params()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return result


def time_train_steps(cfg: TrainConfig, dataset: Dataset, steps: int, warmup: int = 2) -> list[float]:
    """Wall time (ms) of ``steps`` train steps after ``warmup`` untimed ones."""
    state = TrainState.fresh(cfg)
    times = []
    for t in range(warmup + steps):
        batch = dataset.batch_at(t, cfg.batch_size)
        t0 = time.perf_counter_ns()
        train_step(state.generator, state.disc, state.opt_g, state.opt_d, batch, t, cfg)
        if t >= warmup:
            times.append((time.perf_counter_ns() - t0) / 1e6)
    return times


ABLATION_HEADER = ["variant", "params_g", "params_d", "mean_step_ms", "initial_fid", "final_fid",
                   "status"]


@dataclass
class AblationTable:
    rows: list[dict]

    def to_csv(self) -> str:
        lines = [",".join(ABLATION_HEADER)]
        for r in self.rows:
            lines.append(",".join(_fmt(r[k]) for k in ABLATION_HEADER))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        def cell(v):
            return f"{v:.3f}" if isinstance(v, float) else ("" if v is None else str(v))

        body = [[cell(r[k]) for k in ABLATION_HEADER] for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(ABLATION_HEADER, *body)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(ABLATION_HEADER, widths))]
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
        return "\n".join(lines) + "\n"


def ablation_run(base_cfg: TrainConfig, variants, dataset: Dataset | None = None) -> AblationTable:
    """Train each variant from the same seed and tabulate size, speed and toy FID."""
    variants = [Variant.parse(v) for v in variants]
    if len(variants) < 2:
        raise ConfigError("an ablation needs at least two variants")
    if base_cfg.out_dir is None:
        raise ConfigError("out_dir is required for ablation")
    if dataset is None:
        if base_cfg.data_dir is None:
            raise ConfigError("data_dir is required for ablation")
        dataset = load_dataset(base_cfg.data_dir, base_cfg.resolution,
                               Rng(base_cfg.seed).child("data_shuffle"))
    rows = []
    for v in variants:
        cfg = TrainConfig(**{**asdict(base_cfg), "variant": v,
                             "out_dir": str(Path(base_cfg.out_dir) / v.cli_name)})
        row = {"variant": v.cli_name, "params_g": generator_param_report(cfg.generator_config()).total.params,
               "params_d": None, "mean_step_ms": None, "initial_fid": None, "final_fid": None,
               "status": "ok"}
        try:
            res = train_loop(cfg, dataset)
            row.update(params_d=res.state.disc.num_params(), mean_step_ms=res.mean_step_ms,
                       initial_fid=res.initial_fid, final_fid=res.final_fid)
        except TrainingDivergenceError as exc:
            log.warning("variant %s diverged: %s", v.cli_name, exc)
            row["status"] = f"diverged at step {exc.step}"
        rows.append(row)
    table = AblationTable(rows)
    Path(base_cfg.out_dir, "ablation.csv").write_text(table.to_csv())
    return table
