"""Command-line entry point: ``fpgan <subcommand> ...``.

Exit status: 0 success, 1 usage/config error, 2 data/format error,
3 training divergence. Errors go to stderr as ``fpgan: <class>: <message>``.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import TRAIN_REQUIRED, parse_config
from .conv import ConvSpec
from .errors import ConfigError, DataError, FpganError, UsageError
from .generator import build_generator
from .rng import Rng
from .tensor import Tensor
from .trainer import CHECKPOINT_NAME, TrainConfig, ablation_run, sample_images, train_loop

PROG = "fpgan"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog=PROG, description="Depthwise-separable GAN training and benchmarking at desk scale")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train one variant from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--resume", nargs="?", const="", default=None, metavar="CKPT",
                   help="resume from CKPT (default: out_dir/checkpoint.fpgn)")

    a = sub.add_parser("ablate", help="train several variants and tabulate them")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", default="baseline,fpg-g,fpg-dg")
    a.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    b = sub.add_parser("bench", help="time a single layer")
    bsub = b.add_subparsers(dest="target", metavar="TARGET", parser_class=_Parser)
    bsub.required = True
    bc = bsub.add_parser("conv", help="forward+backward time of one conv layer")
    bc.add_argument("--kind", required=True, choices=["standard", "separable", "depthwise", "pointwise"])
    bc.add_argument("--cin", type=_positive, required=True)
    bc.add_argument("--cout", type=_positive, required=True)
    bc.add_argument("--k", type=_positive, default=3)
    bc.add_argument("--hw", type=_positive, required=True)
    bc.add_argument("--batch", type=_positive, default=1)
    bc.add_argument("--iters", type=_positive, default=5)
    bc.add_argument("--seed", type=int, default=0)

    pr = sub.add_parser("params", help="per-block generator parameter table")
    pr.add_argument("--config", required=True)
    pr.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    pr.add_argument("--csv", action="store_true", help="emit CSV instead of a text table")

    g = sub.add_parser("generate", help="write samples from a checkpoint as PPM files")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--n", type=_positive, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="compare two image folders")
    e.add_argument("--metric", required=True, choices=["fid", "kid", "pr"])
    e.add_argument("--real", required=True)
    e.add_argument("--fake", required=True)
    e.add_argument("--extractor", default="random:0")
    e.add_argument("--k", type=_positive, default=3, help="neighbourhood size for pr")

    d = sub.add_parser("toy-data", help="copy the bundled 64-image 32px synthetic dataset")
    d.add_argument("--out", required=True)
    return p


def _cmd_train(args) -> int:
    cfg = parse_config(args.config, args.override, required=TRAIN_REQUIRED)
    resume = None
    if args.resume is not None:
        resume = args.resume or str(Path(cfg.out_dir) / CHECKPOINT_NAME)
        if not Path(resume).is_file():
            raise DataError(f"no checkpoint to resume from at {resume!r}")
    res = train_loop(cfg, resume=resume)
    print(f"steps={res.state.step} checkpoint={res.checkpoint_path} metrics={res.metrics_path}")
    if res.initial_fid is not None or res.final_fid is not None:
        print(f"initial_fid={res.initial_fid} final_fid={res.final_fid}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = parse_config(args.config, args.override, required=TRAIN_REQUIRED)
    variants = [v for v in args.variants.split(",") if v.strip()]
    table = ablation_run(cfg, variants)
    sys.stdout.write(table.to_text())
    print(f"csv={Path(cfg.out_dir) / 'ablation.csv'}")
    return 3 if any(r["status"] != "ok" for r in table.rows) else 0


def _cmd_bench(args) -> int:
    from .metrics import bench_layer
    k = 1 if args.kind == "pointwise" else args.k
    cout = args.cin if args.kind == "depthwise" else args.cout
    spec = ConvSpec(args.kind, args.cin, cout, k, 1, k // 2, False)
    rep = bench_layer(spec, (args.hw, args.hw), args.batch, max(args.iters, 3), args.seed)
    sys.stdout.write(rep.to_csv())
    return 0


def _cmd_params(args) -> int:
    from .generator import generator_param_report
    cfg = parse_config(args.config, args.override)
    rep = generator_param_report(cfg.generator_config())
    sys.stdout.write(rep.to_csv() if args.csv else rep.to_text())
    return 0


def _cmd_generate(args) -> int:
    from .data import save_ppm
    ckpt = load_checkpoint(args.ckpt)
    try:
        cfg = TrainConfig(**ckpt.config)
    except TypeError as exc:
        raise DataError(f"checkpoint config is unusable: {exc}") from None
    g = build_generator(cfg.generator_config())
    for name, t in list(g.named_parameters()) + list(g.named_buffers()):
        src = ckpt.tensors.get(f"g/{name}")
        if src is None or src.shape != t.data.shape:
            raise DataError(f"checkpoint has no usable tensor g/{name}")
        t.data[...] = src
    if args.n < 2:
        raise ConfigError("generate needs --n >= 2 (sampling uses batch statistics)")
    rng = Rng(args.seed).child("generate")
    z = Tensor(rng.normal(args.n * cfg.latent_dim).reshape(args.n, cfg.latent_dim).astype(cfg.dtype))
    imgs = sample_images(g, z)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(imgs):
        save_ppm(img, out / f"sample_{i:04d}.ppm")
    print(f"wrote {len(imgs)} images to {out}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import (FeatureExtractor, fid, images_from_dir, infer_resolution, kid,
                          precision_recall, stats_from_features)
    ext = FeatureExtractor.parse(args.extractor)
    res = infer_resolution(args.real)
    real = ext(images_from_dir(args.real, res))
    fake = ext(images_from_dir(args.fake, res))
    if args.metric == "fid":
        print(f"fid,{fid(stats_from_features(real), stats_from_features(fake))!r}")
    elif args.metric == "kid":
        print(f"kid,{kid(real, fake)!r}")
    else:
        p, r = precision_recall(real, fake, args.k)
        print(f"precision,{p!r}")
        print(f"recall,{r!r}")
    return 0


def _cmd_toy_data(args) -> int:
    from .data import bundled_toy_dir
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(bundled_toy_dir().glob("*.ppm"))
    for f in files:
        shutil.copyfile(f, out / f.name)
    print(f"wrote {len(files)} images to {out}")
    return 0


COMMANDS = {"train": _cmd_train, "ablate": _cmd_ablate, "bench": _cmd_bench,
            "params": _cmd_params, "generate": _cmd_generate, "eval": _cmd_eval,
            "toy-data": _cmd_toy_data}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        # non-finite values are caught explicitly and reported as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.command](args)
    except FpganError as exc:
        err = exc
    except OSError as exc:
        err = DataError(str(exc))
    print(f"{PROG}: {err.prefix}: {err}", file=sys.stderr)
    return err.exit_code


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
