"""Command-line interface: ``magn degrade|train|restore|eval|gradcheck|info``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
``MAGN_THREADS`` caps the number of images processed concurrently.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("MAGN_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    n = _workers()
    if n == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _need_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} directory {p} does not exist")
    return p


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} {p} does not exist")
    return p


# subcommands ---------------------------------------------------------------------


def cmd_degrade(args) -> int:
    from .degrade import DegradeSpec, degrade, derive_seed
    from .imageio import bit_depth, list_pngs, read_png, write_png

    src = _need_dir(args.input, "input")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = DegradeSpec(args.kind, args.sigma, args.seed)
    files = list_pngs(src)
    if not files:
        raise DataError(f"no PNG files in {src}")

    def work(path: Path):
        try:
            img = read_png(path)
            # per-image stream keyed by the file name, independent of listing order
            rng = derive_seed(args.seed, zlib.crc32(path.name.encode()))
            bad = degrade(img, spec, rng)
            write_png(out / path.name, bad, bits=args.bits or bit_depth(path))
        except Exception as exc:
            return path.name, f"error: {exc}"
        return path.name, f"ok {img.shape[1]}x{img.shape[0]}x{img.shape[2]}"

    results = _map(work, files)
    for name, msg in results:
        print(f"{name}\t{msg}")
    failed = sum(msg.startswith("error") for _, msg in results)
    return EXIT_DATA if failed == len(results) else EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .configfile import load_configs
    from .model import ModelConfig
    from .plotting import loss_curve
    from .trainer import TrainConfig, train

    data = _need_dir(args.data, "data")
    if args.config:
        model, tcfg = load_configs(_need_file(args.config, "config file"))
    else:
        model, tcfg = ModelConfig(), TrainConfig()
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    resume = load_checkpoint(_need_file(args.resume, "checkpoint")) if args.resume else None
    result = train(model, tcfg, data, args.out, resume=resume)
    if result.losses:
        loss_curve(result.losses, Path(args.out) / "loss.png")
        print(f"trained {len(result.losses)} steps; final loss {result.losses[-1]:.6g}")
    for path in result.checkpoints:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_restore(args) -> int:
    from .checkpoint import load_checkpoint
    from .imageio import bit_depth, list_pngs, read_png, to_channels, write_png
    from .model import restore_image

    ckpt = load_checkpoint(_need_file(args.ckpt, "checkpoint"))
    src = _need_dir(args.input, "input")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = list_pngs(src)
    if not files:
        raise DataError(f"no PNG files in {src}")

    def work(path: Path):
        t0 = time.perf_counter()
        img = to_channels(read_png(path), ckpt.model.in_channels)
        res = restore_image(img, ckpt.params, ckpt.model, tile=args.tile, overlap=args.overlap)
        if not np.all(np.isfinite(res)):
            raise FloatingPointError(f"{path.name}: restored image has non-finite values")
        write_png(out / path.name, res, bits=args.bits or bit_depth(path))
        return path.name, time.perf_counter() - t0

    for name, secs in _map(work, files):
        print(f"{name}\t{secs:.2f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .imageio import list_pngs, read_png
    from .metrics import QualityReport
    from .plotting import quality_bars

    clean_dir = _need_dir(args.clean, "clean")
    test_dir = _need_dir(args.test, "test")
    clean = {p.name: p for p in list_pngs(clean_dir)}
    test = {p.name: p for p in list_pngs(test_dir)}
    report = QualityReport()
    report.skipped = sorted(set(clean) ^ set(test))
    pairs = sorted(set(clean) & set(test))

    def work(name):
        a, b = read_png(clean[name]), read_png(test[name])
        if a.shape != b.shape:
            return name, None
        r = QualityReport()
        r.add(name, a, b)
        return name, r.rows[0]

    for name, row in _map(work, pairs):
        if row is None:
            report.skipped.append(name)
        else:
            report.rows.append(row)
    for line in report.lines():
        print(line)
    if args.report:
        report.write_csv(args.report)
        if report.rows:
            quality_bars(report, Path(args.report).with_suffix(".png"))
    return EXIT_OK if report.rows else EXIT_DATA


def cmd_gradcheck(args) -> int:
    from .configfile import load_configs
    from .gradcheck import MICRO, run_gradcheck

    config = MICRO
    if args.config:
        config, _ = load_configs(_need_file(args.config, "config file"))
        if config.precision != "float64":
            config = replace(config, precision="float64")
    report = run_gradcheck(config, seed=args.seed, size=args.size, corrupt=args.corrupt)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_info(args) -> int:
    from .checkpoint import load_checkpoint
    from .configfile import dump, load_configs
    from .model import ModelConfig, count_parameters

    if args.ckpt:
        ckpt = load_checkpoint(_need_file(args.ckpt, "checkpoint"))
        model, lines = ckpt.model, [f"step={ckpt.step}"]
    elif args.config:
        model, _ = load_configs(_need_file(args.config, "config file"))
        lines = []
    else:
        model, lines = ModelConfig(), []
    for line in dump(model) + lines:
        print(line)
    print(f"parameters={count_parameters(model)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="magn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("degrade", help="add Gaussian noise or Bayer-mosaic a folder of PNGs")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--kind", choices=["gaussian", "mosaic"], default="gaussian")
    d.add_argument("--sigma", type=float, default=25.0, help="noise std on the 0-255 scale")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--bits", type=int, choices=[8, 16], help="output bit depth (default: same as input)")
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="train on a folder of clean PNGs")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key=value file of model and training settings")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="override the total step count")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="restore a folder of degraded PNGs")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--tile", type=int, default=31)
    r.add_argument("--overlap", type=int)
    r.add_argument("--bits", type=int, choices=[8, 16], help="output bit depth (default: same as input)")
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", help="PSNR/SSIM of test images against clean ones")
    e.add_argument("--clean", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--report", help="CSV output; a bar chart is written next to it")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of all parameter gradients")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=15)
    g.add_argument("--corrupt", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("info", help="print a configuration and its parameter count")
    i.add_argument("--ckpt")
    i.add_argument("--config")
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .patching import GeometryError
    from .trainer import DatasetError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
        format="%(message)s",
    )
    try:
        return args.func(args)
    except (DataError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"magn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, OverflowError) as exc:
        print(f"magn {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GeometryError, ValueError) as exc:
        print(f"magn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
