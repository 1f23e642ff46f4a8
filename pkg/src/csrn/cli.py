"""Command-line entry point: train / encode / decode / eval / params / gradcheck.

A text config file (``key = value`` lines, ``#`` comments) may supply any
flag's value; explicit flags win. ``CSRN_THREADS`` caps the numeric libraries'
internal parallelism and defaults to 1 for deterministic results.
"""

from __future__ import annotations

import os


def _cap_threads() -> None:
    threads = os.environ.get("CSRN_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, threads)


_cap_threads()  # must precede the first numpy import

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

ALLOWED_RATIOS = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5)

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _ratio(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    for r in ALLOWED_RATIOS:
        if abs(value - r) < 1e-9:
            return r
    raise argparse.ArgumentTypeError(
        f"ratio {text} unsupported; the measurement grouping rule defines the "
        f"ratios {ALLOWED_RATIOS} (one 0.1-slice group per tenth, or a single "
        "smaller group below 0.1)"
    )


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="csrn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, _Parser] = {}

    def subparser(name: str, **kwargs) -> _Parser:
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", help="key=value config file; flags override it")
        registry[name] = p
        return p

    p = subparser("train", help="train a model on a dataset directory")
    p.add_argument("--ratio", type=_ratio, required=True)
    p.add_argument("--data", required=True, help="dataset root with train/ and val/")
    p.add_argument("--out", required=True, help="output directory for checkpoints/logs")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--variant", choices=("progressive", "simple", "rb", "no-fcm"),
                   default="progressive")

    p = subparser("encode", help="compress one image into a measurement file")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--in", dest="input", required=True, help="input image")
    p.add_argument("--out", required=True, help="output measurement file")

    p = subparser("decode", help="reconstruct an image from a measurement file")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--in", dest="input", required=True, help="input measurement file")
    p.add_argument("--out", required=True, help="output PNG path")

    p = subparser("eval", help="PSNR/SSIM report over a test directory")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="directory of test images")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--identity", action="store_true",
                   help="bypass the model and score ground truth against itself")
    p.add_argument("--quantize", action="store_true",
                   help="round reconstructions to 8-bit levels before scoring")

    p = subparser("params", help="parameter-count breakdown for one ratio")
    p.add_argument("--ratio", type=_ratio, required=True)
    p.add_argument("--variant", choices=("progressive", "simple", "rb", "no-fcm"),
                   default="progressive")

    p = subparser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)

    return parser, registry


def _load_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _apply_config_file(argv: list[str], registry) -> None:
    if "--config" not in argv:
        return
    path = argv[argv.index("--config") + 1] if argv.index("--config") + 1 < len(argv) else None
    if path is None:
        raise UsageError("--config needs a file path")
    command = argv[0] if argv and not argv[0].startswith("-") else None
    if command not in registry:
        raise UsageError("--config must follow a subcommand")
    sub = registry[command]
    known = {
        opt.lstrip("-"): action
        for action in sub._actions
        for opt in action.option_strings
        if opt.startswith("--")
    }
    for key, value in _load_config_file(path).items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r} for command {command!r}")
        action = known[key]
        action.required = False  # a config value satisfies a required flag
        if isinstance(action, (argparse._StoreTrueAction,)):
            sub.set_defaults(**{action.dest: value.lower() in ("1", "true", "yes")})
        else:
            converter = action.type or str
            try:
                sub.set_defaults(**{action.dest: converter(value)})
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"bad value for config key {key!r}: {exc}")


def _print_resolved(args: argparse.Namespace) -> None:
    print("# resolved configuration")
    for key in sorted(vars(args)):
        if key in ("command", "config"):
            continue
        print(f"{key}={getattr(args, key)}")


def _cmd_train(args) -> int:
    from .model import CsrnConfig
    from .train import TrainConfig, train, variant_config

    model_cfg = variant_config(CsrnConfig(ratio=args.ratio), args.variant)
    cfg = TrainConfig(model=model_cfg, data_root=args.data, out_dir=args.out,
                      epochs=args.epochs, batch_size=args.batch, seed=args.seed)
    _, log, best = train(cfg)
    print(f"best epoch: {log.best_epoch}")
    print(f"checkpoint: {best}")
    return 0


def _cmd_encode(args) -> int:
    from . import codec, data

    model, _ = codec.load_checkpoint(args.model)
    luma = data.rgb_to_luma(data.load_image(args.input))
    codec.encode(model, luma).write(args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_decode(args) -> int:
    from . import codec

    model, _ = codec.load_checkpoint(args.model)
    mfile = codec.MeasurementFile.read(args.input)
    img = codec.decode(model, mfile)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8), mode="L").save(args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from . import codec
    from .train import evaluate

    model, _ = codec.load_checkpoint(args.model)
    report = evaluate(model, args.data, out_csv=args.out,
                      identity=args.identity, quantize=args.quantize)
    print(f"mean psnr: {report.mean_psnr:.4f} dB  mean ssim: {report.mean_ssim:.6f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_params(args) -> int:
    from .model import CsrnConfig, count_params
    from .train import variant_config

    cfg = variant_config(CsrnConfig(ratio=args.ratio), args.variant)
    counts = count_params(cfg)
    for key in ("sampling", "initial", "residual", "reconstruction_total"):
        print(f"{key}={counts[key]}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import full_suite

    failed = False
    for name, report in full_suite(seed=args.seed):
        status = "PASS" if report.passed else "FAIL"
        print(f"{name}: {status} (max rel err {report.max_rel_error:.3e}, tol {report.tol:.0e})")
        failed = failed or not report.passed
    return RUNTIME_EXIT if failed else 0


_COMMANDS = {
    "train": _cmd_train,
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "eval": _cmd_eval,
    "params": _cmd_params,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()
    try:
        _apply_config_file(argv, registry)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE_EXIT
    _print_resolved(args)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
