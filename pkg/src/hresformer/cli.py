"""Command-line entry point: ``hresformer <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error (bad flags, missing or invalid config),
2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _shape(text: str) -> tuple:
    try:
        dims = tuple(int(t) for t in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError("shape must be D,H,W")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hresformer", description="Hybrid 2D/3D transformer segmentation on phantoms.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help, config=True):
        s = sub.add_parser(name, help=help)
        if config:
            s.add_argument("--config", help="flat 'key = value' config file")
        s.add_argument("--seed", type=int, help="overrides every seed in the config")
        return s

    s = cmd("gen-data", "generate the phantom train/val/test splits")
    s.add_argument("--out", required=True, help="dataset directory")

    s = cmd("train", "train a model")
    s.add_argument("--data", help="dataset manifest (default: <data_dir>/manifest.txt)")
    s.add_argument("--out", help="run directory (default: config out_dir)")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--stop-after", type=int, help="stop after N epochs of this invocation")

    s = cmd("eval", "per-case DSC table for one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="dataset manifest")
    s.add_argument("--split", default="test")
    s.add_argument("--two-d", action="store_true", help="score the 2D branch alone")
    s.add_argument("--out", help="CSV path (default: stdout)")

    s = cmd("infer", "segment one HVOL volume")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="HVOL volume")
    s.add_argument("--out", required=True, help="HVOL output with predicted labels")

    cmd("gradcheck", "finite-difference gradient suite", config=False)
    cmd("count-params", "number of trainable scalars")
    s = cmd("count-flops", "forward FLOPs for one volume")
    s.add_argument("--shape", type=_shape, help="D,H,W (default: config volume_shape)")
    s.add_argument("--by-scope", action="store_true", help="also list per-layer counts")
    return p


def _settings(args):
    from .train import ConfigError, load_config

    if not args.config:
        raise UsageError(f"hresformer {args.command}: --config is required")
    try:
        return load_config(args.config, args.seed)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}") from None


def _manifest(args, settings) -> Path:
    return Path(args.data) if args.data else Path(settings.train.data_dir) / "manifest.txt"


def _load_model(settings, path):
    from .checkpoint import load_checkpoint, restore
    from .model import HResFormer

    model = HResFormer(settings.model)
    restore(model, load_checkpoint(path))
    return model


def run_gen_data(args) -> int:
    from .phantom import make_split, write_dataset

    s = _settings(args)
    t = s.train
    split = make_split(s.phantom, t.n_train, t.n_val, t.n_test, t.seed)
    manifest = write_dataset(s.phantom, split, args.out)
    print(manifest)
    return 0


def run_train(args) -> int:
    from .train import train

    s = _settings(args)
    out = args.out or s.train.out_dir
    start = time.perf_counter()
    _, rows = train(s, _manifest(args, s), out, resume=args.resume, stop_after=args.stop_after)
    best = max((float(r[3]) for r in rows), default=float("nan"))
    print(f"epochs={len(rows)} best_val_mean_dsc={best:.4f} seconds={time.perf_counter() - start:.1f}")
    return 0


def run_eval(args) -> int:
    from .phantom import read_manifest
    from .train import evaluate, format_dsc_csv, load_cases, write_dsc_csv

    s = _settings(args)
    splits = read_manifest(_manifest(args, s))
    if args.split not in splits:
        raise UsageError(f"split {args.split!r} not in manifest (have {sorted(splits)})")
    model = _load_model(s, args.checkpoint)
    k = s.model.num_classes
    rows = evaluate(model, load_cases(splits[args.split]), k, two_d=args.two_d)
    if args.out:
        write_dsc_csv(args.out, rows, k)
    else:
        sys.stdout.write(format_dsc_csv(rows, k))
    return 0


def run_infer(args) -> int:
    from .model import infer
    from .phantom import LabeledVolume, load_volume, normalize, save_volume

    s = _settings(args)
    vol = load_volume(args.input)
    model = _load_model(s, args.checkpoint)
    labels = infer(model, normalize(vol.intensity))
    save_volume(args.out, LabeledVolume(vol.intensity, labels, s.model.num_classes, vol.case_seed))
    counts = np.bincount(labels.ravel(), minlength=s.model.num_classes)
    print(" ".join(f"class{c}={int(n)}" for c, n in enumerate(counts)))
    return 0


def run_gradcheck(args) -> int:
    from .gradcheck import block_suite, tolerance

    seeds = [args.seed] if args.seed is not None else [0, 1, 2]
    worst: dict = {}
    for seed in seeds:
        for block, err in block_suite(seed).items():
            worst[block] = max(err, worst.get(block, 0.0))
    ok = True
    for block, err in worst.items():
        passed = err <= tolerance(block)
        ok &= passed
        print(f"{block:18s} {err:.3e} {'ok' if passed else 'FAIL'} (tol {tolerance(block):.0e})")
    return 0 if ok else 2


def run_count_params(args) -> int:
    from .model import HResFormer, count_params

    print(count_params(HResFormer(_settings(args).model)))
    return 0


def run_count_flops(args) -> int:
    from .model import HResFormer, measure_flops

    s = _settings(args)
    shape = (s.model.in_channels,) + tuple(args.shape or s.phantom.shape)
    counter = measure_flops(HResFormer(s.model), shape)
    if args.by_scope:
        for (scope, tag), n in counter.entries.items():
            print(f"{scope} {tag} {n}")
    print(counter.total)
    return 0


COMMANDS = {
    "gen-data": run_gen_data, "train": run_train, "eval": run_eval, "infer": run_infer,
    "gradcheck": run_gradcheck, "count-params": run_count_params, "count-flops": run_count_flops,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help().rstrip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
