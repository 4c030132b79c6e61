"""Command-line entry point: ``selffusion <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from .checkpoint import load_checkpoint
from .complexity import complexity
from .config import DECODERS, EXTRACTORS, ModelConfig
from .data import FAMILIES, default_specs, generate_dataset, load_dataset, resample
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import evaluate
from .gradcheck import run_gradcheck
from .io import atomic_write, read_points, write_pcf, write_points_csv, write_xyz
from .metrics import DEFAULT_TAU
from .model import forward_complete
from .training import TrainConfig, model_from_checkpoint, train

logger = logging.getLogger("selffusion")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}


def load_config_file(path) -> dict:
    """Parse a TOML config into ``TrainConfig.from_dict`` form.

    Top-level keys that name model fields are moved into the ``model`` table,
    so a flat ``branches = 2`` works as well as ``[model] branches = 2``.
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    model = dict(raw.pop("model", {}))
    for key in list(raw):
        if key in _MODEL_KEYS and key != "seed":
            model[key] = raw.pop(key)
    raw["model"] = model
    return raw


def build_train_config(args) -> TrainConfig:
    data = load_config_file(args.config) if args.config else {"model": {}}
    model = data["model"]
    for flag, key in (("branches", "branches"), ("fusion", "fusion_mode"), ("extractor", "extractor"),
                      ("decoder", "decoder")):
        value = getattr(args, flag, None)
        if value is not None:
            model[key] = value
    for key in ("epochs", "batch_size", "learning_rate", "checkpoint_every"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if getattr(args, "loss", None) is not None:
        data["loss"] = args.loss
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        return TrainConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file (key = value, optional [model] table)")
    p.add_argument("--branches", type=int, choices=(2, 3, 4))
    p.add_argument("--fusion", choices=("single", "double"))
    p.add_argument("--extractor", choices=EXTRACTORS)
    p.add_argument("--decoder", choices=DECODERS)


def _write_cloud(path: Path, points: np.ndarray) -> None:
    suffix = path.suffix.lower()
    if suffix == ".csv":
        write_points_csv(path, points)
    elif suffix in (".xyz", ".txt"):
        write_xyz(path, points)
    else:
        write_pcf(path, points)


def cmd_gen_data(args) -> int:
    specs = default_specs(args.count, n_gt=args.n_gt, seed=args.seed or 0, families=tuple(args.families))
    manifest = generate_dataset(specs, args.out, keep_ratio=args.keep_ratio)
    print(f"wrote {len(manifest['shapes'])} shapes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = build_train_config(args)
    samples = load_dataset(args.data, args.split, n_input=config.model.n_input)

    def report(epoch, loss):
        print(f"epoch {epoch:4d}  mean train CD {loss:.6g}", flush=True)

    result = train(config, samples, args.out, on_epoch=report)
    print(f"final mean train CD {result.log[-1][1]:.6g}; checkpoint in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data, args.split, n_input=ckpt.model_config.n_input)
    report = evaluate(ckpt, samples, args.out, tau=args.tau, bypass=args.bypass)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed or 0, args.seeds_per_op)
    print("\n".join(report.lines()))
    if args.out:
        atomic_write(Path(args.out), json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK if report.passed else 1


def cmd_complexity(args) -> int:
    config = build_train_config(args)
    report = complexity(config.model)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_complete(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    points = resample(read_points(args.input), model.config.n_input)
    cloud = forward_complete(model, points, start=args.start)
    _write_cloud(Path(args.out), cloud.points)
    print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def cmd_export_plot(args) -> int:
    write_points_csv(args.out, read_points(args.input))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selffusion", description="View-free point cloud completion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--n-gt", type=int, default=256)
    p.add_argument("--keep-ratio", type=float, default=0.5)
    p.add_argument("--families", nargs="+", default=list(FAMILIES), choices=FAMILIES)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=("train", "val", "all"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--loss", help="vanilla_cd or name[:key=value,...] of a registered loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="write CSV and JSON metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--bypass", action="store_true", help="score ground truth against itself")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds-per-op", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("complexity", help="parameter count and forward FLOPs")
    _add_model_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("complete", help="complete one partial cloud (.pcf or ASCII x y z)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output path; .csv and .xyz write text, anything else PCF1")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("export-plot", help="write a point file as x,y,z CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_export_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
