"""Command-line runner: ``persist-sgd run`` and ``persist-sgd plot``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib.metadata import PackageNotFoundError, version
from itertools import product
from pathlib import Path

from .data import PersistencyPolicy, generate_blobs, load_csv, load_idx, split
from .errors import ConfigError, DataError, DivergenceError
from .nn import DEFAULT_ARCH, parse_arch
from .optim import LRPolicy, OptimizerConfig
from .report import plot, write_metrics_csv
from .trainer import ExperimentConfig, Trainer

log = logging.getLogger("persist_sgd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
SEED_ENV = "PERSIST_SGD_SEED"

# Desk-scale stand-in for the image benchmark: 10 classes, 500 per class, 32 features.
BLOBS_DEFAULT = (10, 500, 32, 0.25)

DEFAULTS = {
    "dataset": "blobs",
    "arch": DEFAULT_ARCH,
    "batch_size": [32],
    "persistency": [1],
    "lr": 0.001,
    "momentum": 0.5,
    "adaptive_lr": False,
    "epochs": 100,
    "seed": 0,
    "reshuffle": True,
    "eval_every": 1,
    "train_fraction": 0.8,
    "out": "runs",
    "jobs": 1,
}


def tool_version() -> str:
    try:
        return f"persist-sgd {version('artifact')}"
    except PackageNotFoundError:
        return "persist-sgd (unknown version)"


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"values must be integers >= 1, got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="persist-sgd", description="Minibatch-persistency SGD experiments.")
    parser.add_argument("--version", action="version", version=tool_version())
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration or a (batch size x K) sweep")
    run.add_argument("--config", type=Path, help="JSON config or run manifest; flags override it")
    run.add_argument("--dataset", help="blobs[:C,PER_CLASS,D,SPREAD] | csv:PATH | idx:IMAGES,LABELS")
    run.add_argument("--arch", help=f"layer string, classifier appended (default {DEFAULT_ARCH!r})")
    run.add_argument("--batch-size", type=_int_list, help="minibatch size m, or a list")
    run.add_argument("--persistency", type=_int_list, help="persistency K, or a list such as 1,2,5")
    run.add_argument("--lr", type=float, help="base learning rate (default 0.001)")
    run.add_argument("--momentum", type=float, help="momentum coefficient (default 0.5)")
    run.add_argument("--adaptive-lr", action="store_const", const=True, help="use k*lr on the k-th reuse")
    run.add_argument("--epochs", type=int)
    run.add_argument("--seed", type=int, help=f"falls back to ${SEED_ENV}, then 0")
    run.add_argument("--no-reshuffle", dest="reshuffle", action="store_const", const=False)
    run.add_argument("--eval-every", type=int)
    run.add_argument("--train-fraction", type=float)
    run.add_argument("--out", help="output directory (default ./runs)")
    run.add_argument("--jobs", type=int, help="concurrent sweep members")
    run.add_argument("-v", "--verbose", action="store_true")

    pl = sub.add_parser("plot", help="render accuracy/loss vs time/epoch SVG panels")
    pl.add_argument("csvs", nargs="*", type=Path)
    pl.add_argument("--out", type=Path, default=Path("."))
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults < $PERSIST_SGD_SEED < config file < flags."""
    cfg = dict(DEFAULTS)
    if os.environ.get(SEED_ENV):
        try:
            cfg["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"${SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    if args.config is not None:
        try:
            loaded = json.loads(args.config.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load config {args.config}: {exc}") from None
        loaded = loaded.get("config", loaded)
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys in {args.config}: {sorted(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for key in ("batch_size", "persistency"):
        value = cfg[key]
        try:
            cfg[key] = _int_list(",".join(map(str, value)) if isinstance(value, list) else str(value))
        except argparse.ArgumentTypeError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    if cfg["epochs"] < 1 or cfg["eval_every"] < 1 or cfg["jobs"] < 1:
        raise ConfigError("--epochs, --eval-every and --jobs must be >= 1")
    return cfg


def load_dataset(source: str, seed: int):
    """Return ``(dataset, descriptor)`` for a ``--dataset`` value."""
    kind, _, arg = source.partition(":")
    if kind == "blobs":
        params = list(BLOBS_DEFAULT)
        if arg:
            parts = arg.split(",")
            if len(parts) != 4:
                raise ConfigError(f"blobs takes C,PER_CLASS,D,SPREAD, got {arg!r}")
            try:
                params = [int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])]
            except ValueError:
                raise ConfigError(f"bad blobs parameters {arg!r}") from None
        ds = generate_blobs(*params, seed=seed)
    elif kind == "csv" and arg:
        ds = load_csv(arg)
    elif kind == "idx" and arg.count(",") == 1:
        images, labels = arg.split(",")
        ds = load_idx(images, labels)
    else:
        raise ConfigError(f"unknown dataset {source!r}")
    descriptor = {
        "source": source,
        "N": len(ds),
        "C": ds.num_classes,
        "input_shape": list(ds.input_shape),
    }
    return ds, descriptor


def _job_stem(m: int, k: int, adaptive: bool) -> str:
    return f"m{m}_K{k}" + ("_adaptive" if adaptive else "")


def run_job(job: dict) -> dict:
    """Train a single (batch size, K) combination and write its CSV and manifest."""
    ds, descriptor = load_dataset(job["dataset"], job["seed"])
    train_set, test_set = split(ds, job["train_fraction"], job["seed"])
    descriptor.update(train_size=len(train_set), test_size=len(test_set))
    arch = parse_arch(job["arch"], ds.input_shape, ds.num_classes)
    config = ExperimentConfig(
        policy=PersistencyPolicy(job["persistency"], job["batch_size"], job["reshuffle"]),
        architecture=arch,
        optimizer=OptimizerConfig(
            job["lr"], job["momentum"], LRPolicy.ADAPTIVE if job["adaptive_lr"] else LRPolicy.CONSTANT
        ),
        epochs=job["epochs"],
        seed=job["seed"],
        eval_every=job["eval_every"],
    )
    out = Path(job["out"])
    out.mkdir(parents=True, exist_ok=True)
    stem = _job_stem(job["batch_size"], job["persistency"], job["adaptive_lr"])
    metrics_path = out / f"metrics_{stem}.csv"
    manifest_path = out / f"manifest_{stem}.json"
    records = list(Trainer(config, train_set, test_set).run())
    write_metrics_csv(records, metrics_path)
    manifest = {
        "tool_version": tool_version(),
        "config": job,
        "architecture": [spec.describe() for spec in arch],
        "dataset": descriptor,
        "artifacts": {"metrics": str(metrics_path), "manifest": str(manifest_path)},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def expand_jobs(cfg: dict) -> list[dict]:
    jobs = []
    for m, k in product(cfg["batch_size"], cfg["persistency"]):
        job = {key: value for key, value in cfg.items() if key != "jobs"}
        job.update(batch_size=m, persistency=k)
        jobs.append(job)
    return jobs


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    jobs = expand_jobs(cfg)
    if cfg["jobs"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg["jobs"], len(jobs))) as pool:
            manifests = list(pool.map(run_job, jobs))
    else:
        manifests = [run_job(job) for job in jobs]
    for manifest in manifests:
        print(manifest["artifacts"]["metrics"])
    return EXIT_OK


def cmd_plot(args) -> int:
    if not args.csvs:
        raise ConfigError("plot needs at least one metrics CSV")
    for path in plot(args.csvs, args.out):
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        return cmd_run(args) if args.command == "run" else cmd_plot(args)
    except DataError as exc:
        print(f"persist-sgd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"persist-sgd: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"persist-sgd: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
