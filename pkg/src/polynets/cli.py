"""Command-line entry point: ``polynets {train,verify,degree}``."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .blocks import build_network, parameter_count, symbolic_degree
from .config import (ConfigError, ExperimentConfig, dump_config, dtype_of, init_spec, load_config, network_spec,
                     train_config)
from .data import Dataset, FormatError, data_root, load_cifar10, load_idx, subsample_per_class, synth_dataset
from .train import TrainingDiverged, component_seeds, fit, save_checkpoint, write_metrics_csv
from .verify import SUITES, SuiteRow

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

EXIT_CODES_HELP = """exit codes:
  0  success
  1  a verification oracle failed
  2  configuration error (unreadable file, unknown key, bad value)
  3  dataset error (missing path, malformed file)
  4  numeric abort (training produced NaN/Inf)

environment:
  POLYNETS_DATA_ROOT  dataset directory used when neither --data-root nor data.path is set
"""

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

logger = logging.getLogger("polynets")


class DataError(RuntimeError):
    pass


def load_datasets(cfg: ExperimentConfig, seed: int) -> "tuple[Dataset, Dataset]":
    """Train/test datasets for the configuration (raises DataError)."""
    data = cfg.data
    dtype = dtype_of(cfg)
    if data.kind in ("xor", "moons"):
        train = synth_dataset(data.kind, data.n, data.noise, seed)
        test = synth_dataset(data.kind, data.test_n, data.noise, seed + 1, split="test")
    else:
        if not data.path:
            raise DataError("data.path is not set (use --data-root or POLYNETS_DATA_ROOT)")
        root = Path(data.path)
        if not root.is_dir():
            raise DataError(f"data.path: directory {root} does not exist")
        try:
            if data.kind == "cifar10":
                train, test = load_cifar10(root, dtype=dtype)
            else:
                train = load_idx(*(root / f for f in IDX_FILES["train"]), split="train", dtype=dtype)
                test = load_idx(*(root / f for f in IDX_FILES["test"]), split="test",
                                class_count=train.class_count, dtype=dtype)
        except (FormatError, OSError) as exc:
            raise DataError(f"data.path: {exc}") from exc
    if data.limit_per_class:
        try:
            train = subsample_per_class(train, data.limit_per_class, seed)
        except ValueError as exc:
            raise DataError(f"data.limit_per_class: {exc}") from exc
    train.images = np.asarray(train.images, dtype=dtype)
    test.images = np.asarray(test.images, dtype=dtype)
    return train, test


def _apply_overrides(cfg: ExperimentConfig, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "out", None):
        cfg.output.dir = args.out
    if getattr(args, "limit_per_class", None) is not None:
        cfg.data.limit_per_class = args.limit_per_class
    root = data_root(getattr(args, "data_root", None))
    if getattr(args, "data_root", None) or (not cfg.data.path and root):
        cfg.data.path = root


def run_train(args) -> int:
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seeds = component_seeds(cfg.train.seed)
    try:
        train, test = load_datasets(cfg, seeds["data"])
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if cfg.data.train_size and cfg.data.train_size != len(train):
        print(f"error: data.train_size = {cfg.data.train_size} but the loaded training set has {len(train)}",
              file=sys.stderr)
        return EXIT_DATA
    cfg.data.train_size = len(train)
    in_dim = train.images.shape[1]
    try:
        spec = network_spec(cfg, in_dim, train.class_count)
        network = build_network(spec, init_spec(cfg), seed=seeds["init"], dtype=dtype_of(cfg))
    except ValueError as exc:
        print(f"error: network: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(cfg))
    try:
        rows = fit(network, train, train_config(cfg), test=test, eval_every=cfg.train.eval_every)
    except TrainingDiverged as exc:
        print(f"error: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_metrics_csv(out / "metrics.csv", rows)
    save_checkpoint(out / "checkpoint.npz", network)
    last = rows[-1] if rows else None
    if args.format == "csv":
        print("key,value")
        print(f"train_size,{len(train)}")
        print(f"parameters,{parameter_count(network)}")
        if last:
            print(f"final_train_acc,{last.train_acc!r}")
            print(f"final_test_acc,{last.test_acc!r}")
        print(f"output,{out}")
    else:
        print(f"trained {len(rows)} epochs on {len(train)} samples; parameters {parameter_count(network)}")
        if last:
            print(f"final train_acc {last.train_acc:.4f} test_acc {last.test_acc:.4f}")
        print(f"outputs written to {out}")
    return EXIT_OK


def _print_rows(rows: List[SuiteRow], fmt: str) -> None:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["suite", "case", "expected", "measured", "result"])
        for r in rows:
            writer.writerow([r.suite, r.case, r.expected, repr(float(r.measured)), "pass" if r.passed else "fail"])
        sys.stdout.write(buf.getvalue())
        return
    width = max(len(r.case) for r in rows)
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.suite:<11} {r.case:<{width}}  expected {r.expected:<14} measured {float(r.measured):.3g}")


def run_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    rows: List[SuiteRow] = []
    if args.inject_fault:
        with ag.inject_fault(args.inject_fault):
            for name in names:
                rows.extend(SUITES[name](args.seed))
    else:
        for name in names:
            rows.extend(SUITES[name](args.seed))
    _print_rows(rows, args.format)
    return EXIT_OK if all(r.passed for r in rows) else EXIT_VERIFY_FAILED


def _input_shape(cfg: ExperimentConfig) -> "tuple[int, int]":
    if cfg.data.kind in ("xor", "moons"):
        return 2, 2
    if cfg.data.kind == "cifar10":
        return 3, 10
    return 1, 10


def run_degree_report(args) -> int:
    try:
        cfg = load_config(args.config)
        in_dim, classes = _input_shape(cfg)
        spec = network_spec(cfg, in_dim, classes)
        network = build_network(spec, init_spec(cfg), seed=0)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = symbolic_degree(spec)
    count = parameter_count(network)
    if args.format == "csv":
        print("block,degree")
        for i, d in enumerate(report.per_block):
            print(f"{i},{d}")
        print(f"total,{report.total}")
        print(f"parameters,{count}")
    else:
        print("per-block: " + ", ".join(str(d) for d in report.per_block))
        print(f"total degree: {report.total}")
        print(f"parameters: {count}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polynets", description="Polynomial network experiments and oracles.",
                                     epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch metrics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a config file", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-root")
    p.add_argument("--out")
    p.add_argument("--limit-per-class", type=int)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=run_train)

    p = sub.add_parser("verify", help="run the verification oracles", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--suite", choices=("grad", "degree", "equivalence", "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", choices=("hadamard_sign", "matmul_sign"),
                   help="corrupt a backward rule (negative control)")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=run_verify)

    p = sub.add_parser("degree", help="print degree report and parameter count", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=run_degree_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
