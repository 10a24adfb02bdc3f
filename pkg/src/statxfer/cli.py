"""Command line entry point.

    statxfer run --config exp.cfg
    statxfer inspect-tree --model-dir results/models
    statxfer project --input augmented.csv --output projection.csv
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import load_config
from .data import read_embedding_rows
from .errors import ConfigError, DataError, StatXferError
from .harness import emit_report, run_experiment, save_artifacts
from .hierarchy import SuperclassTree
from .numerics import load_model
from .projection import project_2d

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("statxfer")


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.output_dir:
        config.experiment.output_dir = args.output_dir
    out = Path(config.experiment.output_dir)
    if not out.is_absolute():
        out = Path(args.config).parent / out
    e = config.experiment
    artifacts: dict = {}
    report = run_experiment(config, artifacts)
    written = emit_report(report, out, artifacts, figures=e.emit_figures, projection=e.emit_projection)
    if e.save_models:
        try:
            save_artifacts(artifacts, out)
        except OSError as exc:
            raise DataError(f"cannot write models under {out}: {exc}") from exc
    for agg in report.aggregates:
        print(f"{agg['method']:>16s}  n={agg['n']}  acc={100 * agg['mean']:.2f} +- {100 * agg['std']:.2f}")
    for p in written:
        log.info("wrote %s", p)
    return EXIT_OK


def _describe_model(path: Path) -> str:
    net, role, noise_dim = load_model(path)
    dims = [net.layers[0].weight.shape[1]] + [layer.weight.shape[0] for layer in net.layers]
    extra = f" d_z={noise_dim}" if noise_dim is not None else ""
    return f"{path.name}: role={role.decode()} layers={'-'.join(map(str, dims))}{extra}"


def _cmd_inspect(args) -> int:
    root = Path(args.model_dir)
    if not root.is_dir():
        raise DataError(f"model directory not found: {root}")
    trees = sorted(root.rglob("tree.json"))
    models = sorted(root.rglob("*.paug"))
    if not trees and not models:
        raise DataError(f"no tree.json or .paug files under {root}")
    for path in trees:
        try:
            tree = SuperclassTree.load(path)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"{path}: unreadable tree ({exc})") from exc
        print(f"{path.relative_to(root)}: {tree.n_sup} superclasses, "
              f"{len(tree.assignment)} classes, sizes {tree.member_counts()}")
        for s in tree.superclasses:
            print(f"  [{s.id}] members={s.members} |mu|={np.linalg.norm(s.center):.4f} "
                  f"mean sigma={s.deviation.mean():.4f}")
    for path in models:
        print(_describe_model(path))
    return EXIT_OK


def _cmd_project(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise DataError(f"input not found: {path}")
    with path.open(encoding="utf-8") as fh:
        first = next((ln for ln in fh if ln.strip()), "")
    last = first.rstrip("\n").split(",")[-1].strip()
    try:
        float(last)
        extra = 0
    except ValueError:
        extra = 1  # trailing provenance column, as in augmented.csv
    feats, labels, extras = read_embedding_rows(path, extra_columns=extra)
    prov = [e[0] for e in extras] if extra else None
    proj = project_2d(feats, labels, prov)
    try:
        proj.to_csv(args.output)
    except OSError as exc:
        raise DataError(f"cannot write {args.output}: {exc}") from exc
    print(f"projected {len(labels)} rows; captured variance {proj.variances[0]:.6g}, {proj.variances[1]:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="statxfer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", help="override experiment.output_dir")
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("inspect-tree", help="summarize saved superclass trees and models")
    p.add_argument("--model-dir", required=True)
    p.set_defaults(func=_cmd_inspect)
    p = sub.add_parser("project", help="2-D principal-component projection of a feature CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_project)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors count as configuration errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StatXferError, ArithmeticError, AssertionError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
