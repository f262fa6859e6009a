"""Command line entry point: ``alquery {synth,run,eval,guidelines}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import guidelines, harness
from .core import load_dataset, save_dataset
from .synthgen import SpecInfeasible, SynthSpec, generate_dataset

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _synth(args) -> int:
    try:
        spec = SynthSpec.from_json(args.config) if args.config else SynthSpec()
    except (OSError, ValueError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ds = generate_dataset(spec)
    except SpecInfeasible as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = save_dataset(ds, args.out)
    print(json.dumps({"dataset": str(out), "train": len(ds.train), "test": len(ds.test)}))
    return 0


def _run(args) -> int:
    try:
        cfg, setting = harness.load_config(args.config, seed=args.seed)
        if not (Path(cfg.dataset) / "manifest.json").exists():
            raise harness.ConfigError(f"no dataset at {cfg.dataset}")
    except harness.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        res = harness.run_experiment(cfg, args.out, setting=setting)
    except harness.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - surfaced as runtime failure
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    last = res.rows[-1]
    print(json.dumps({"out": str(res.out_dir), "final_dice": last["mean_dice"], "budget": last["budget_patches"]}))
    return 0


def _eval(args) -> int:
    try:
        report = harness.evaluate_runs(args.runs, args.out)
    except harness.InconsistentRuns as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"report": str(Path(args.out) / "report.json"), "methods": report["methods"],
                      "notes": report["notes"]}))
    return 0


def _guidelines(args) -> int:
    try:
        ds = load_dataset(args.labels)
    except (OSError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    labels = ds.pool_labels + [lab for _, lab in ds.test] if args.all_splits else ds.pool_labels
    try:
        size = guidelines.patch_size_from_labels(labels, args.classes)
    except guidelines.ClassAbsent as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    weights = {str(c): args.weight for c in range(1, ds.n_classes + 1)}
    for item in args.class_weight or []:
        c, w = item.split("=")
        weights[c] = int(w)
    n, total = guidelines.query_budget(weights, args.cycles)
    print(json.dumps({"patch_size": list(size), "query_size": n, "total_budget": total,
                      "cycles": args.cycles, "class_weights": weights}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alquery", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="SynthSpec JSON (defaults to the desk-scale spec)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_synth)

    r = sub.add_parser("run", help="run one active-learning experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_run)

    e = sub.add_parser("eval", help="evaluate a directory of runs")
    e.add_argument("--runs", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=_eval)

    g = sub.add_parser("guidelines", help="recommend patch size and query budget")
    g.add_argument("--labels", required=True, help="dataset directory")
    g.add_argument("--classes", type=int, nargs="+", help="restrict patch sizing to these class ids")
    g.add_argument("--weight", type=int, default=50, choices=(50, 100), help="patches per class")
    g.add_argument("--class-weight", action="append", metavar="CLASS=N", help="per-class override")
    g.add_argument("--cycles", type=int, default=guidelines.DEFAULT_CYCLES)
    g.add_argument("--all-splits", action="store_true", help="include test images in the statistics")
    g.set_defaults(func=_guidelines)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
