"""Run several query methods over several seeds on a synthetic dataset, then evaluate.

    python scripts/desk_benchmark.py --out bench --methods random clasp_pe --seeds 0 1 2 3
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from alquery.core import save_dataset
from alquery.harness import config_from_dict, evaluate_runs, run_experiment
from alquery.synthgen import SynthSpec, class_fractions, generate_dataset


def rare_class_voxels(run_dir: Path) -> int:
    meta = json.loads((run_dir / "run.json").read_text())
    return int(meta["fg_voxels_per_class"][-1][-1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="bench")
    p.add_argument("--synth", help="SynthSpec JSON; defaults to the desk-scale spec")
    p.add_argument("--methods", nargs="+", default=["random", "clasp_pe"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--query-size", type=int)
    p.add_argument("--ensemble-size", type=int)
    args = p.parse_args(argv)

    out = Path(args.out)
    data = out / "data"
    if not (data / "manifest.json").exists():
        spec = SynthSpec.from_json(args.synth) if args.synth else SynthSpec()
        ds = generate_dataset(spec)
        save_dataset(ds, data)
        fr = class_fractions(ds.train)
        print("dataset", data, "class fractions", np.round(fr, 4).tolist())

    extra = {}
    if args.query_size:
        extra["query_size"] = args.query_size
    if args.ensemble_size:
        extra["ensemble_size"] = args.ensemble_size
    per_method: dict[str, list[tuple[float, int]]] = {}
    for m in args.methods:
        for seed in args.seeds:
            cfg, setting = config_from_dict({"dataset": str(data), "method": m, **extra}, seed=seed)
            run_dir = out / "runs" / m / f"s{seed}"
            t0 = time.perf_counter()
            res = run_experiment(cfg, run_dir, setting=setting)
            dt = time.perf_counter() - t0
            final = res.rows[-1]["mean_dice"]
            rare = rare_class_voxels(run_dir)
            per_method.setdefault(m, []).append((final, rare))
            print(f"{m:>14s} seed {seed}: final dice {final:.4f}  rare-class voxels {rare:6d}  ({dt:.1f}s)")

    report = evaluate_runs(out / "runs", out / "report")
    print()
    print(f"{'method':>14s} {'final dice':>11s} {'rare voxels':>12s} {'aubc':>8s}")
    aubc = {e["method"]: e["aubc_mean"] for e in report["summary"]}
    for m, vals in per_method.items():
        v = np.array(vals, dtype=float)
        print(f"{m:>14s} {v[:, 0].mean():11.4f} {v[:, 1].mean():12.1f} {aubc[m]:8.4f}")
    for note in report["notes"]:
        print("note:", note)
    print("report written to", out / "report")


if __name__ == "__main__":
    main()
