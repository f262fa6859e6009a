"""Benchmark methods on two synthetic settings so Friedman/Nemenyi ranks are reported.

The second setting makes the rare class rarer and the images noisier.

    python scripts/two_settings.py --out two --seeds 0 1
"""

from __future__ import annotations

import argparse
from dataclasses import replace
from pathlib import Path

from alquery.core import save_dataset
from alquery.harness import config_from_dict, evaluate_runs, run_experiment
from alquery.strategies import MAIN_METHODS
from alquery.synthgen import SynthSpec, generate_dataset


def settings() -> dict[str, SynthSpec]:
    base = SynthSpec()
    harder = replace(
        base,
        name="desk_hard",
        seed=base.seed + 1,
        volume_fraction=[*base.volume_fraction[:-1], base.volume_fraction[-1] / 2],
        noise_sigma=[s * 1.25 for s in base.noise_sigma],
    )
    return {"desk": base, "desk_hard": harder}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="two_settings")
    p.add_argument("--methods", nargs="+", default=list(MAIN_METHODS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    args = p.parse_args(argv)
    out = Path(args.out)
    for name, spec in settings().items():
        data = out / "data" / name
        if not (data / "manifest.json").exists():
            save_dataset(generate_dataset(spec), data)
        for m in args.methods:
            for seed in args.seeds:
                cfg, _ = config_from_dict({"dataset": str(data), "method": m, "setting": name}, seed=seed)
                res = run_experiment(cfg, out / "runs" / name / m / f"s{seed}", setting=name)
                print(f"{name:>10s} {m:>14s} seed {seed}: final dice {res.rows[-1]['mean_dice']:.4f}")
    report = evaluate_runs(out / "runs", out / "report")
    for metric, fn in report["friedman_nemenyi"].items():
        ranks = sorted(fn["avg_ranks"].items(), key=lambda kv: kv[1])
        print(f"{metric}: Friedman p = {fn['pvalue']:.3g}; ranks " + ", ".join(f"{m} {r:.2f}" for m, r in ranks))
    for note in report["notes"]:
        print("note:", note)


if __name__ == "__main__":
    main()
