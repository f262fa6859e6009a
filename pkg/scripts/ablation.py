"""Ablate the two ClaSP PE ingredients on the desk-scale dataset.

Compares plain top-k PE, stratification alone (cla_pe33, cla_pe66), stratification
with constant noise (clap_pe), noise alone (power_pe) and the full scheduled method.

    python scripts/ablation.py --out ablation --seeds 0 1 2 3
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import desk_benchmark  # noqa: E402

ABLATION = ["pe", "cla_pe33", "cla_pe66", "power_pe", "clap_pe", "clasp_pe"]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="ablation")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--methods", nargs="+", default=ABLATION)
    args, rest = p.parse_known_args(argv)
    desk_benchmark.main(["--out", args.out, "--methods", *args.methods,
                         "--seeds", *map(str, args.seeds), *rest])


if __name__ == "__main__":
    main()
