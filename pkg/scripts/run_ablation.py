"""Ablation matrix at the desk profile, then the ordering summary.

Trains the shared models once, runs every arm with regularizers off, and
prints the motion/drift ratios that distinguish the variants.
"""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from motiondistill.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--outdir", default="runs/ablation")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()

    flags = ["--set", f"outdir={args.outdir}"]
    for kv in args.overrides:
        flags += ["--set", kv]
    rc = cli_main(["ablate"] + flags)
    if rc != 0:
        return rc

    with open(Path(args.outdir) / "ablation.csv", newline="") as fh:
        rows = {r["arm"]: r for r in csv.DictReader(fh)}
    motion = {k: float(r["motion_magnitude"]) for k, r in rows.items()}
    drift = {k: float(r["appearance_drift"]) for k, r in rows.items()}
    print(f"\nmotion  e/a = {motion['e'] / motion['a']:8.3f}   (want >= 2)")
    print(f"drift   e/b = {drift['e'] / drift['b']:8.3f}   (want <= 0.5)")
    print(f"drift   c/e = {drift['c'] / drift['e']:8.3f}   (want >= 2)")
    print(f"motion  d/e = {motion['d'] / motion['e']:8.3f}   (want <= 0.5)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
