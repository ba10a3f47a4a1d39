"""Full desk-scale run: scene -> corpus -> models -> distill -> refine -> eval.

Produces a self-describing run directory. Expect roughly half an hour on one
core with the default profile; pass --fast for a minutes-scale smoke profile
(results are not meaningful at that size, it only exercises the plumbing).
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from motiondistill.cli import main as cli_main

FAST_OVERRIDES = [
    "corpus.per_class=4", "train.steps=120", "lora.steps=60",
    "distill.iterations=20", "refine.iterations=20", "eval.cameras=4",
]


def run(argv) -> int:
    t0 = time.time()
    rc = cli_main(argv)
    print(f"  [{time.time() - t0:7.1f}s] {' '.join(argv)}")
    return rc


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--outdir", default="runs/desk")
    ap.add_argument("--mode", default="msd")
    ap.add_argument("--fast", action="store_true")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()

    overrides = [f"outdir={args.outdir}"]
    if args.fast:
        overrides += FAST_OVERRIDES
    overrides += args.overrides
    flags = []
    for kv in overrides:
        flags += ["--set", kv]

    phases = [
        ["gen-scene"], ["gen-corpus"], ["train-denoiser"],
        ["train-denoiser", "--role", "refiner"], ["train-lora"],
        ["distill", "--mode", args.mode], ["refine"], ["eval"],
        ["fig3-noise-test"],
    ]
    for phase in phases:
        rc = run(phase + flags)
        if rc != 0:
            return rc
    print(f"done; artifacts under {args.outdir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
