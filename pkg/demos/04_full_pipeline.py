#!/usr/bin/env python3
"""Run every pipeline stage on the bundled toy scene and print the report.

Same as calling `anymole <stage> --config toy` six times. Step counts are
cut down by default so the run takes about a minute; pass --full for the
default schedule (estimator training alone is several minutes).
"""

import argparse
import json
from pathlib import Path

from inbetween.pipeline import STAGES, apply_overrides, bundled_config, run_stage

QUICK = ["adapt.steps=20", "estimator.steps=300", "mimic.steps=30"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo_out/pipeline")
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--no-fine-stage", action="store_true")
    args = ap.parse_args()

    cfg = bundled_config() if args.full else apply_overrides(bundled_config(), QUICK)
    flags = {"no_fine_stage": args.no_fine_stage}
    for stage in STAGES:
        man = run_stage(stage, cfg, args.out, flags=flags)
        state = "skipped" if man["skipped"] else f"{man['timings']['seconds']:.1f} s"
        print(f"{stage:16s} {state:>10s}  {len(man['outputs'])} output files")

    report = json.loads((Path(args.out) / "evaluate" / "report.json").read_text())
    for name, value in sorted(report["values"].items()):
        print(f"  {name:5s} {value:.5f}")


if __name__ == "__main__":
    main()
