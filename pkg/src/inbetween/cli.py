"""``anymole`` command line: one subcommand per pipeline stage.

Exit codes: 0 on success, 1 when ``evaluate`` finds a metric past its
threshold, 2 on configuration, input or stage-order errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError, ContractError, MotionParseError, StageOrderError
from .pipeline import STAGES, apply_overrides, load_config, run_stage


def _threshold(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected metric=value, got {text!r}")
    try:
        return name.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"threshold for {name!r} is not a number") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anymole", description="Keyframe in-betweening pipeline on a toy scene.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", required=True, help="run config JSON, a stage manifest, or 'toy'")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set estimator.steps=500")
    p.add_argument("--output-root", help="output directory (default: config or $ANYMOLE_OUTPUT_ROOT)")
    p.add_argument("--force", action="store_true", help="re-run even if the stage is up to date")
    p.add_argument("--threshold", type=_threshold, action="append", default=[], metavar="METRIC=VALUE",
                   help="evaluate: fail (exit 1) when the metric is past this value")
    p.add_argument("--no-icadapt", action="store_true", help="adapt: keep the backend unadapted")
    p.add_argument("--no-fine-stage", action="store_true", help="generate: hold coarse frames instead")
    p.add_argument("--no-keyframe-weighting", action="store_true", help="synth-data: keyframe weight w=1")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {
        "no_icadapt": args.no_icadapt,
        "no_fine_stage": args.no_fine_stage,
        "no_keyframe_weighting": args.no_keyframe_weighting,
        "thresholds": dict(args.threshold),
    }
    try:
        cfg = apply_overrides(load_config(args.config), args.overrides)
        manifest = run_stage(args.stage, cfg, args.output_root, args.force, flags)
    except (ConfigError, StageOrderError, MotionParseError, ContractError, FileNotFoundError) as exc:
        print(f"anymole {args.stage}: {exc}", file=sys.stderr)
        return 2
    state = "up to date" if manifest.get("skipped") else f"done in {manifest['timings']['seconds']} s"
    print(f"{args.stage}: {state}")
    if args.stage == "evaluate":
        from .pipeline import output_root
        report = json.loads((output_root(cfg, args.output_root) / "evaluate" / "report.json").read_text())
        for name, value in sorted(report["values"].items()):
            print(f"  {name}: {value:.6g}")
        failed = [k for k, ok in report["passed"].items() if not ok]
        if failed:
            print(f"threshold failed: {', '.join(failed)}", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
