#!/usr/bin/env python3
"""Run the full pipeline end to end on the smoke config and export metrics.

Usage: python scripts/run_smoke.py [--config configs/smoke.json] [--out DIR]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from conceptwm.config import load_config
from conceptwm.pipeline import STAGE_ORDER, export_metrics, run_stage


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default="configs/smoke.json")
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    cfg = load_config(args.config)
    if args.out:
        cfg.paths.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed

    ctx = None
    for stage in STAGE_ORDER:
        ctx = run_stage(stage, cfg, ctx)
        rec = ctx.manifest.records[-1]
        print(f"{stage:>16}: {rec.status} ({rec.wall_time_s:.1f}s)")
    for path in export_metrics(ctx):
        print(f"exported {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
