"""Command line entry point: `conceptwm <stage> --config <file> [...]`."""

from __future__ import annotations

import argparse
import json
import sys

from .config import build_schema, load_config
from .pipeline import STAGE_ORDER, RunContext, export_metrics, run_stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conceptwm",
        description="Concept-bound watermarking pipeline for a toy latent diffusion model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGE_ORDER:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override paths.out_dir")
        if stage == "generate":
            p.add_argument("--sampler", choices=["ddim", "ancestral", "heun"], default=None)
            p.add_argument("--steps", type=int, default=None)
            p.add_argument("--guidance-scale", type=float, default=None)
            p.add_argument("--size", type=int, choices=[64, 96], default=None)

    p = sub.add_parser("export", help="export all stage metrics to CSV / JSON-lines")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--format", default="csv,jsonl", help="comma-separated: csv,jsonl")

    p = sub.add_parser("schema", help="print the published run-config JSON schema")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "schema":
        json.dump(build_schema(), sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
        return 0

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.paths.out_dir = args.out

    if args.command == "export":
        ctx = RunContext(cfg)
        formats = tuple(f.strip() for f in args.format.split(",") if f.strip())
        for path in export_metrics(ctx, formats):
            print(path)
        return 0

    if args.command == "generate":
        if args.sampler is not None:
            cfg.sample.sampler = args.sampler
        if args.steps is not None:
            cfg.sample.steps = args.steps
        if args.guidance_scale is not None:
            cfg.sample.guidance_scale = args.guidance_scale
        if args.size is not None:
            cfg.sample.size = args.size

    ctx = run_stage(args.command, cfg)
    record = ctx.manifest.records[-1]
    print(
        f"{args.command}: {record.status} "
        f"(run {ctx.run_id}, {record.wall_time_s:.1f}s, "
        f"outputs: {', '.join(record.outputs) or 'metrics only'})"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
