#!/usr/bin/env python3
"""Render bar charts for the robustness and inference-setting sweeps of a run.

Usage: python scripts/plot_sweeps.py --run runs/default [--out runs/default/plots]
"""

import argparse
import json
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load_rows(run_dir: Path, stage: str, metric: str) -> list[dict]:
    path = run_dir / "metrics" / f"{stage}.jsonl"
    if not path.exists():
        return []
    rows = [json.loads(line) for line in open(path)]
    return [r for r in rows if r.get("metric") == metric]


def bar_chart(rows: list[dict], title: str, path: Path) -> None:
    labels = [r["label"] for r in rows]
    accs = [r["bit_accuracy"] for r in rows]
    tprs = [r["tpr"] for r in rows]
    x = range(len(labels))
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(labels)), 3.2))
    ax.bar([i - 0.2 for i in x], accs, width=0.4, label="bit accuracy")
    ax.bar([i + 0.2 for i in x], tprs, width=0.4, label="TPR")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.axhline(0.5, color="gray", linestyle=":", linewidth=0.8)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    print(f"wrote {path}")


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--run", required=True, help="run directory with metrics/")
    parser.add_argument("--out", default=None)
    args = parser.parse_args()
    run_dir = Path(args.run)
    out_dir = Path(args.out) if args.out else run_dir / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)

    rob = load_rows(run_dir, "evaluate", "robustness_row")
    if rob:
        bar_chart(rob, "Decode accuracy under attack", out_dir / "robustness.png")
    abl = load_rows(run_dir, "ablate", "ablation_row")
    if abl:
        bar_chart(abl, "Inference-setting ablation", out_dir / "ablation.png")
    if not rob and not abl:
        print("no sweep metrics found; run the evaluate/ablate stages first")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
