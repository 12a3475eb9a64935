#!/usr/bin/env python3
"""Desk-scale end-to-end run: synthesize, train all phases, evaluate, export.

Writes everything under one output directory:

    out/
      dataset/      PNGs + manifest + boxes
      run/          checkpoints + loss curves + config echo
      report/       per-branch AUC reports and ROC exports
      saliency/     attention maps for one test-set sample

Usage:
    python3 scripts/run_desk_pipeline.py --out /tmp/desk [--config configs/desk_default.json]
"""

import argparse
import json
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from camnet.cli import main as camnet  # noqa: E402


def run(argv: list[str]) -> None:
    print(f"$ camnet {' '.join(argv)}", flush=True)
    code = camnet(argv)
    if code != 0:
        sys.exit(f"step failed with exit code {code}: {argv}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--out", required=True, help="pipeline output directory")
    parser.add_argument("--config", default=str(REPO / "configs/desk_default.json"))
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="extra config overrides passed to every step")
    args = parser.parse_args()

    out = Path(args.out)
    overrides = [flag for kv in args.set for flag in ("--set", kv)]
    started = time.time()

    run(["synth", "--config", args.config, *overrides,
         "--out", str(out / "dataset")])
    run(["train", "--config", args.config, *overrides,
         "--data", str(out / "dataset"), "--phase", "all",
         "--out", str(out / "run")])
    for branch in ("cls", "att", "fused"):
        run(["eval", "--ckpt", str(out / "run" / "best.ckpt"),
             "--data", str(out / "dataset"), "--branch", branch,
             "--split", "test", "--out", str(out / "report" / branch)])
    run(["attend", "--ckpt", str(out / "run" / "best.ckpt"),
         str(out / "dataset"), "--index", "0",
         "--out", str(out / "saliency")])

    fused = json.loads((out / "report" / "fused" / "report.json").read_text())
    cls_only = json.loads((out / "report" / "cls" / "report.json").read_text())
    print(f"\ndone in {time.time() - started:.0f}s")
    print(f"test average AUC: fused {fused['average_auc']:.4f}  "
          f"cls-only {cls_only['average_auc']:.4f}")


if __name__ == "__main__":
    main()
