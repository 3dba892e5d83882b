#!/usr/bin/env python3
"""Run the loss-ablation grid on the shapes-8 benchmark and tabulate it.

Generates the dataset once, trains every (preset, seed) combination with
the committed configuration, then prints seed-averaged final-step metrics
plus the three directional comparisons the grid exists to demonstrate:
old-class retention from the clustering term, per-class IoU spread from
the distribution weighting, and island suppression from the consistency
term.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from fairseg.cli import main as fairseg_main
from fairseg.synthdata import read_manifest

PRESETS = ("fine-tune", "cluster", "cluster-class", "full")
METRICS = ("miou_initial", "miou_later", "miou_all", "iou_std_fg",
           "fairness_gap", "islands_per_image")


def run(argv):
    code = fairseg_main(argv)
    if code != 0:
        raise SystemExit(f"fairseg {' '.join(argv)} exited {code}")


def ensure_dataset(config, data_dir):
    if os.path.exists(os.path.join(data_dir, "train.bin")):
        return
    run(["gen", "--config", config, "--out", data_dir])


def train_grid(config, data_dir, out_dir, presets, seeds, fresh=False):
    runs = {}
    for preset in presets:
        for seed in seeds:
            rd = os.path.join(out_dir, f"{preset}-s{seed}")
            if fresh or not os.path.exists(os.path.join(rd, "summary.txt")):
                run([
                    "train",
                    "--config", config,
                    "--dataset", os.path.join(data_dir, "train.bin"),
                    "--test", os.path.join(data_dir, "test.bin"),
                    "--ablation", preset,
                    "--seed", str(seed),
                    "--out", rd,
                ])
            runs[(preset, seed)] = {
                k: float(v)
                for k, v in read_manifest(
                    os.path.join(rd, "summary.txt")
                ).items()
            }
    return runs


def seed_mean(runs, preset, seeds, key):
    return float(np.mean([runs[(preset, s)][key] for s in seeds]))


def summarize(runs, presets, seeds):
    print()
    header = f"{'preset':14s}" + "".join(f"{m:>19s}" for m in METRICS)
    print(header)
    print("-" * len(header))
    for preset in presets:
        row = f"{preset:14s}"
        for m in METRICS:
            row += f"{seed_mean(runs, preset, seeds, m):19.4f}"
        print(row)
    print()

    def need(*names):
        return all((p, seeds[0]) in runs for p in names)

    if need("fine-tune", "cluster"):
        gap = seed_mean(runs, "cluster", seeds, "miou_initial") - seed_mean(
            runs, "fine-tune", seeds, "miou_initial"
        )
        print(f"old-class mIoU gain, cluster vs fine-tune: {gap:+.4f}")
    if need("cluster", "cluster-class"):
        dstd = seed_mean(runs, "cluster-class", seeds, "iou_std_fg") - (
            seed_mean(runs, "cluster", seeds, "iou_std_fg")
        )
        dmiou = seed_mean(runs, "cluster-class", seeds, "miou_all") - (
            seed_mean(runs, "cluster", seeds, "miou_all")
        )
        print(f"IoU spread change, +class weighting:      {dstd:+.4f}")
        print(f"all-class mIoU change, +class weighting:  {dmiou:+.4f}")
    if need("cluster-class", "full"):
        base = seed_mean(runs, "cluster-class", seeds, "islands_per_image")
        isl = seed_mean(runs, "full", seeds, "islands_per_image")
        dmiou = seed_mean(runs, "full", seeds, "miou_all") - seed_mean(
            runs, "cluster-class", seeds, "miou_all"
        )
        rel = (isl - base) / base if base else float("nan")
        print(f"islands/image change, +consistency:       {rel:+.2%}")
        print(f"all-class mIoU change, +consistency:      {dmiou:+.4f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    here = os.path.dirname(os.path.abspath(__file__))
    ap.add_argument(
        "--config",
        default=os.path.join(here, "..", "configs", "acceptance.ini"),
    )
    ap.add_argument("--data", default="runs/shapes8-data")
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--presets", default=",".join(PRESETS))
    ap.add_argument("--fresh", action="store_true",
                    help="retrain even when a summary already exists")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    presets = args.presets.split(",")
    ensure_dataset(args.config, args.data)
    runs = train_grid(args.config, args.data, args.out, presets, seeds,
                      fresh=args.fresh)
    summarize(runs, presets, seeds)


if __name__ == "__main__":
    main()
