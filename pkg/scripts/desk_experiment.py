"""Train all three stages on a small synthetic corpus and report the overfit measurements.

    python3 scripts/desk_experiment.py --out runs/desk --pairs 16
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from vtryon.geometry import apply_tps, tps_grid
from vtryon.metrics import ssim
from vtryon.parsing import pixel_accuracy
from vtryon.pipeline import load_bundle, load_config, train_stage, tryon_once
from vtryon.pipeline.data import TryOnSamples, collate
from vtryon.pipeline.train import load_frozen
from vtryon.synthetic import synthetic_pairs


def window_drop(series, window=20):
    return 1.0 - np.mean(series[-window:]) / np.mean(series[:window])


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--pairs", type=int, default=16)
    parser.add_argument("--profile", default="desk")
    parser.add_argument("--disc", default="psad", choices=("psad", "patch", "binary", "none"))
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.profile, {"schedule": {"seed": args.seed}})
    records = synthetic_pairs(args.pairs, cfg.resolution, seed=args.seed)
    out = Path(args.out)
    results, seconds = {}, {}
    for stage in ("warp", "parse", "tryon"):
        t0 = time.perf_counter()
        results[stage] = train_stage(stage, cfg, records, out, args.disc)
        seconds[stage] = round(time.perf_counter() - t0, 1)

    warp_net, parse_net = load_frozen("warp", cfg, out), load_frozen("parse", cfg, out)
    batch = collate([TryOnSamples(records)[i] for i in range(len(records))])
    with torch.no_grad():
        theta = warp_net(batch["garment"], batch["agnostic"], batch["pose"])
        warped = apply_tps(batch["garment"], tps_grid(theta, batch["garment"].shape[-2:]))
        accuracy = pixel_accuracy(parse_net(warped, batch["pose"], batch["masked_parse"]), batch["parse"])
    bundle = load_bundle(out)
    summary = {
        "warp_l1_drop": window_drop(results["warp"].trace["l1"]),
        "parse_accuracy": accuracy,
        "tryon_l1_drop": window_drop(results["tryon"].trace["l1"]),
        "train_ssim": float(np.mean([ssim(tryon_once(bundle, r, r), r.model_image) for r in records])),
        "seconds": seconds,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
