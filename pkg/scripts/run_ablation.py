"""Adversarial-mode ablation on a synthetic corpus with a held-out evaluation set.

    python3 scripts/run_ablation.py --out runs/ablation --pairs 16 --eval-pairs 12
"""
import argparse
import logging
import time

from vtryon.pipeline import ablate, load_config
from vtryon.pipeline.train import ABLATION_MODES
from vtryon.synthetic import synthetic_pairs


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--pairs", type=int, default=16)
    parser.add_argument("--eval-pairs", type=int, default=12)
    parser.add_argument("--profile", default="desk")
    parser.add_argument("--modes", nargs="+", default=[m.value for m in ABLATION_MODES])
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.profile)
    train = synthetic_pairs(args.pairs, cfg.resolution, seed=0)
    held_out = synthetic_pairs(args.eval_pairs, cfg.resolution, seed=1)
    t0 = time.perf_counter()
    result = ablate(train, cfg, args.out, args.modes, eval_records=held_out)
    print(result.table())
    print(f"{time.perf_counter() - t0:.0f} s; full reports in {args.out}/ablation.json")


if __name__ == "__main__":
    main()
