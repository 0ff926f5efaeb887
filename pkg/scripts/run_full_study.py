#!/usr/bin/env python3
"""Run (or resume) the full end-to-end study: synthetic dataset, VAE and
backbone pretraining, all five ablation cases plus extra-seed and
unfrozen-backbone runs, the zero-blend evaluation, and the blend-weight
sweep. Artifacts land under --root; re-running only builds missing stages.

This is the same artifact tree the e2e acceptance tests consume
(tests default to runs/e2e).
"""

import argparse
import json
import logging

from tryoff.study import ensure_study
from tryoff.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="runs/e2e")
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-eval-pairs", type=int, default=None,
                    help="cap evaluation pairs (default: full test split)")
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    cfg = TrainConfig(seed=args.seed)
    summary = ensure_study(args.root, n_pairs=args.pairs, train_cfg=cfg,
                           max_eval_pairs=args.max_eval_pairs)
    print(json.dumps({k: summary[k] for k in ("cases", "full_scale0",
                                              "sweep_lpips_raw", "timings")},
                     indent=2))


if __name__ == "__main__":
    main()
