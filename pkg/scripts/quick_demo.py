#!/usr/bin/env python3
"""Two-minute smoke demo of the whole pipeline at toy step counts:
generate a small dataset, pretrain the VAE (gate disabled), train the full
conditioning setup briefly, sample a few flat-lays and score them.

Not a quality demo -- step counts are far too small -- just proof that every
stage runs end to end. See scripts/run_full_study.py for the real thing.
"""

import argparse
import logging

from tryoff.diffusion import SamplerConfig
from tryoff.networks import ModelConfig
from tryoff.synthdata import gen_dataset
from tryoff.training import TrainConfig, evaluate_run, pretrain_vae, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="runs/demo")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")

    data = f"{args.root}/data"
    run = f"{args.root}/run"
    gen_dataset(64, seed=0, out_dir=data)
    cfg = TrainConfig(stage1_steps=60, stage2_steps=10, warmup_steps=20,
                      vae_steps=120, backbone_steps=80, vae_psnr_gate=0.0,
                      sample_steps=8)
    pretrain_vae(cfg, data, f"{run}/vae.ckpt")
    train(cfg, ModelConfig(case="full"), data, run)
    report = evaluate_run(run, data, SamplerConfig(steps=8, seed=0), max_pairs=4)
    print("demo scores (tiny budgets, quality not expected):")
    for k, v in report.scaled().items():
        print(f"  {k} = {v:.3f}")


if __name__ == "__main__":
    main()
