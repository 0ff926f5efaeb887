"""Command-line interface.

Subcommands: gen-data, pretrain-vae, train, infer, ablate, eval. All
randomness flows from explicit --seed flags; config files are flat
key=value text. Exit codes: 0 success, otherwise one category code per
error class (see EXIT_CODES).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import errors as err
from .diffusion import SamplerConfig, sample
from .metrics import evaluate, load_image
from .networks import CASES, ModelConfig
from .synthdata import gen_dataset, save_png
from .training import (TrainConfig, load_model_dir, pretrain_vae, run_ablation,
                       train)

EXIT_CODES = {
    err.ConfigError: 2,       # includes RangeError
    err.DimensionError: 3,
    err.StateError: 4,
    err.NumericalError: 5,
    err.PairingError: 6,
    err.SizeError: 6,
    err.DataError: 7,
    err.ContractError: 8,
}


def _exit_code(e: Exception) -> int:
    for cls, code in EXIT_CODES.items():
        if isinstance(e, cls):
            return code
    return 1


def _load_train_config(path: str | None, seed: int | None) -> TrainConfig:
    cfg = TrainConfig.load(path) if path else TrainConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _add_gen_data(sub):
    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    def run(args):
        manifest = gen_dataset(args.n, args.seed, args.out)
        print(f"wrote {args.n} pairs; manifest at {manifest}")
    p.set_defaults(func=run)


def _add_pretrain_vae(sub):
    p = sub.add_parser("pretrain-vae", help="pretrain and freeze the VAE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--config", default=None, help="train config key=value file")
    p.add_argument("--seed", type=int, default=None)

    def run(args):
        cfg = _load_train_config(args.config, args.seed)
        report = pretrain_vae(cfg, args.data, args.out)
        print(f"vae pretrained: PSNR {report['psnr']:.2f} dB -> {args.out}")
    p.set_defaults(func=run)


def _add_train(sub):
    p = sub.add_parser("train", help="two-stage training for one ablation case")
    p.add_argument("--case", choices=CASES, required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vae", default=None, help="VAE checkpoint (default <out>/vae.ckpt)")
    p.add_argument("--backbone", default=None,
                   help="backbone checkpoint (default <out>/backbone.ckpt; pretrained if absent)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--unfreeze-backbone", action="store_true",
                   help="comparison mode: denoising net trains too")

    def run(args):
        cfg = _load_train_config(args.config, args.seed)
        model_cfg = ModelConfig(case=args.case, ref_scale=cfg.ref_scale)
        res = train(cfg, model_cfg, args.data, args.out, vae_ckpt=args.vae,
                    backbone_ckpt=args.backbone, resume=args.resume,
                    unfreeze_backbone=args.unfreeze_backbone)
        print(f"trained {args.case}: {res.steps} steps, "
              f"{res.trainable_parameters} trainable params -> {res.final_checkpoint}")
    p.set_defaults(func=run)


def _add_infer(sub):
    p = sub.add_parser("infer", help="generate a flat-lay from a worn-person image")
    p.add_argument("--ckpt", required=True,
                   help="run directory containing model_final.ckpt + model_config.txt")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--guidance", type=float, default=2.0)
    p.add_argument("--lambda", dest="ref_scales", default=None,
                   help="reference blend weight(s); comma list writes one image per value")
    p.add_argument("--seed", type=int, default=0)

    def run(args):
        model = load_model_dir(args.ckpt)
        img = load_image(args.input)
        worn = (img.transpose(2, 0, 1)[None] * 2.0 - 1.0).astype(np.float32)
        cfg = SamplerConfig(steps=args.steps, guidance=args.guidance, seed=args.seed)
        scales = [None] if args.ref_scales is None else \
            [float(s) for s in args.ref_scales.split(",")]
        out = Path(args.out)
        for lam in scales:
            result = sample(model, worn, cfg, ref_scale=lam)
            if len(scales) == 1:
                path = out
            else:
                path = out.with_name(f"{out.stem}_scale{lam:g}{out.suffix or '.png'}")
            path.parent.mkdir(parents=True, exist_ok=True)
            save_png(path, (result[0].transpose(1, 2, 0) + 1.0) / 2.0)
            print(f"wrote {path}")
    p.set_defaults(func=run)


def _add_ablate(sub):
    p = sub.add_parser("ablate", help="train + evaluate a set of ablation cases")
    p.add_argument("--cases", required=True, help="comma list from " + ",".join(CASES))
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--include-unfrozen", action="store_true",
                   help="add the unfrozen-backbone comparison run")
    p.add_argument("--full-seeds", default="",
                   help="comma list of extra seeds for the full case")
    p.add_argument("--max-eval-pairs", type=int, default=None)

    def run(args):
        cfg = _load_train_config(args.config, args.seed)
        cases = [c.strip() for c in args.cases.split(",") if c.strip()]
        extra = [int(s) for s in args.full_seeds.split(",") if s.strip()]
        results = run_ablation(cases, cfg, args.data, args.out,
                               include_unfrozen=args.include_unfrozen,
                               extra_full_seeds=extra,
                               max_eval_pairs=args.max_eval_pairs)
        print((Path(args.out) / "ablation_table.tsv").read_text())
        print(f"{len(results)} runs completed")
    p.set_defaults(func=run)


def _add_eval(sub):
    p = sub.add_parser("eval", help="score a generated directory against references")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True, help="report file to write")

    def run(args):
        report = evaluate(args.generated, args.reference, out_path=args.out)
        for k, v in report.scaled().items():
            print(f"{k}={v:.6g}")
    p.set_defaults(func=run)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tryoff",
                                     description="desk-scale virtual try-off pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for adder in (_add_gen_data, _add_pretrain_vae, _add_train, _add_infer,
                  _add_ablate, _add_eval):
        adder(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except err.TryoffError as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code(e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
