"""End-to-end study: dataset, pretraining, every ablation case, the
freezing comparison, and the inference blend-weight sweep.

`ensure_study` is idempotent: each stage is keyed by its artifacts on disk,
so an interrupted or repeated invocation only builds what is missing.
The summary gathers everything the directional acceptance checks need:

  * per-case metric reports (baseline / ieb_ca / encoder_only /
    decoder_only / full, plus extra full seeds and the unfrozen variant)
  * the full case evaluated with the reference branch disabled at
    inference (blend weight zero)
  * the blend-weight sweep with per-weight perceptual distance
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Dict, Optional

from .diffusion import SamplerConfig
from .metrics import MetricsReport
from .networks import ModelConfig
from .synthdata import gen_dataset
from .training import (TrainConfig, evaluate_run, pretrain_backbone,
                       pretrain_vae, ref_scale_sweep, run_ablation)

log = logging.getLogger(__name__)

CASES_ALL = ("baseline", "ieb_ca", "encoder_only", "decoder_only", "full")
SWEEP_SCALES = (0.0, 0.5, 1.0, 1.5)
EXTRA_FULL_SEEDS = (1, 2)


def _case_report(root: Path, name: str) -> Optional[MetricsReport]:
    path = root / name / "eval" / "report.txt"
    return MetricsReport.load(path) if path.exists() else None


def ensure_study(root, n_pairs: int = 2000,
                 train_cfg: Optional[TrainConfig] = None,
                 model_cfg: Optional[ModelConfig] = None,
                 max_eval_pairs: Optional[int] = None) -> dict:
    """Build (or reuse) the complete study under `root`; returns the summary
    dict and writes it to root/summary.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = train_cfg or TrainConfig()
    mc = model_cfg or ModelConfig()
    data_dir = root / "data"
    t_begin = time.time()
    timings: Dict[str, float] = {}

    if not (data_dir / "manifest.tsv").exists():
        t0 = time.time()
        log.info("generating %d pairs", n_pairs)
        gen_dataset(n_pairs, cfg.seed, data_dir)
        timings["gen_data"] = time.time() - t0

    vae_ckpt = root / "vae.ckpt"
    if not vae_ckpt.exists():
        t0 = time.time()
        log.info("pretraining VAE")
        pretrain_vae(cfg, data_dir, vae_ckpt)
        timings["vae"] = time.time() - t0

    backbone_ckpt = root / "backbone.ckpt"
    if not backbone_ckpt.exists():
        t0 = time.time()
        log.info("pretraining backbone")
        pretrain_backbone(cfg, data_dir, vae_ckpt, backbone_ckpt)
        timings["backbone"] = time.time() - t0

    t0 = time.time()
    run_ablation(list(CASES_ALL), cfg, data_dir, root, model_cfg=mc,
                 include_unfrozen=True, extra_full_seeds=EXTRA_FULL_SEEDS,
                 max_eval_pairs=max_eval_pairs)
    timings["ablation"] = time.time() - t0

    # the full case sampled with the reference branch disabled at inference
    scale0_report_path = root / "full" / "eval_scale0" / "report.txt"
    if not scale0_report_path.exists():
        t0 = time.time()
        sampler = SamplerConfig(steps=cfg.sample_steps, guidance=cfg.guidance,
                                seed=10_000 + cfg.seed)
        evaluate_run(root / "full", data_dir, sampler, ref_scale=0.0,
                     tag="eval_scale0", max_pairs=max_eval_pairs)
        timings["scale0_eval"] = time.time() - t0

    sweep_path = root / "full" / "scale_sweep" / "sweep.txt"
    if not sweep_path.exists():
        t0 = time.time()
        ref_scale_sweep(root / "full", data_dir, scales=SWEEP_SCALES,
                        sampler_cfg=SamplerConfig(steps=cfg.sample_steps,
                                                  guidance=cfg.guidance,
                                                  seed=20_000 + cfg.seed),
                        max_pairs=min(32, max_eval_pairs or 32))
        timings["sweep"] = time.time() - t0

    sweep: Dict[str, float] = {}
    for line in sweep_path.read_text().splitlines():
        parts = dict(p.split("=") for p in line.split())
        sweep[parts["ref_scale"]] = float(parts["lpips"])

    runs = list(CASES_ALL) + [f"full_seed{s}" for s in EXTRA_FULL_SEEDS] \
        + ["full_unfrozen"]
    cases = {}
    for name in runs:
        rep = _case_report(root, name)
        if rep is not None:
            cases[name] = rep.scaled()
    scale0 = MetricsReport.load(scale0_report_path).scaled()

    summary = {
        "n_pairs": n_pairs,
        "train_config": dataclasses.asdict(cfg),
        "cases": cases,
        "full_scale0": scale0,
        "sweep_lpips_raw": sweep,
        "timings": timings,
        "total_wall_seconds": time.time() - t_begin,
    }
    (root / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def load_summary(root) -> Optional[dict]:
    path = Path(root) / "summary.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())
