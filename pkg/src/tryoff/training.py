"""Training orchestration: VAE pretraining, backbone pretraining, the
two-stage conditioning recipe, sampling for evaluation, and ablation runs.

Stage layout for one `train` invocation:

  0. If no backbone checkpoint exists, pretrain a plain (self-attention +
     prompt cross-attention) denoising net on flat-lay latents and freeze
     it. This stands in for the pretrained generative backbone the method
     assumes; it is shared by every ablation case for a given data/seed.
  1. Stage 1: train the reference network, the hybrid blocks' reference
     K/V and the image projection with the denoising MSE only, under a
     linear learning-rate warmup.
  2. Stage 2: same trainables, constant low learning rate, loss extended
     with a weighted perceptual term evaluated on the decoded one-step
     data estimate.

Determinism: one master seed derives independent per-step streams for batch
order, timesteps, noise, and conditioning dropout, so an interrupted run
resumed from a checkpoint reproduces the uninterrupted parameter state
bit-for-bit (data order is a pure function of the absolute step).
"""

from __future__ import annotations

import dataclasses
import logging
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .diffusion import (SamplerConfig, add_noise, make_schedule, sample)
from .errors import ConfigError, StateError
from .losses import FeatureNet, ldm_loss, perceptual_loss, total_loss
from .metrics import MetricsReport, evaluate
from .networks import ModelConfig, TryOffModel, build_model
from .optim import AdamW
from .synthdata import PairDataset, load_pairs, save_png
from .tensor import Tensor, add as t_add, backward, exp, mul, no_grad, scale as t_scale, square, sum_

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyperparameters; desk-scale defaults."""

    stage1_steps: int = 3000
    stage2_steps: int = 300
    warmup_steps: int = 500
    lr_stage1_peak: float = 1e-5
    lr_stage2: float = 3e-6
    micro_batch: int = 4
    grad_accum: int = 4
    lambda_lpips: float = 0.05
    ref_scale: float = 1.0
    cfg_drop_prob: float = 0.1
    seed: int = 0
    timesteps: int = 1000
    vae_steps: int = 2000
    vae_batch: int = 8
    vae_lr: float = 1e-3
    vae_kl_weight: float = 1e-6
    vae_psnr_gate: float = 25.0
    backbone_steps: int = 3000
    backbone_batch: int = 4
    backbone_lr: float = 3e-4
    backbone_warmup: int = 100
    sample_steps: int = 25
    guidance: float = 2.0
    checkpoint_every: int = 500
    freeze_check_every: int = 500

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_kv(cls, text: str) -> "TrainConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line (expected key=value): {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        defaults = cls()
        out = {}
        for f in dataclasses.fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            out[f.name] = int(raw) if isinstance(getattr(defaults, f.name), int) else float(raw)
        return cls(**out)

    def save(self, path) -> None:
        Path(path).write_text(self.to_kv())

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_kv(Path(path).read_text())


def stage1_lr(cfg: TrainConfig, step: int) -> float:
    """Learning rate at 1-indexed micro-step `step` of stage 1: linear from 0
    to the peak over the warmup, constant afterwards."""
    return cfg.lr_stage1_peak * min(1.0, step / cfg.warmup_steps)


def _stream(seed: int, purpose: str, step: int) -> np.random.Generator:
    tag = zlib.crc32(purpose.encode())
    return np.random.default_rng(np.random.SeedSequence([seed, tag, step]))


def _crc(arr: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(arr).tobytes())


def freeze_checksums(model: TryOffModel) -> Dict[str, int]:
    return {p.name: _crc(p.value.data) for p in model.frozen_parameters()}


def verify_freeze(model: TryOffModel, reference: Dict[str, int]) -> None:
    for p in model.frozen_parameters():
        if _crc(p.value.data) != reference[p.name]:
            raise StateError(f"frozen parameter changed during training: {p.name}")


# -- VAE pretraining -----------------------------------------------------------


def _psnr(mse: float, peak: float = 2.0) -> float:
    return 10.0 * np.log10(peak * peak / max(mse, 1e-12))


def pretrain_vae(cfg: TrainConfig, data_dir, out_path) -> dict:
    """Train the VAE on flat and worn images; freeze and checkpoint it.

    Raises StateError if the validation PSNR gate is missed (the checkpoint
    and a failure report are still written for inspection).
    """
    ds = load_pairs(data_dir)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    pool = np.concatenate([ds.flat, ds.worn], axis=0)
    train_pos = np.concatenate([ds.train_positions(), ds.train_positions() + len(ds)])
    val_pos = np.concatenate([ds.test_positions(), ds.test_positions() + len(ds)])

    model = build_model(ModelConfig(case="baseline"), seed=cfg.seed)
    vae = model.vae
    params = vae.params()
    for p in params:
        p.trainable = True
    opt = AdamW(params, lr=cfg.vae_lr)
    t_start = time.time()
    losses: List[float] = []
    for step in range(1, cfg.vae_steps + 1):
        rng = _stream(cfg.seed, "vae.batch", step)
        sel = rng.choice(train_pos, size=cfg.vae_batch, replace=False)
        x = Tensor(pool[sel])
        mu, logvar = vae.encode_dist(x)
        noise = _stream(cfg.seed, "vae.noise", step).standard_normal(mu.shape).astype(np.float32)
        z = t_add(mu, mul(exp(t_scale(logvar, 0.5)), Tensor(noise)))
        recon = vae.decode(z)
        rec_loss = ldm_loss(recon, x)
        kl = t_scale(sum_(t_add(t_add(square(mu), exp(logvar)), t_scale(t_add(logvar, 1.0), -1.0))),
                     0.5 / mu.shape[0])
        loss = t_add(rec_loss, t_scale(kl, cfg.vae_kl_weight))
        backward(loss)
        opt.step(cfg.vae_lr)
        opt.zero_grad()
        losses.append(float(rec_loss.item()))
        if step % 200 == 0:
            log.info("vae step %d recon %.5f", step, np.mean(losses[-100:]))

    # validation PSNR with deterministic (mean) encoding
    mses = []
    with no_grad():
        for k in range(0, len(val_pos), 32):
            sel = val_pos[k:k + 32]
            x = Tensor(pool[sel])
            recon = vae.decode(vae.encode(x))
            mses.append(float(np.mean((recon.data - pool[sel]) ** 2)))
    psnr = _psnr(float(np.mean(mses)))
    for p in params:
        p.trainable = False
    ckpt.save_params(out_path, params, extra={"meta.val_psnr": np.array([psnr], np.float32)})
    report = {"steps": cfg.vae_steps, "psnr": psnr,
              "loss_start": float(np.mean(losses[:100])) if len(losses) >= 100 else losses[0],
              "loss_end": float(np.mean(losses[-100:])),
              "wall_seconds": time.time() - t_start}
    Path(str(out_path) + ".report.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in report.items()))
    if psnr < cfg.vae_psnr_gate:
        raise StateError(
            f"VAE reconstruction gate missed: PSNR {psnr:.2f} dB < {cfg.vae_psnr_gate} dB "
            f"after {cfg.vae_steps} steps (checkpoint kept at {out_path})")
    log.info("vae pretraining done: PSNR %.2f dB", psnr)
    return report


# -- latent precomputation --------------------------------------------------------


@dataclass
class LatentCache:
    flat: np.ndarray      # [N,4,h,w], already divided by latent_std
    worn: np.ndarray
    stack_tokens: np.ndarray  # [N,16,64] frozen image-stack output
    latent_std: float


def _precompute(model: TryOffModel, ds: PairDataset, latent_std: Optional[float],
                train_pos: np.ndarray) -> LatentCache:
    flats, worns, toks = [], [], []
    with no_grad():
        for k in range(0, len(ds), 32):
            xf = Tensor(ds.flat[k:k + 32])
            xw = Tensor(ds.worn[k:k + 32])
            flats.append(model.vae.encode(xf).data)
            worns.append(model.vae.encode(xw).data)
            toks.append(model.image_stack(xw).data)
    flat = np.concatenate(flats)
    worn = np.concatenate(worns)
    tokens = np.concatenate(toks)
    if latent_std is None:
        latent_std = float(flat[train_pos].std()) or 1.0
    return LatentCache(flat / latent_std, worn / latent_std, tokens, latent_std)


# -- backbone pretraining -----------------------------------------------------------


def pretrain_backbone(cfg: TrainConfig, data_dir, vae_ckpt, out_path) -> dict:
    """Stage 0: train an unconditional (prompt-only) denoising net on
    flat-lay latents with conditioning dropout; freeze and checkpoint it."""
    ds = load_pairs(data_dir)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model = build_model(ModelConfig(case="baseline"), seed=cfg.seed)
    ckpt.load_into(vae_ckpt, model.vae.params(), strict=True)
    model.apply_freeze_partition(unfreeze_backbone=True)
    sched = make_schedule(cfg.timesteps)
    train_pos = ds.train_positions()
    cache = _precompute(model, ds, None, train_pos)

    params = [p for p in model.denoise.params()]
    opt = AdamW(params, lr=cfg.backbone_lr)
    t_start = time.time()
    losses: List[float] = []
    steps_per_epoch = max(1, len(train_pos) // cfg.backbone_batch)
    for step in range(1, cfg.backbone_steps + 1):
        epoch, pos_in = divmod(step - 1, steps_per_epoch)
        order = _stream(cfg.seed, "bb.shuffle", epoch).permutation(train_pos)
        sel = order[pos_in * cfg.backbone_batch:(pos_in + 1) * cfg.backbone_batch]
        z0 = cache.flat[sel]
        t = _stream(cfg.seed, "bb.t", step).integers(0, sched.timesteps, size=len(sel))
        eps = _stream(cfg.seed, "bb.eps", step).standard_normal(z0.shape).astype(np.float32)
        z_t = add_noise(z0, eps, t, sched)
        drop = _stream(cfg.seed, "bb.drop", step).random() < cfg.cfg_drop_prob
        cond = None if drop else model.prompt_tokens.value
        pred = model.denoise_forward(Tensor(z_t), t, cond, None)
        loss = ldm_loss(pred, eps)
        backward(loss)
        lr = cfg.backbone_lr * min(1.0, step / max(1, cfg.backbone_warmup))
        opt.step(lr)
        opt.zero_grad()
        losses.append(float(loss.item()))
        if step % 250 == 0:
            log.info("backbone step %d mse %.5f", step, np.mean(losses[-100:]))

    arrays = {p.name: p.value.data for p in params}
    arrays["prompt.tokens"] = model.prompt_tokens.value.data
    arrays["meta.latent_std"] = np.array([cache.latent_std], np.float32)
    ckpt.save_arrays(out_path, arrays)
    report = {"steps": cfg.backbone_steps,
              "loss_end": float(np.mean(losses[-100:])),
              "latent_std": cache.latent_std,
              "wall_seconds": time.time() - t_start}
    Path(str(out_path) + ".report.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in report.items()))
    return report


# -- cased model assembly --------------------------------------------------------------


def prepare_model(model_cfg: ModelConfig, seed: int, vae_ckpt, backbone_ckpt,
                  unfreeze_backbone: bool = False) -> TryOffModel:
    """Build a cased model, load the frozen pieces, warm-start the reference
    branches, and apply the freeze partition."""
    model = build_model(model_cfg, seed=seed)
    ckpt.load_into(vae_ckpt, model.vae.params(), strict=True)
    arrays, _ = ckpt.load_arrays(backbone_ckpt)
    for p in model.denoise.params():
        if p.name in arrays:
            p.value.data = arrays[p.name].copy()
        elif not p.name.endswith((".wk_ref", ".wv_ref")):
            raise StateError(f"backbone checkpoint missing parameter {p.name}")
    for site in model.denoise.sites:
        w = site.attn1.weights
        if w.wk_ref is not None:
            w.wk_ref.value.data = w.wk.value.data.copy()
            w.wv_ref.value.data = w.wv.value.data.copy()
    if model.reference is not None:
        for p in model.reference.params():
            src = "denoise." + p.name[len("reference."):]
            if src not in arrays:
                raise StateError(f"backbone checkpoint missing parameter {src}")
            p.value.data = arrays[src].copy()
    model.prompt_tokens.value.data = arrays["prompt.tokens"].copy()
    model.latent_std = float(arrays["meta.latent_std"][0])
    model.apply_freeze_partition(unfreeze_backbone=unfreeze_backbone)
    model.ready = True
    return model


def load_model_dir(run_dir) -> TryOffModel:
    """Restore a trained model from a run directory (config + final ckpt)."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "model_config.txt"
    final = run_dir / "model_final.ckpt"
    if not cfg_path.exists() or not final.exists():
        raise StateError(f"no trained model under {run_dir}")
    model_cfg = ModelConfig.load(cfg_path)
    model = build_model(model_cfg, seed=0)
    leftovers = ckpt.load_into(final, model.parameters(), strict=True)
    model.latent_std = float(leftovers["meta.latent_std"][0])
    model.ready = True
    return model


# -- the two-stage trainer ---------------------------------------------------------------


@dataclass
class TrainResult:
    run_dir: Path
    final_checkpoint: Path
    log_path: Path
    steps: int
    wall_seconds: float
    trainable_parameters: int


def _save_train_state(path, model: TryOffModel, opt: AdamW, step: int) -> None:
    extra = opt.state_arrays()
    extra["meta.step"] = np.array([step], np.float32)
    extra["meta.latent_std"] = np.array([model.latent_std], np.float32)
    # pending gradients keep mid-accumulation interruptions exactly resumable
    for p in model.trainable_parameters():
        if p.value.grad is not None:
            extra[f"grad.{p.name}"] = p.value.grad
    ckpt.save_params(path, model.parameters(), extra=extra)


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, data_dir, out_dir,
          vae_ckpt=None, backbone_ckpt=None, resume: bool = False,
          unfreeze_backbone: bool = False) -> TrainResult:
    """Run stage 1 + stage 2 for one ablation case."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vae_ckpt = Path(vae_ckpt) if vae_ckpt else out / "vae.ckpt"
    backbone_ckpt = Path(backbone_ckpt) if backbone_ckpt else out / "backbone.ckpt"
    if not vae_ckpt.exists():
        raise StateError(f"pretrained VAE not found at {vae_ckpt}; run pretrain-vae first")
    if not backbone_ckpt.exists():
        log.info("no backbone checkpoint at %s; pretraining one", backbone_ckpt)
        pretrain_backbone(train_cfg, data_dir, vae_ckpt, backbone_ckpt)

    model_cfg = dataclasses.replace(model_cfg, ref_scale=train_cfg.ref_scale)
    model = prepare_model(model_cfg, train_cfg.seed, vae_ckpt, backbone_ckpt,
                          unfreeze_backbone=unfreeze_backbone)
    model_cfg.save(out / "model_config.txt")
    train_cfg.save(out / "train_config.txt")
    (out / "trainable_params.txt").write_text(
        "".join(f"{p.name}\t{p.value.size}\n" for p in model.trainable_parameters()))

    ds = load_pairs(data_dir)
    sched = make_schedule(train_cfg.timesteps)
    train_pos = ds.train_positions()
    cache = _precompute(model, ds, model.latent_std, train_pos)
    featnet = FeatureNet()
    frozen_ref = freeze_checksums(model)

    trainables = model.trainable_parameters()
    opt = AdamW(trainables)
    start_step = 0
    if resume:
        states = sorted(out.glob("train_state_*.ckpt"),
                        key=lambda p: int(p.stem.split("_")[-1]))
        if states:
            leftovers = ckpt.load_into(states[-1], model.parameters(), strict=True)
            opt.load_state_arrays(leftovers)
            start_step = int(leftovers["meta.step"][0])
            for p in trainables:
                pending = leftovers.get(f"grad.{p.name}")
                if pending is not None:
                    p.value.grad = pending.astype(np.float32).copy()
            log.info("resumed from %s at step %d", states[-1], start_step)

    total_steps = train_cfg.stage1_steps + train_cfg.stage2_steps
    steps_per_epoch = max(1, len(train_pos) // train_cfg.micro_batch)
    log_lines: List[str] = []
    log_path = out / "train.log"
    t_start = time.time()

    def lr_at(step: int, stage: int) -> float:
        return stage1_lr(train_cfg, step) if stage == 1 else train_cfg.lr_stage2

    for step in range(start_step + 1, total_steps + 1):
        stage = 1 if step <= train_cfg.stage1_steps else 2
        epoch, pos_in = divmod(step - 1, steps_per_epoch)
        order = _stream(train_cfg.seed, "shuffle", epoch).permutation(train_pos)
        sel = order[pos_in * train_cfg.micro_batch:(pos_in + 1) * train_cfg.micro_batch]

        z0 = cache.flat[sel]
        t = _stream(train_cfg.seed, "t", step).integers(0, sched.timesteps, size=len(sel))
        eps = _stream(train_cfg.seed, "eps", step).standard_normal(z0.shape).astype(np.float32)
        z_t_np = add_noise(z0, eps, t, sched)
        drop = _stream(train_cfg.seed, "drop", step).random() < train_cfg.cfg_drop_prob

        ref_feats = None
        cond = None if drop else model.prompt_tokens.value
        if model.reference is not None and not drop:
            tokens = model.image_proj(Tensor(cache.stack_tokens[sel]))
            ref_feats = model.reference_forward(Tensor(cache.worn[sel]), tokens)

        z_t = Tensor(z_t_np)
        pred = model.denoise_forward(z_t, t, cond, ref_feats)
        l_ldm = ldm_loss(pred, eps)
        if stage == 1:
            loss = l_ldm
            l_lpips_val = None
        else:
            ab = sched.alpha_bar[t].astype(np.float32)
            c_zt = (1.0 / np.sqrt(ab)).reshape(-1, 1, 1, 1)
            c_eps = (np.sqrt(1.0 - ab) / np.sqrt(ab)).reshape(-1, 1, 1, 1)
            zhat0 = t_add(t_scale(z_t, c_zt), t_scale(pred, -c_eps))
            x_hat = model.vae.decode(t_scale(zhat0, model.latent_std))
            l_lpips = perceptual_loss(Tensor(ds.flat[sel]), x_hat, featnet)
            loss = total_loss(l_ldm, l_lpips, train_cfg.lambda_lpips)
            l_lpips_val = float(l_lpips.item())

        if trainables:
            backward(loss)
        lr = lr_at(step if stage == 1 else step - train_cfg.stage1_steps, stage)
        if step % train_cfg.grad_accum == 0 and trainables:
            inv = 1.0 / train_cfg.grad_accum
            for p in trainables:
                if p.value.grad is not None:
                    p.value.grad *= inv
            opt.step(lr)
            opt.zero_grad()

        parts = [f"step={step}", f"stage={stage}", f"lr={lr:.3e}",
                 f"l_ldm={float(l_ldm.item()):.6f}"]
        if l_lpips_val is not None:
            parts.append(f"l_lpips={l_lpips_val:.6f}")
        parts.append(f"l_total={float(loss.item()):.6f}")
        log_lines.append(" ".join(parts))

        if step % train_cfg.freeze_check_every == 0 or step == total_steps:
            verify_freeze(model, frozen_ref)
        if step % train_cfg.checkpoint_every == 0 or step in (train_cfg.stage1_steps, total_steps):
            _save_train_state(out / f"train_state_{step}.ckpt", model, opt, step)
            states = sorted(out.glob("train_state_*.ckpt"),
                            key=lambda p: int(p.stem.split("_")[-1]))
            for old in states[:-2]:
                old.unlink()
            log_path.write_text("\n".join(log_lines) + "\n")
        if step == train_cfg.stage1_steps:
            ckpt.save_params(out / "model_stage1.ckpt", model.parameters(),
                             extra={"meta.latent_std": np.array([model.latent_std], np.float32)})

    verify_freeze(model, frozen_ref)
    final = out / "model_final.ckpt"
    ckpt.save_params(final, model.parameters(),
                     extra={"meta.latent_std": np.array([model.latent_std], np.float32)})
    log_path.write_text("\n".join(log_lines) + "\n")
    return TrainResult(run_dir=out, final_checkpoint=final, log_path=log_path,
                       steps=total_steps, wall_seconds=time.time() - t_start,
                       trainable_parameters=int(sum(p.value.size for p in trainables)))


# -- sampling / evaluation helpers ----------------------------------------------------------


def sample_to_dir(model: TryOffModel, ds: PairDataset, positions: Sequence[int],
                  gen_dir, gt_dir, sampler_cfg: SamplerConfig,
                  ref_scale: Optional[float] = None, batch: int = 25) -> None:
    """Generate flat-lays for the given dataset positions and write paired
    PNG directories (generated vs ground truth)."""
    gen_dir, gt_dir = Path(gen_dir), Path(gt_dir)
    gen_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    positions = np.asarray(positions)
    for k in range(0, len(positions), batch):
        sel = positions[k:k + batch]
        imgs = sample(model, ds.worn[sel], sampler_cfg, ref_scale=ref_scale)
        for j, p in enumerate(sel):
            name = f"{ds.indices[p]:05d}.png"
            save_png(gen_dir / name, (imgs[j].transpose(1, 2, 0) + 1.0) / 2.0)
            save_png(gt_dir / name, (ds.flat[p].transpose(1, 2, 0) + 1.0) / 2.0)


def evaluate_run(run_dir, data_dir, sampler_cfg: Optional[SamplerConfig] = None,
                 ref_scale: Optional[float] = None, tag: str = "eval",
                 max_pairs: Optional[int] = None) -> MetricsReport:
    """Sample the test split with a trained model and score it."""
    run_dir = Path(run_dir)
    model = load_model_dir(run_dir)
    ds = load_pairs(data_dir)
    pos = ds.test_positions()
    if max_pairs is not None:
        pos = pos[:max_pairs]
    sampler_cfg = sampler_cfg or SamplerConfig()
    gen = run_dir / tag / "gen"
    gt = run_dir / tag / "gt"
    sample_to_dir(model, ds, pos, gen, gt, sampler_cfg, ref_scale=ref_scale)
    report = evaluate(gen, gt, out_path=run_dir / tag / "report.txt")
    return report


# -- ablation harness -------------------------------------------------------------------------


@dataclass
class AblationResult:
    case: str
    report: MetricsReport
    trainable_parameters: int
    wall_seconds: float


def _result_row(r: AblationResult) -> str:
    s = r.report.scaled()
    return "\t".join([r.case] + [f"{s[k]:.3f}" for k in
                                 ("ssim", "ms_ssim", "cw_ssim", "dists", "lpips", "fid", "kid")]
                     + [str(r.trainable_parameters), f"{r.wall_seconds:.1f}"])


TABLE_HEADER = "case\tssim\tms_ssim\tcw_ssim\tdists\tlpips\tfid\tkid\ttrainable\twall_s"


def run_ablation(cases: Sequence[str], train_cfg: TrainConfig, data_dir, out_dir,
                 model_cfg: Optional[ModelConfig] = None,
                 include_unfrozen: bool = False,
                 extra_full_seeds: Sequence[int] = (),
                 max_eval_pairs: Optional[int] = None) -> List[AblationResult]:
    """Train and evaluate each case with identical seed/data/steps; write the
    results table. Optional extras: an unfrozen-backbone comparison run and
    additional seeds of the full case (for seed-variance estimates)."""
    from .networks import CASES
    for c in cases:
        if c not in CASES:
            raise ConfigError(f"unknown ablation case {c!r}; expected subset of {CASES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_cfg = model_cfg or ModelConfig()
    vae_ckpt = out / "vae.ckpt"
    backbone_ckpt = out / "backbone.ckpt"
    if not vae_ckpt.exists():
        pretrain_vae(train_cfg, data_dir, vae_ckpt)
    if not backbone_ckpt.exists():
        pretrain_backbone(train_cfg, data_dir, vae_ckpt, backbone_ckpt)

    sampler_cfg = SamplerConfig(steps=train_cfg.sample_steps, guidance=train_cfg.guidance,
                                seed=10_000 + train_cfg.seed)
    results: List[AblationResult] = []
    failures: List[str] = []

    def run_one(run_name: str, case: str, seed: int, unfreeze: bool,
                eval_ref_scale: Optional[float] = None) -> Optional[AblationResult]:
        run_dir = out / run_name
        cfg_i = dataclasses.replace(train_cfg, seed=seed)
        mc = dataclasses.replace(base_cfg, case=case)
        try:
            if not (run_dir / "model_final.ckpt").exists():
                res = train(cfg_i, mc, data_dir, run_dir, vae_ckpt=vae_ckpt,
                            backbone_ckpt=backbone_ckpt, unfreeze_backbone=unfreeze)
                wall = res.wall_seconds
                n_train = res.trainable_parameters
            else:
                wall = 0.0
                n_train = sum(int(line.split("\t")[1]) for line in
                              (run_dir / "trainable_params.txt").read_text().splitlines())
            report_path = run_dir / "eval" / "report.txt"
            if report_path.exists():
                report = MetricsReport.load(report_path)
            else:
                report = evaluate_run(run_dir, data_dir, sampler_cfg,
                                      ref_scale=eval_ref_scale, max_pairs=max_eval_pairs)
            return AblationResult(run_name, report, n_train, wall)
        except StateError as e:
            failures.append(f"{run_name}: {e}")
            log.error("case %s failed: %s", run_name, e)
            return None

    for case in cases:
        r = run_one(case, case, train_cfg.seed, unfreeze=False)
        if r:
            results.append(r)
    for s in extra_full_seeds:
        r = run_one(f"full_seed{s}", "full", s, unfreeze=False)
        if r:
            results.append(r)
    if include_unfrozen:
        r = run_one("full_unfrozen", "full", train_cfg.seed, unfreeze=True)
        if r:
            results.append(r)
        frozen = next((x for x in results if x.case == "full"), None)
        if frozen and r:
            gap = r.report.scaled()["lpips"] - frozen.report.scaled()["lpips"]
            (out / "freeze_comparison.txt").write_text(
                TABLE_HEADER + "\n" + _result_row(frozen) + "\n" + _result_row(r)
                + f"\nlpips_gap_unfrozen_minus_frozen={gap:.3f}\n")

    table = [TABLE_HEADER] + [_result_row(r) for r in results]
    if failures:
        table += [f"# FAILED {f}" for f in failures]
    (out / "ablation_table.tsv").write_text("\n".join(table) + "\n")
    return results


def ref_scale_sweep(run_dir, data_dir, scales=(0.0, 0.5, 1.0, 1.5),
                    sampler_cfg: Optional[SamplerConfig] = None,
                    max_pairs: Optional[int] = 32) -> Dict[float, float]:
    """Evaluate a trained full model at several inference blend weights;
    returns raw perceptual distance per scale and writes sweep images for
    the first test input."""
    run_dir = Path(run_dir)
    model = load_model_dir(run_dir)
    ds = load_pairs(data_dir)
    pos = ds.test_positions()[: (max_pairs or len(ds.test_positions()))]
    sampler_cfg = sampler_cfg or SamplerConfig()
    sweep_dir = run_dir / "scale_sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    out: Dict[float, float] = {}
    for lam in scales:
        gen = sweep_dir / f"gen_{lam:g}"
        gt = sweep_dir / f"gt_{lam:g}"
        sample_to_dir(model, ds, pos, gen, gt, sampler_cfg, ref_scale=lam)
        report = evaluate(gen, gt)
        out[lam] = report.lpips
        first = sorted(gen.glob("*.png"))[0]
        (sweep_dir / f"sample_scale_{lam:g}.png").write_bytes(first.read_bytes())
    (sweep_dir / "sweep.txt").write_text(
        "".join(f"ref_scale={lam:g} lpips={v:.6f}\n" for lam, v in out.items()))
    return out
