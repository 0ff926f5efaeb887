"""Acceptance criteria, one test per criterion, each printing a PASS line.

Criteria 1-9 run directly. Criteria 10-12 need the full end-to-end study
(2000 pairs, 3000+300 steps per case); they are marked `e2e` and reuse the
cached artifacts under runs/e2e (override with TRYOFF_E2E_ROOT). Run
`pytest -m "not e2e"` to skip only those three. The first e2e run trains
everything and takes a few hours on CPU; later runs reuse the cache.
"""

import dataclasses
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from tryoff import checkpoint as ckpt
from tryoff.attention import HybridAttention, self_attention
from tryoff.diffusion import SamplerConfig, add_noise, cfg_combine, make_schedule, solve
from tryoff.losses import FeatureNet, ldm_loss, perceptual_loss
from tryoff.metrics import (GaussianStats, cw_ssim, dists, fid, kid,
                            kid_subset_estimates, lpips_distance, ms_ssim, ssim)
from tryoff.networks import ModelConfig, build_model
from tryoff.synthdata import gen_dataset
from tryoff.tensor import Tensor, mean_, square
from tryoff.training import TrainConfig, pretrain_vae, train

from conftest import finite_difference_check, to_double


def _report(num, name):
    print(f"\nACCEPTANCE {num} {name}: PASS")


def _texture(seed, size=64):
    r = np.random.default_rng(seed)
    xx, yy = np.meshgrid(np.arange(size), np.arange(size), indexing="xy")
    img = np.zeros((size, size))
    for _ in range(4):
        f = r.uniform(4, 14)
        th = r.uniform(0, np.pi)
        img += r.uniform(0.5, 1.0) * np.cos(
            2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)) / size + r.uniform(0, 6.28))
    return ((img - img.min()) / (img.max() - img.min())).astype(np.float32)


def test_criterion_1_hybrid_reduction_at_zero_blend():
    t0 = time.time()
    for seed in range(1000):
        r = np.random.default_rng(seed)
        d = int(r.choice([8, 16]))
        heads = int(r.choice([2, 4]))
        blk = HybridAttention(r, "b", d, head_count=heads, mode="hybrid")
        z = Tensor(r.standard_normal((1, int(r.integers(2, 6)), d)).astype(np.float32))
        ref = Tensor(r.standard_normal((1, int(r.integers(1, 7)), d)).astype(np.float32))
        out0 = blk(z, ref, ref_scale=0.0)
        base = self_attention(z, blk.weights)
        assert np.array_equal(out0.data, base.data), f"seed {seed}"
    elapsed = time.time() - t0
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    _report(1, "hybrid-attention reduction at zero blend (1000 instances, exact)")


def test_criterion_2_blend_linearity():
    t0 = time.time()
    for seed in range(100):
        r = np.random.default_rng(1000 + seed)
        d = int(r.choice([8, 16]))
        blk = HybridAttention(r, "b", d, head_count=2, mode="hybrid")
        z = Tensor(r.standard_normal((1, 4, d)).astype(np.float32))
        ref = Tensor(r.standard_normal((1, 5, d)).astype(np.float32))
        lam = float(r.uniform(0.1, 1.5))
        f0 = blk(z, ref, ref_scale=0.0).data
        f1 = blk(z, ref, ref_scale=1.0).data
        fl = blk(z, ref, ref_scale=lam).data
        lin = f0 + lam * (f1 - f0)
        rel = np.max(np.abs(fl - lin)) / (np.max(np.abs(lin)) + 1e-30)
        assert rel < 1e-6, f"seed {seed}: rel {rel:.2e}"
    elapsed = time.time() - t0
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    _report(2, "blend-weight three-point collinearity within 1e-6 (100 instances)")


def test_criterion_3_gradient_integrity():
    t0 = time.time()
    r = np.random.default_rng(7)

    blk = HybridAttention(r, "b", 8, head_count=2, mode="hybrid")
    to_double(blk.params())
    z = Tensor(r.standard_normal((1, 3, 8)), requires_grad=True, dtype=np.float64)
    ref = Tensor(r.standard_normal((1, 4, 8)), requires_grad=True, dtype=np.float64)
    finite_difference_check(lambda: mean_(square(blk(z, ref))),
                            [blk.weights.wk_ref.value, blk.weights.wv_ref.value, z, ref],
                            max_elems=24)

    a = Tensor(r.standard_normal((2, 4, 4, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(r.standard_normal((2, 4, 4, 4)), dtype=np.float64)
    finite_difference_check(lambda: ldm_loss(a, b), [a], max_elems=48)

    net = FeatureNet()
    to_double(net.params())
    x = Tensor(r.uniform(-1, 1, size=(1, 3, 16, 16)), requires_grad=True,
               dtype=np.float64)
    y = Tensor(r.uniform(-1, 1, size=(1, 3, 16, 16)), dtype=np.float64)
    finite_difference_check(lambda: perceptual_loss(x, y, net), [x], max_elems=32)

    m = build_model(ModelConfig(case="full", widths=(8, 8, 8), heads=2), seed=2)
    to_double(m.parameters())
    w_out = m.denoise.conv_out.w.value
    w_out.data = r.normal(0.0, 0.2, size=w_out.shape)
    z_t = Tensor(r.standard_normal((1, 4, 8, 8)), requires_grad=True, dtype=np.float64)
    ref_feats = [Tensor(r.standard_normal((1, n, 8)), dtype=np.float64)
                 for n in (64, 16, 4, 4, 4, 16, 64)]
    site0 = m.denoise.sites[0].attn1.weights
    finite_difference_check(
        lambda: mean_(square(m.denoise_forward(z_t, 5, m.prompt_tokens.value, ref_feats))),
        [z_t, site0.wk_ref.value, site0.wv_ref.value], max_elems=12)

    elapsed = time.time() - t0
    assert elapsed < 300.0, f"took {elapsed:.1f}s"
    _report(3, "finite-difference gradient integrity (block, losses, full forward)")


def test_criterion_4_freeze_partition_after_200_steps(tmp_path):
    t0 = time.time()
    data = tmp_path / "data"
    run = tmp_path / "run"
    gen_dataset(64, seed=9, out_dir=data)
    cfg = TrainConfig(seed=9, stage1_steps=200, stage2_steps=0, warmup_steps=100,
                      vae_steps=40, backbone_steps=40, vae_psnr_gate=0.0,
                      checkpoint_every=100, freeze_check_every=50)
    pretrain_vae(cfg, data, run / "vae.ckpt")
    train(cfg, ModelConfig(case="full"), data, run)

    final, _ = ckpt.load_arrays(run / "model_final.ckpt")
    vae_arrays, _ = ckpt.load_arrays(run / "vae.ckpt")
    bb_arrays, _ = ckpt.load_arrays(run / "backbone.ckpt")
    fresh = build_model(ModelConfig(case="full"), seed=9)
    init_by_name = {p.name: p.value.data for p in fresh.parameters()}

    trainable_names = set()
    for line in (run / "trainable_params.txt").read_text().splitlines():
        trainable_names.add(line.split("\t")[0])
    for n in trainable_names:
        assert (n.startswith("reference.") or n.startswith("image_proj.")
                or n.endswith((".wk_ref", ".wv_ref"))), n
    assert any(n.startswith("reference.") for n in trainable_names)
    assert any(n.startswith("image_proj.") for n in trainable_names)
    assert sum(n.endswith(".wk_ref") for n in trainable_names) == 7

    for name, arr in final.items():
        if name.startswith("meta.") or name in trainable_names:
            continue
        if name.startswith("vae."):
            assert np.array_equal(arr, vae_arrays[name]), name
        elif name.startswith("denoise.") or name == "prompt.tokens":
            assert np.array_equal(arr, bb_arrays[name]), name
        elif name.startswith("reference."):
            continue  # trainable as a group
        else:
            assert np.array_equal(arr, init_by_name[name]), name
    elapsed = time.time() - t0
    assert elapsed < 600.0, f"took {elapsed:.1f}s"
    _report(4, "freeze partition exact after 200 training steps")


def test_criterion_5_guidance_contract():
    r = np.random.default_rng(11)
    c = r.standard_normal((2, 4, 8, 8)).astype(np.float32)
    u = r.standard_normal((2, 4, 8, 8)).astype(np.float32)
    assert np.allclose(cfg_combine(np.array([1.0]), np.array([0.0]), 2.0), [2.0])
    assert np.array_equal(cfg_combine(c, u, 1.0), c)
    for w in (-0.5, 0.0, 0.3, 1.0, 2.0, 3.7, 7.5):
        lhs = cfg_combine(c, u, w)
        rhs = u + w * (c - u)
        assert np.max(np.abs(lhs - rhs)) <= 1e-6 * max(1.0, float(np.max(np.abs(rhs))))
    _report(5, "guidance combination exact; equivalent to extrapolation form")


def test_criterion_6_noising_statistics():
    t0 = time.time()
    sched = make_schedule(1000)
    n = 100_000
    for t in (100, 500, 900):
        r = np.random.default_rng(50 + t)
        z0 = (1.7 * r.standard_normal(n)).astype(np.float32)
        eps = r.standard_normal(n).astype(np.float32)
        zt = add_noise(z0, eps, t, sched)
        expected = sched.alpha_bar[t] * z0.var() + (1.0 - sched.alpha_bar[t])
        assert abs(zt.var() - expected) / expected < 0.02, f"t={t}"
    elapsed = time.time() - t0
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    _report(6, "noising variance matches schedule within 2% (t=100/500/900)")


def test_criterion_7_sampler_recovers_linear_ode_target():
    sched = make_schedule(1000)
    r = np.random.default_rng(23)
    z0 = r.standard_normal((2, 4, 8, 8)).astype(np.float32)

    def eps_oracle(z, t):
        return (z - sched.signal(t) * z0) / sched.noise(t)

    z_init = r.standard_normal(z0.shape).astype(np.float32)
    out = solve(eps_oracle, z_init, sched, 25)
    err = float(np.max(np.abs(out - z0)))
    assert err < 1e-3, f"L-inf {err:.2e}"
    _report(7, "25-step deterministic solver recovers the analytic ODE target")


def test_criterion_8_metric_identities():
    t0 = time.time()
    r = np.random.default_rng(3)
    x = r.random((64, 64, 3)).astype(np.float32)
    assert abs(ssim(x, x) - 1.0) < 1e-6
    assert abs(ms_ssim(x, x) - 1.0) < 1e-6
    assert abs(cw_ssim(x, x) - 1.0) < 1e-6
    net = FeatureNet()
    assert lpips_distance(x, x, net) == 0.0
    assert abs(dists(x, x, net)) < 1e-6

    for seed in range(20):
        rr = np.random.default_rng(seed)
        d = int(rr.integers(1, 6))
        v1 = rr.uniform(0.1, 4.0, d)
        v2 = rr.uniform(0.1, 4.0, d)
        m1 = rr.standard_normal(d)
        m2 = rr.standard_normal(d)
        expected = float(np.sum((m1 - m2) ** 2) + np.sum(v1 + v2 - 2 * np.sqrt(v1 * v2)))
        got = fid(GaussianStats(m1, np.diag(v1)), GaussianStats(m2, np.diag(v2)))
        assert abs(got - expected) < 1e-6

    vals = []
    for s in range(50):
        rr = np.random.default_rng(900 + s)
        vals.append(kid(rr.standard_normal((300, 4)), rr.standard_normal((300, 4)),
                        seed=s))
    se = np.std(vals) / np.sqrt(len(vals))
    assert abs(np.mean(vals)) < 3 * se
    elapsed = time.time() - t0
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    _report(8, "metric identities, Frechet closed forms, kernel-MMD null")


def test_criterion_9_wavelet_translation_robustness():
    wins = 0
    for seed in range(20):
        t = _texture(seed)
        shifted = np.roll(t, 2, axis=1)
        if cw_ssim(t, shifted) > ssim(t, shifted):
            wins += 1
    assert wins >= 18, f"only {wins}/20"
    _report(9, f"wavelet index beats plain SSIM under 2-px shifts ({wins}/20)")


# -- end-to-end directional criteria -------------------------------------------------


E2E_ROOT = Path(os.environ.get("TRYOFF_E2E_ROOT", Path(__file__).resolve().parent.parent
                               / "runs" / "e2e"))


@pytest.fixture(scope="session")
def study_summary():
    from tryoff.study import ensure_study, load_summary
    summary = load_summary(E2E_ROOT)
    if summary is None:
        summary = ensure_study(E2E_ROOT)
    return summary


@pytest.mark.e2e
def test_criterion_10_ablation_ordering(study_summary):
    cases = study_summary["cases"]
    full = cases["full"]
    base = cases["baseline"]
    seeds = [cases["full"], cases["full_seed1"], cases["full_seed2"]]
    ssim_std = float(np.std([s["ssim"] for s in seeds]))
    lpips_std = float(np.std([s["lpips"] for s in seeds]))

    ssim_margin = full["ssim"] - base["ssim"]
    lpips_margin = base["lpips"] - full["lpips"]
    assert ssim_margin > ssim_std, (ssim_margin, ssim_std)
    assert lpips_margin > lpips_std, (lpips_margin, lpips_std)

    scale0 = study_summary["full_scale0"]
    assert full["lpips"] < scale0["lpips"]
    assert full["ssim"] > scale0["ssim"]

    for case in ("encoder_only", "decoder_only"):
        assert cases[case]["ssim"] > base["ssim"], case
        assert cases[case]["lpips"] < base["lpips"], case
    _report(10, "full > baseline beyond seed noise"
            + f" (SSIM +{ssim_margin:.2f} vs std {ssim_std:.2f}; "
              f"LPIPS -{lpips_margin:.2f} vs std {lpips_std:.2f}); partial cases > baseline")


@pytest.mark.e2e
def test_criterion_11_freeze_comparison_table(study_summary):
    table = (E2E_ROOT / "freeze_comparison.txt").read_text()
    assert "full" in table and "full_unfrozen" in table
    assert "lpips_gap_unfrozen_minus_frozen=" in table
    gap = float(table.rsplit("=", 1)[1])
    frozen = study_summary["cases"]["full"]["lpips"]
    unfrozen = study_summary["cases"]["full_unfrozen"]["lpips"]
    assert np.isclose(gap, unfrozen - frozen, atol=1e-3)
    verdict = "frozen <= unfrozen" if frozen <= unfrozen else \
        f"unfrozen better by {-gap:.2f} (reported)"
    _report(11, f"freezing comparison table produced; {verdict}")


@pytest.mark.e2e
def test_criterion_12_blend_sweep_interior_optimum(study_summary):
    sweep = {float(k): v for k, v in study_summary["sweep_lpips_raw"].items()}
    assert set(sweep) == {0.0, 0.5, 1.0, 1.5}
    sweep_dir = E2E_ROOT / "full" / "scale_sweep"
    images = list(sweep_dir.glob("sample_scale_*.png"))
    assert len(images) == 4  # one emitted image per blend weight
    best = min(sweep, key=sweep.get)
    assert best in (0.5, 1.0), f"optimum at {best}: {sweep}"
    _report(12, f"blend sweep optimum interior at {best} "
                f"({ {k: round(v, 4) for k, v in sorted(sweep.items())} })")
