import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY_TRAIN_KWARGS = dict(stage1_steps=12, stage2_steps=4, warmup_steps=8,
                         vae_steps=30, backbone_steps=10, vae_psnr_gate=0.0,
                         checkpoint_every=8, freeze_check_every=4,
                         sample_steps=4, micro_batch=2, grad_accum=2)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A miniature but complete pipeline artifact: dataset, VAE, backbone and
    one trained 'full' run. Shared by training/CLI tests."""
    from tryoff.networks import ModelConfig
    from tryoff.synthdata import gen_dataset
    from tryoff.training import TrainConfig, pretrain_vae, train

    root = tmp_path_factory.mktemp("tiny")
    data = root / "data"
    run = root / "run"
    gen_dataset(24, seed=5, out_dir=data)
    cfg = TrainConfig(seed=5, **TINY_TRAIN_KWARGS)
    pretrain_vae(cfg, data, run / "vae.ckpt")
    train(cfg, ModelConfig(case="full"), data, run)
    return {"data": data, "run": run, "cfg": cfg}


def to_double(params):
    """Cast parameters to float64 in place (test-only; sharpens FD oracles)."""
    for p in params:
        p.value.data = p.value.data.astype(np.float64)


def finite_difference_check(loss_fn, targets, eps=1e-3, rel_tol=1e-3,
                            percentile=90, max_elems=64, seed=0,
                            min_grad=1e-6):
    """Central finite differences vs analytic gradients.

    `loss_fn()` must rebuild the graph and return the scalar loss Tensor;
    `targets` are Tensors whose `.grad` the analytic pass populates. For each
    target, up to `max_elems` random elements are probed. Asserts the given
    percentile of relative errors (over elements with |grad| > min_grad)
    stays below `rel_tol`. Returns the collected relative errors.
    """
    from tryoff.tensor import backward

    for t in targets:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [t.grad.copy() for t in targets]
    rng_ = np.random.default_rng(seed)
    rel_errors = []
    for t, g in zip(targets, analytic):
        assert g is not None, "target received no gradient"
        flat = t.data.reshape(-1)
        idx = rng_.permutation(flat.size)[:max_elems]
        for i in idx:
            if abs(g.reshape(-1)[i]) <= min_grad:
                continue
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().item())
            flat[i] = orig - eps
            dn = float(loss_fn().item())
            flat[i] = orig
            fd = (up - dn) / (2 * eps)
            an = float(g.reshape(-1)[i])
            rel_errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    assert rel_errors, "no elements above the gradient-magnitude floor"
    assert np.percentile(rel_errors, percentile) < rel_tol, (
        f"FD mismatch: p{percentile} rel err "
        f"{np.percentile(rel_errors, percentile):.2e} >= {rel_tol}")
    return rel_errors
