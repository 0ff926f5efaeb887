"""Image-quality metric suite: SSIM, multi-scale SSIM, complex-wavelet SSIM,
deep-feature perceptual distance, structure-texture distance, and the
distributional scores (Frechet distance and kernel MMD) over pooled
feature-net embeddings.

All pairwise metrics take images as float arrays in [0, 1], either [H,W] or
[H,W,3] (converted to luma internally where the metric is grayscale).
Absolute values of the learned-feature metrics are tied to the local
seeded feature extractor, so only orderings are comparable with published
numbers; report scaling follows the usual table conventions (SSIM family
and feature distances x100, kernel score x1000).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import (DataError, DimensionError, NumericalError, PairingError,
                     SizeError)
from .losses import FeatureNet, perceptual_loss
from .tensor import no_grad

_MS_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])


# -- helpers -------------------------------------------------------------------


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 3:
            raise DimensionError(f"expected [H,W] or [H,W,3] image, got {img.shape}")
        return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    if img.ndim != 2:
        raise DimensionError(f"expected [H,W] or [H,W,3] image, got {img.shape}")
    return img


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if np.asarray(a).shape != np.asarray(b).shape:
        raise DimensionError(f"image shapes differ: {np.asarray(a).shape} vs {np.asarray(b).shape}")


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k1 = np.exp(-0.5 * (r / sigma) ** 2)
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    win = np.lib.stride_tricks.sliding_window_view(img, (kh, kw))
    return np.einsum("ijkl,kl->ij", win, kernel)


# -- SSIM family -----------------------------------------------------------------


def _ssim_maps(a: np.ndarray, b: np.ndarray, data_range: float = 1.0,
               window: int = 11, sigma: float = 1.5) -> Tuple[np.ndarray, np.ndarray]:
    """(luminance*cs map, cs map) of the windowed structural similarity."""
    x, y = _to_gray(a), _to_gray(b)
    if min(x.shape) < window:
        raise SizeError(f"image {x.shape} smaller than the {window}x{window} window")
    k = _gaussian_kernel(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mu_x * mu_x
    syy = _filter_valid(y * y, k) - mu_y * mu_y
    sxy = _filter_valid(x * y, k) - mu_x * mu_y
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    lum = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return lum * cs, cs


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local structural similarity (11x11 Gaussian window, sigma 1.5)."""
    _check_pair(a, b)
    full, _ = _ssim_maps(a, b, data_range)
    return float(full.mean())


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def auto_ms_levels(shape: Tuple[int, int], window: int = 11) -> int:
    side = min(shape[0], shape[1])
    levels = int(np.floor(np.log2(side / window))) + 1
    return max(0, min(5, levels))


def ms_ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0,
            levels: Optional[int] = None) -> float:
    """Multi-scale structural similarity.

    Contrast/structure terms are accumulated across dyadic scales with the
    luminance term applied at the coarsest scale; the canonical five weights
    are truncated to the scale count and renormalized. At 64 px three scales
    fit; `levels=1` degenerates to plain SSIM.
    """
    _check_pair(a, b)
    x, y = _to_gray(a), _to_gray(b)
    if levels is None:
        levels = auto_ms_levels(x.shape)
        if levels < 2:
            raise SizeError(f"image {x.shape} too small for 2 dyadic scales")
    if levels < 1 or min(x.shape) // (2 ** (levels - 1)) < 11:
        raise SizeError(f"image {x.shape} too small for {levels} dyadic scales")
    w = _MS_WEIGHTS[:levels] / _MS_WEIGHTS[:levels].sum()
    score = 1.0
    for lvl in range(levels):
        if lvl < levels - 1:
            _, cs = _ssim_maps(x, y, data_range)
            score *= max(float(cs.mean()), 0.0) ** w[lvl]
            x, y = _downsample2(x), _downsample2(y)
        else:
            full, _ = _ssim_maps(x, y, data_range)
            score *= max(float(full.mean()), 0.0) ** w[lvl]
    return float(score)


# -- complex-wavelet SSIM -----------------------------------------------------------


def _fft_filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Circular convolution with a centered kernel, via the FFT."""
    h, w = img.shape
    pad = np.zeros((h, w), dtype=complex)
    kh, kw = kernel.shape
    pad[:kh, :kw] = kernel
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.ifft2(np.fft.fft2(img) * np.fft.fft2(pad))


def _gabor_bank(orientations: int = 4, wavelengths=(6.0, 12.0)) -> List[np.ndarray]:
    bank = []
    for lam in wavelengths:
        sigma = 0.6 * lam
        half = int(np.ceil(2.5 * sigma))
        xs = np.arange(-half, half + 1)
        xx, yy = np.meshgrid(xs, xs, indexing="xy")
        env = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))
        for k in range(orientations):
            th = np.pi * k / orientations
            carrier = np.exp(1j * 2 * np.pi * (xx * np.cos(th) + yy * np.sin(th)) / lam)
            g = env * carrier
            g -= env * (g.sum() / env.sum())        # zero DC response
            g /= np.sqrt((np.abs(g) ** 2).sum())
            bank.append(g)
    return bank


_CW_BANK_CACHE: dict = {}


def cw_ssim(a: np.ndarray, b: np.ndarray, window: int = 7, k_stab: float = 1e-8) -> float:
    """Structural similarity on complex Gabor coefficients (4 orientations x
    2 scales), with a Gaussian lowpass luminance factor.

    The band terms compare coefficient magnitude and relative phase inside
    local windows, which makes the index tolerant to small translations; the
    luminance factor penalizes mean-level changes such as sign inversion.
    """
    _check_pair(a, b)
    x, y = _to_gray(a), _to_gray(b)
    key = ("bank",)
    if key not in _CW_BANK_CACHE:
        _CW_BANK_CACHE[key] = _gabor_bank()
    bank = _CW_BANK_CACHE[key]
    box = np.ones((window, window)) / (window * window)
    band_maps = []
    for g in bank:
        cx = _fft_filter(x, g)
        cy = _fft_filter(y, g)
        s12 = _fft_filter(cx * np.conj(cy), box)
        s11 = _fft_filter(np.abs(cx) ** 2 + 0j, box).real
        s22 = _fft_filter(np.abs(cy) ** 2 + 0j, box).real
        band_maps.append((2.0 * np.abs(s12) + k_stab) / (s11 + s22 + k_stab))
    band = np.mean(band_maps, axis=0)

    lp = _gaussian_kernel(9, 2.0)
    mu_x = _fft_filter(x + 0j, lp).real
    mu_y = _fft_filter(y + 0j, lp).real
    c1 = 1e-4
    lum = (2.0 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    return float((lum * band).mean())


# -- learned-feature metrics ----------------------------------------------------------


_DEFAULT_NET: Optional[FeatureNet] = None


def default_feature_net() -> FeatureNet:
    global _DEFAULT_NET
    if _DEFAULT_NET is None:
        _DEFAULT_NET = FeatureNet()
    return _DEFAULT_NET


def _to_net_input(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected [H,W] or [H,W,3] image, got {img.shape}")
    return (img.transpose(2, 0, 1)[None] * 2.0 - 1.0)


def lpips_distance(a: np.ndarray, b: np.ndarray, net: Optional[FeatureNet] = None) -> float:
    """Perceptual distance between two [0,1] images (raw, unscaled)."""
    _check_pair(a, b)
    net = net or default_feature_net()
    with no_grad():
        return float(perceptual_loss(_to_net_input(a), _to_net_input(b), net).item())


def dists(a: np.ndarray, b: np.ndarray, net: Optional[FeatureNet] = None) -> float:
    """Structure-texture distance: one minus the mean of per-channel global
    mean (texture) and correlation (structure) similarities across taps."""
    _check_pair(a, b)
    net = net or default_feature_net()
    c_stab = 1e-6
    with no_grad():
        taps_a = [t.data[0] for t in net.taps(_to_net_input(a))]
        taps_b = [t.data[0] for t in net.taps(_to_net_input(b))]
    sims = []
    for fa, fb in zip(taps_a, taps_b):
        fa = fa.reshape(fa.shape[0], -1).astype(np.float64)
        fb = fb.reshape(fb.shape[0], -1).astype(np.float64)
        mu_a, mu_b = fa.mean(axis=1), fb.mean(axis=1)
        va = fa.var(axis=1)
        vb = fb.var(axis=1)
        cov = ((fa - mu_a[:, None]) * (fb - mu_b[:, None])).mean(axis=1)
        texture = (2 * mu_a * mu_b + c_stab) / (mu_a ** 2 + mu_b ** 2 + c_stab)
        structure = (2 * cov + c_stab) / (va + vb + c_stab)
        sims.append(0.5 * (texture + structure))
    return float(1.0 - np.mean([s.mean() for s in sims]))


# -- distribution metrics ----------------------------------------------------------------


@dataclass
class GaussianStats:
    """Mean vector and covariance of a set of feature embeddings."""

    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mu.shape[0], self.mu.shape[0]):
            raise DimensionError(f"covariance shape {self.cov.shape} does not match mean {self.mu.shape}")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-6:
            raise NumericalError("covariance is not symmetric within 1e-6")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise SizeError(f"need [n>=2, d] features, got {feats.shape}")
        mu = feats.mean(axis=0)
        cov = np.cov(feats, rowvar=False)
        cov = np.atleast_2d(cov)
        return cls(mu, 0.5 * (cov + cov.T))


def _sqrtm_psd(mat: np.ndarray, tol: float = -1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    scale = max(1.0, float(np.max(np.abs(vals))))
    if vals.min() < tol * scale:
        raise NumericalError(f"matrix has negative eigenvalue {vals.min():.3e} beyond tolerance")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(stats_a: GaussianStats, stats_b: GaussianStats) -> float:
    """Frechet distance between two Gaussians:
    |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})."""
    if stats_a.mu.shape != stats_b.mu.shape:
        raise DimensionError(f"feature dims differ: {stats_a.mu.shape} vs {stats_b.mu.shape}")
    root_a = _sqrtm_psd(stats_a.cov)
    inner = _sqrtm_psd(root_a @ stats_b.cov @ root_a)
    diff = stats_a.mu - stats_b.mu
    val = float(diff @ diff + np.trace(stats_a.cov) + np.trace(stats_b.cov)
                - 2.0 * np.trace(inner))
    return max(val, 0.0) if val > -1e-6 else val


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid_subset_estimates(feats_a: np.ndarray, feats_b: np.ndarray,
                         n_subsets: int = 10, max_subset: int = 100,
                         seed: int = 0) -> np.ndarray:
    """Per-subset kernel-MMD^2 estimates (the complete U-statistic form).

    All three terms exclude the positional diagonal, so the estimate is
    exactly zero when the two sides are the same paired sample set; it stays
    unbiased for independent samples. Subsets share index positions when the
    two sides have equal size.
    """
    fa = np.asarray(feats_a, dtype=np.float64)
    fb = np.asarray(feats_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2:
        raise DimensionError("features must be [n, d] arrays")
    if fa.shape[1] != fb.shape[1]:
        raise DimensionError(f"feature dims differ: {fa.shape} vs {fb.shape}")
    n, m = fa.shape[0], fb.shape[0]
    if n < 2 or m < 2:
        raise SizeError(f"need at least 2 samples per side, got {n} and {m}")
    s = min(n, m, max_subset)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_subsets):
        idx_a = rng.choice(n, s, replace=False)
        idx_b = idx_a if n == m else rng.choice(m, s, replace=False)
        xa = fa[idx_a]
        xb = fb[idx_b]
        kaa = _poly_kernel(xa, xa)
        kbb = _poly_kernel(xb, xb)
        kab = _poly_kernel(xa, xb)
        off = lambda k: k.sum() - np.trace(k)  # noqa: E731
        vals.append((off(kaa) + off(kbb) - 2.0 * off(kab)) / (s * (s - 1)))
    return np.asarray(vals)


def kid(feats_a: np.ndarray, feats_b: np.ndarray, n_subsets: int = 10,
        max_subset: int = 100, seed: int = 0) -> float:
    """Kernel MMD^2 with the cubic polynomial kernel, averaged over seeded
    subsets of size min(n, m, max_subset)."""
    return float(kid_subset_estimates(feats_a, feats_b, n_subsets, max_subset,
                                      seed).mean())


# -- report / harness ---------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Raw (unscaled) scores; `scaled()` applies the table conventions."""

    ssim: float
    ms_ssim: float
    cw_ssim: float
    lpips: float
    dists: float
    fid: float
    kid: float
    pairs: int = 0

    SCALE = {"ssim": 100.0, "ms_ssim": 100.0, "cw_ssim": 100.0,
             "lpips": 100.0, "dists": 100.0, "fid": 1.0, "kid": 1000.0}

    def scaled(self) -> Dict[str, float]:
        out = {}
        for k, s in self.SCALE.items():
            out[k] = getattr(self, k) * s
        return out

    def save(self, path) -> None:
        lines = [f"{k}={v:.6g}" for k, v in self.scaled().items()]
        lines.append(f"pairs={self.pairs}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        kv = {}
        for line in Path(path).read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k] = float(v)
        raw = {k: kv[k] / s for k, s in cls.SCALE.items()}
        return cls(pairs=int(kv.get("pairs", 0)), **raw)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as e:  # PIL raises a zoo of exception types
        raise DataError(f"cannot read image {path}: {e}") from None


def evaluate(generated_dir, reference_dir, out_path=None,
             net: Optional[FeatureNet] = None, kid_seed: int = 0) -> MetricsReport:
    """Paired metrics averaged over same-named PNGs; distribution metrics on
    pooled feature embeddings."""
    gen_dir, ref_dir = Path(generated_dir), Path(reference_dir)
    gen_names = sorted(p.name for p in gen_dir.glob("*.png"))
    ref_names = sorted(p.name for p in ref_dir.glob("*.png"))
    if gen_names != ref_names:
        only_gen = sorted(set(gen_names) - set(ref_names))[:8]
        only_ref = sorted(set(ref_names) - set(gen_names))[:8]
        raise PairingError(
            f"unpaired images; only in {gen_dir}: {only_gen}; only in {ref_dir}: {only_ref}")
    if len(gen_names) < 2:
        raise SizeError(f"need at least 2 paired images, found {len(gen_names)}")
    net = net or default_feature_net()

    sums = {"ssim": 0.0, "ms_ssim": 0.0, "cw_ssim": 0.0, "lpips": 0.0, "dists": 0.0}
    emb_gen, emb_ref = [], []
    for name in gen_names:
        a = load_image(gen_dir / name)
        b = load_image(ref_dir / name)
        sums["ssim"] += ssim(a, b)
        sums["ms_ssim"] += ms_ssim(a, b)
        sums["cw_ssim"] += cw_ssim(a, b)
        sums["lpips"] += lpips_distance(a, b, net)
        sums["dists"] += dists(a, b, net)
        emb_gen.append(net.embed(_to_net_input(a))[0])
        emb_ref.append(net.embed(_to_net_input(b))[0])
    n = len(gen_names)
    emb_gen = np.stack(emb_gen)
    emb_ref = np.stack(emb_ref)
    report = MetricsReport(
        ssim=sums["ssim"] / n, ms_ssim=sums["ms_ssim"] / n, cw_ssim=sums["cw_ssim"] / n,
        lpips=sums["lpips"] / n, dists=sums["dists"] / n,
        fid=fid(GaussianStats.from_features(emb_gen), GaussianStats.from_features(emb_ref)),
        kid=kid(emb_gen, emb_ref, seed=kid_seed), pairs=n)
    if out_path is not None:
        report.save(out_path)
    return report
