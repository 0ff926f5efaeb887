"""Procedural paired-garment data: a flat-lay render of a garment and a
"worn" render of the same garment warped onto a stylized person silhouette,
with occluders and a lighting gradient.

Rendering is fully deterministic in the spec and body seeds. Garments are
drawn at 4x supersampling and box-filtered down to 64x64, which provides
anti-aliased edges. Patterns are defined in canvas coordinates with exact
spatial frequency (cycles per 64 px), so spectral tests can pin them, and
the default frequency range keeps patterned garments inside the
high-frequency regime (at least 10% of in-garment spectral energy above a
quarter of the Nyquist band, asserted at render time).

Directory layout written by `gen_dataset`:

    out/flat/00000.png   out/worn/00000.png   out/manifest.tsv

with one manifest line per pair: ``index TAB serialized-spec``. The same
layout can be used to supply externally produced pairs to `load_pairs`.
"""

from __future__ import annotations

import colorsys
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, PairingError

log = logging.getLogger(__name__)

CANVAS = 64
SS = 4  # supersampling factor

SILHOUETTES = ("tshirt", "longsleeve", "vest")
PATTERNS = ("solid", "stripes", "checks", "dots", "logo_patch")
HIGH_FREQ_PATTERNS = ("stripes", "checks", "dots")

MAX_WARP_PX = 6.0
MAX_OCCLUDED_FRACTION = 0.15


@dataclass(frozen=True)
class GarmentSpec:
    silhouette: str
    base_color: Tuple[float, float, float]
    pattern: str
    freq: int
    angle: float
    second_color: Tuple[float, float, float]
    seed: int

    def __post_init__(self):
        if self.silhouette not in SILHOUETTES:
            raise ConfigError(f"unknown silhouette {self.silhouette!r}")
        if self.pattern not in PATTERNS:
            raise ConfigError(f"unknown pattern {self.pattern!r}")

    def serialize(self) -> str:
        b = ",".join(f"{c:.4f}" for c in self.base_color)
        s = ",".join(f"{c:.4f}" for c in self.second_color)
        return (f"sil={self.silhouette};base={b};pat={self.pattern};freq={self.freq};"
                f"angle={self.angle:.4f};second={s};seed={self.seed}")

    @classmethod
    def parse(cls, text: str) -> "GarmentSpec":
        kv = {}
        for part in text.strip().split(";"):
            k, v = part.split("=", 1)
            kv[k] = v
        return cls(
            silhouette=kv["sil"],
            base_color=tuple(float(x) for x in kv["base"].split(",")),
            pattern=kv["pat"],
            freq=int(kv["freq"]),
            angle=float(kv["angle"]),
            second_color=tuple(float(x) for x in kv["second"].split(",")),
            seed=int(kv["seed"]),
        )


def sample_spec(rng: np.random.Generator, seed: Optional[int] = None) -> GarmentSpec:
    """Draw a random garment description; colors are saturated and the two
    pattern colors are forced apart in value so patterns carry contrast."""
    h = rng.uniform(0.0, 1.0)
    s = rng.uniform(0.5, 0.95)
    v = rng.uniform(0.35, 0.85)
    base = colorsys.hsv_to_rgb(h, s, v)
    h2 = (h + rng.uniform(0.25, 0.6)) % 1.0
    s2 = rng.uniform(0.5, 0.95)
    v2 = rng.uniform(0.15, 0.4) if v > 0.6 else rng.uniform(0.7, 0.95)
    second = colorsys.hsv_to_rgb(h2, s2, v2)
    return GarmentSpec(
        silhouette=SILHOUETTES[rng.integers(0, len(SILHOUETTES))],
        base_color=tuple(round(c, 4) for c in base),
        pattern=PATTERNS[rng.integers(0, len(PATTERNS))],
        freq=int(rng.integers(10, 25)),
        angle=float(rng.uniform(0.0, np.pi)),
        second_color=tuple(round(c, 4) for c in second),
        seed=int(seed if seed is not None else rng.integers(0, 2 ** 31 - 1)),
    )


# -- geometry -------------------------------------------------------------------


def _ss_coords():
    p = (np.arange(CANVAS * SS) + 0.5) / SS
    px, py = np.meshgrid(p, p, indexing="xy")
    return px, py


def _garment_mask_uv(sil: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au = np.abs(u)
    torso = (au <= 0.40) & (v >= -0.52) & (v <= 0.62)
    bevel = (au > 0.24) & (v < -0.52 + 0.5 * (au - 0.24))
    torso &= ~bevel
    if sil == "vest":
        neck = (u / 0.18) ** 2 + ((v + 0.52) / 0.30) ** 2 < 1.0
        armhole = ((au - 0.40) / 0.10) ** 2 + ((v + 0.25) / 0.28) ** 2 < 1.0
        return torso & ~neck & ~armhole
    neck = (u / 0.15) ** 2 + ((v + 0.52) / 0.14) ** 2 < 1.0
    body = torso & ~neck
    if sil == "tshirt":
        sleeve = ((au > 0.40) & (au <= 0.72)
                  & (v >= -0.50 + 0.30 * (au - 0.40))
                  & (v <= -0.08 - 0.55 * (au - 0.40)))
    else:  # longsleeve
        sleeve = ((au > 0.40) & (au <= 0.62)
                  & (v >= -0.50 + 0.35 * (au - 0.40))
                  & (v <= 0.55 - 0.15 * (au - 0.40)))
    return body | sleeve


def _pattern_rgb(spec: GarmentSpec, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    base = np.array(spec.base_color, dtype=np.float64)
    second = np.array(spec.second_color, dtype=np.float64)
    shape = px.shape
    out = np.empty(shape + (3,), dtype=np.float64)
    out[:] = base

    if spec.pattern == "solid":
        return out

    th = spec.angle
    a = px * np.cos(th) + py * np.sin(th)
    b = -px * np.sin(th) + py * np.cos(th)
    f = spec.freq

    if spec.pattern == "stripes":
        sel = np.cos(2 * np.pi * f * a / CANVAS) < 0.0
        out[sel] = second
    elif spec.pattern == "checks":
        c1 = np.cos(2 * np.pi * f * a / CANVAS) < 0.0
        c2 = np.cos(2 * np.pi * f * b / CANVAS) < 0.0
        out[c1 ^ c2] = second
    elif spec.pattern == "dots":
        pitch = CANVAS / f
        ra = np.mod(a, pitch) - pitch / 2.0
        rb = np.mod(b, pitch) - pitch / 2.0
        out[ra ** 2 + rb ** 2 <= (0.32 * pitch) ** 2] = second
    elif spec.pattern == "logo_patch":
        u = (px - CANVAS / 2) / (CANVAS / 2)
        v = (py - CANVAS / 2) / (CANVAS / 2)
        patch = (np.abs(u) <= 0.20) & (v >= -0.20) & (v <= 0.15)
        out[patch] = second
        bar1 = (np.abs(u) <= 0.14) & (v >= -0.13) & (v <= -0.06)
        bar2 = (np.abs(u) <= 0.14) & (v >= -0.01) & (v <= 0.06)
        out[patch & (bar1 | bar2)] = base
    return out


def _downsample_ss(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img.reshape(CANVAS, SS, CANVAS, SS).mean(axis=(1, 3))
    return img.reshape(CANVAS, SS, CANVAS, SS, -1).mean(axis=(1, 3))


def _garment_layers(spec: GarmentSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(rgb, alpha) at 64x64: pattern colors everywhere, soft mask alpha."""
    px, py = _ss_coords()
    u = (px - CANVAS / 2) / (CANVAS / 2)
    v = (py - CANVAS / 2) / (CANVAS / 2)
    alpha = _garment_mask_uv(spec.silhouette, u, v).astype(np.float64)
    rgb = _pattern_rgb(spec, px, py)
    return _downsample_ss(rgb), _downsample_ss(alpha)


def garment_mask(spec: GarmentSpec, threshold: float = 0.999) -> np.ndarray:
    """Boolean interior mask of the flat garment at final resolution."""
    _, alpha = _garment_layers(spec)
    return alpha >= threshold


def high_freq_energy_fraction(img: np.ndarray, mask: np.ndarray,
                              band_cycles: float = CANVAS / 8) -> float:
    """Fraction of in-mask spectral energy above `band_cycles` per image.

    The default band edge is a quarter of the Nyquist rate (8 of 32 cycles
    at 64 px).
    """
    g = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    m = mask.astype(np.float64)
    if m.sum() < 1:
        return 0.0
    g = (g - (g * m).sum() / m.sum()) * m
    spec2 = np.abs(np.fft.fft2(g)) ** 2
    fx = np.fft.fftfreq(g.shape[1]) * g.shape[1]
    fy = np.fft.fftfreq(g.shape[0]) * g.shape[0]
    rr = np.sqrt(fx[None, :] ** 2 + fy[:, None] ** 2)
    total = spec2.sum() - spec2[0, 0]
    if total <= 0:
        return 0.0
    return float(spec2[rr > band_cycles].sum() / total)


def render_flat(spec: GarmentSpec) -> np.ndarray:
    """Flat-lay image [64,64,3] in [0,1]: garment centered on near-white."""
    rng = np.random.default_rng(spec.seed)
    bg = 0.955 + 0.03 * rng.random()
    rgb, alpha = _garment_layers(spec)
    img = bg + alpha[..., None] * (rgb - bg)
    img = np.clip(img, 0.0, 1.0)
    if spec.pattern in HIGH_FREQ_PATTERNS:
        frac = high_freq_energy_fraction(img, alpha >= 0.999)
        assert frac >= 0.10, f"high-frequency energy {frac:.3f} below budget for {spec.pattern}"
    return img.astype(np.float32)


# -- worn render ------------------------------------------------------------------


def _dist_to_segment(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    l2 = dx * dx + dy * dy
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / max(l2, 1e-9), 0.0, 1.0)
    return np.sqrt((px - (x0 + t * dx)) ** 2 + (py - (y0 + t * dy)) ** 2)


def _bilinear_upsample_grid(grid: np.ndarray, out: int) -> np.ndarray:
    """Bilinear interpolation of a small control grid to out x out."""
    g = np.asarray(grid, dtype=np.float64)
    n = g.shape[0]
    pos = np.linspace(0.0, n - 1.0, out)
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 2)
    frac = pos - i0
    rows = g[i0] * (1 - frac)[:, None] + g[i0 + 1] * frac[:, None]
    cols = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return cols


def _bilinear_sample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.clip(np.floor(sx).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 2)
    fx = (sx - x0)[..., None] if img.ndim == 3 else (sx - x0)
    fy = (sy - y0)[..., None] if img.ndim == 3 else (sy - y0)
    p00 = img[y0, x0]
    p01 = img[y0, x0 + 1]
    p10 = img[y0 + 1, x0]
    p11 = img[y0 + 1, x0 + 1]
    return (p00 * (1 - fx) * (1 - fy) + p01 * fx * (1 - fy)
            + p10 * (1 - fx) * fy + p11 * fx * fy)


@dataclass
class WornRender:
    image: np.ndarray
    garment_alpha: np.ndarray
    occluded_fraction: float
    warp_dx: np.ndarray
    warp_dy: np.ndarray


def render_worn_detailed(spec: GarmentSpec, body_seed: int,
                         warp_px: float = MAX_WARP_PX,
                         max_occluders: int = 2,
                         light_amp: float = 0.10) -> WornRender:
    """Worn-person render plus the generator's own masks and warp field."""
    rng = np.random.default_rng(body_seed)
    bg = np.array(colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.15, 0.4),
                                      rng.uniform(0.45, 0.8)))
    skin = np.array(colorsys.hsv_to_rgb(rng.uniform(0.05, 0.09), rng.uniform(0.3, 0.55),
                                        rng.uniform(0.55, 0.85)))
    hair = np.array(colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.1, 0.5),
                                        rng.uniform(0.08, 0.3)))

    px, py = _ss_coords()
    head = (px - 32.0) ** 2 + (py - 7.5) ** 2 <= 6.2 ** 2
    neck = (np.abs(px - 32.0) <= 2.6) & (py >= 11.0) & (py <= 17.0)
    torso = ((px - 32.0) / 15.0) ** 2 + ((py - 38.0) / 23.0) ** 2 <= 1.0
    arm_l = _dist_to_segment(px, py, 18.0, 22.0, 14.5, 52.0) <= 3.2
    arm_r = _dist_to_segment(px, py, 46.0, 22.0, 49.5, 52.0) <= 3.2
    body_ss = (head | neck | torso | arm_l | arm_r).astype(np.float64)
    body_a = _downsample_ss(body_ss)
    canvas = bg[None, None, :] + body_a[..., None] * (skin - bg)[None, None, :]

    # warp field from a 5x5 control grid, clipped to the displacement budget
    if warp_px > 0:
        gdx = rng.normal(0.0, 2.5, size=(5, 5))
        gdy = rng.normal(0.0, 2.5, size=(5, 5))
        mag = np.sqrt(gdx ** 2 + gdy ** 2).max()
        if mag > warp_px:
            gdx *= warp_px / mag
            gdy *= warp_px / mag
        dx = _bilinear_upsample_grid(gdx, CANVAS)
        dy = _bilinear_upsample_grid(gdy, CANVAS)
    else:
        rng.normal(0.0, 2.5, size=(5, 5))  # keep downstream draws aligned
        rng.normal(0.0, 2.5, size=(5, 5))
        dx = np.zeros((CANVAS, CANVAS))
        dy = np.zeros((CANVAS, CANVAS))

    rgb, alpha = _garment_layers(spec)
    ix, iy = np.meshgrid(np.arange(CANVAS, dtype=np.float64),
                         np.arange(CANVAS, dtype=np.float64), indexing="xy")
    warped_rgb = _bilinear_sample(rgb, ix + dx, iy + dy)
    warped_a = _bilinear_sample(alpha, ix + dx, iy + dy)
    img = canvas * (1 - warped_a[..., None]) + warped_rgb * warped_a[..., None]

    # occluders drawn over the garment, within the coverage budget
    garment_px = warped_a > 0.5
    garment_area = max(int(garment_px.sum()), 1)
    occluded = np.zeros((CANVAS, CANVAS), dtype=bool)
    n_occ = int(rng.integers(0, max_occluders + 1)) if max_occluders > 0 else 0
    for _ in range(n_occ):
        kind = rng.choice(("hair", "band"))
        if kind == "hair":
            cx = 32.0 + rng.uniform(-6, 6)
            cy = 14.0 + rng.uniform(-3, 3)
            rx, ry = rng.uniform(6, 11), rng.uniform(4, 8)
            color = hair
        else:
            cy = 34.0 + rng.uniform(-8, 8)
            cx = 32.0 + rng.uniform(-5, 5)
            rx, ry = rng.uniform(14, 20), rng.uniform(1.5, 3.0)
            color = skin * rng.uniform(0.8, 1.1)
        for _try in range(12):
            occ = (((ix - cx) / rx) ** 2 + ((iy - cy) / ry) ** 2) <= 1.0
            frac = ((occluded | occ) & garment_px).sum() / garment_area
            if frac <= MAX_OCCLUDED_FRACTION:
                img[occ] = np.clip(color, 0, 1)
                occluded |= occ
                break
            rx *= 0.8
            ry *= 0.8

    occ_fraction = float((occluded & garment_px).sum() / garment_area)
    assert occ_fraction <= MAX_OCCLUDED_FRACTION + 1e-9

    if light_amp > 0:
        phi = rng.uniform(0, 2 * np.pi)
        ramp = ((ix - 32.0) * np.cos(phi) + (iy - 32.0) * np.sin(phi)) / CANVAS
        img = img * (1.0 + light_amp * ramp)[..., None]

    return WornRender(image=np.clip(img, 0.0, 1.0).astype(np.float32),
                      garment_alpha=warped_a, occluded_fraction=occ_fraction,
                      warp_dx=dx, warp_dy=dy)


def render_worn(spec: GarmentSpec, body_seed: int) -> np.ndarray:
    """Worn-person image [64,64,3] in [0,1]."""
    return render_worn_detailed(spec, body_seed).image


# -- dataset I/O -----------------------------------------------------------------------


def is_test_index(index: int) -> bool:
    """Deterministic 90/10 split by index hash."""
    return zlib.crc32(f"pair-{index}".encode()) % 10 == 0


def pair_seeds(seed: int, index: int) -> Tuple[int, int]:
    state = np.random.SeedSequence([seed, index]).generate_state(2)
    return int(state[0]), int(state[1])


def save_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def gen_dataset(n: int, seed: int, out_dir) -> Path:
    """Write n pairs plus the manifest; returns the manifest path."""
    if n < 1:
        raise ConfigError(f"need n >= 1 pairs, got {n}")
    out = Path(out_dir)
    try:
        (out / "flat").mkdir(parents=True, exist_ok=True)
        (out / "worn").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {out}: {e}") from None
    lines = []
    for i in range(n):
        spec_seed, body_seed = pair_seeds(seed, i)
        spec = sample_spec(np.random.default_rng(spec_seed), seed=spec_seed)
        save_png(out / "flat" / f"{i:05d}.png", render_flat(spec))
        save_png(out / "worn" / f"{i:05d}.png", render_worn(spec, body_seed))
        lines.append(f"{i:05d}\t{spec.serialize()}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


class PairDataset:
    """In-memory paired dataset in manifest order, pixel range [-1, 1]."""

    def __init__(self, root):
        root = Path(root)
        manifest = root / "manifest.tsv"
        if not manifest.exists():
            raise DataError(f"no manifest.tsv under {root}")
        self.indices: List[int] = []
        self.specs: List[GarmentSpec] = []
        names = []
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            idx_s, spec_s = line.split("\t", 1)
            self.indices.append(int(idx_s))
            self.specs.append(GarmentSpec.parse(spec_s))
            names.append(f"{idx_s}.png")
        missing = [f"{sub}/{nm}" for sub in ("flat", "worn") for nm in names
                   if not (root / sub / nm).exists()]
        if missing:
            raise PairingError(f"manifest entries without files: {missing[:8]}")
        self.flat = np.stack([self._load(root / "flat" / nm) for nm in names])
        self.worn = np.stack([self._load(root / "worn" / nm) for nm in names])

    @staticmethod
    def _load(path) -> np.ndarray:
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")
                if im.size != (CANVAS, CANVAS):
                    log.warning("resizing %s from %s to %dx%d", path, im.size, CANVAS, CANVAS)
                    im = im.resize((CANVAS, CANVAS), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except OSError as e:
            raise DataError(f"cannot read image {path}: {e}") from None
        return (arr * 2.0 - 1.0).transpose(2, 0, 1)

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for i in range(len(self.indices)):
            yield self.worn[i], self.flat[i]

    def train_positions(self) -> np.ndarray:
        return np.array([k for k, i in enumerate(self.indices) if not is_test_index(i)])

    def test_positions(self) -> np.ndarray:
        return np.array([k for k, i in enumerate(self.indices) if is_test_index(i)])

    def iter_batches(self, batch_size: int, seed: int,
                     positions: Optional[np.ndarray] = None
                     ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Infinite epoch-shuffled (worn, flat) batches, seeded."""
        pos = np.arange(len(self)) if positions is None else np.asarray(positions)
        epoch = 0
        while True:
            order = np.random.default_rng((seed, epoch)).permutation(pos)
            for k in range(0, len(order) - batch_size + 1, batch_size):
                sel = order[k:k + batch_size]
                yield self.worn[sel], self.flat[sel]
            epoch += 1


def load_pairs(directory) -> PairDataset:
    return PairDataset(directory)
