"""Toy networks: VAE, image token encoder, prompt embedding, and the pair of
parallel U-Nets (a fully trainable reference encoder network and a frozen
denoising network whose hybrid attention blocks consume the reference
features).

Architecture summary (latent 4x8x8 for 64x64 RGB):

  * ToyVAE: conv encoder with 8x downsampling to a 4-channel latent
    (posterior mean used deterministically) and a mirrored decoder with a
    tanh output bound.
  * ImageFeatureStack: a frozen, seeded conv pyramid producing 16 tokens of
    width 64 from the worn-person image; a separate trainable linear
    projection maps them into the conditioning space.
  * MiniUNet: three resolutions (8, 4, 2) with one residual block and one
    attention block per level, a bottleneck, additive skip connections, and
    sinusoidal timestep embeddings. Attention blocks hold a token-attention
    branch (self / hybrid / cross-only, per ablation case) plus
    cross-attention to conditioning tokens.

The seven attention sites are ordered [enc0, enc1, enc2, mid, dec2, dec1,
dec0]; reference features are harvested as the token map *entering* each
site, index-matched between the two U-Nets.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .attention import CrossAttention, HybridAttention, check_ref_scale
from .errors import ConfigError, DimensionError, StateError
from .layers import (Conv2d, GroupNorm, LayerNorm, Linear, map_from_tokens,
                     sinusoidal_embedding, tokens_from_map)
from .tensor import Parameter, Tensor, add, reshape, silu, tanh, upsample_nearest

CASES = ("baseline", "ieb_ca", "encoder_only", "decoder_only", "full")

NUM_SITES = 7
_ENC_SITES = (0, 1, 2)
_MID_SITE = 3
_DEC_SITES = (4, 5, 6)


@dataclass
class ModelConfig:
    """Architecture + ablation-case description; serializable as key=value."""

    case: str = "full"
    ref_scale: float = 1.0
    image_size: int = 64
    latent_channels: int = 4
    widths: tuple = (32, 64, 128)
    heads: int = 4
    cond_dim: int = 64
    prompt_len: int = 8

    def __post_init__(self):
        if self.case not in CASES:
            raise ConfigError(f"unknown ablation case {self.case!r}; expected one of {CASES}")
        self.ref_scale = check_ref_scale(self.ref_scale)
        if self.image_size % 8 != 0:
            raise ConfigError(f"image_size must be divisible by 8, got {self.image_size}")
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3:
            raise ConfigError(f"expected 3 channel widths, got {self.widths}")

    @property
    def latent_size(self) -> int:
        return self.image_size // 8

    def site_modes(self) -> List[str]:
        """Attention-branch mode of the denoising net at each of the 7 sites."""
        if self.case == "baseline":
            return ["self"] * NUM_SITES
        if self.case == "ieb_ca":
            return ["cross_only"] * NUM_SITES
        modes = ["self"] * NUM_SITES
        if self.case in ("encoder_only", "full"):
            for i in _ENC_SITES:
                modes[i] = "hybrid"
        if self.case in ("decoder_only", "full"):
            for i in _DEC_SITES:
                modes[i] = "hybrid"
        if self.case == "full":
            modes[_MID_SITE] = "hybrid"
        return modes

    def uses_reference(self) -> bool:
        return self.case != "baseline"

    # -- flat key=value round-trip -------------------------------------------

    def to_kv(self) -> str:
        d = dataclasses.asdict(self)
        d["widths"] = ",".join(str(w) for w in self.widths)
        return "".join(f"{k}={v}\n" for k, v in d.items())

    @classmethod
    def from_kv(cls, text: str) -> "ModelConfig":
        kv: Dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line (expected key=value): {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        kwargs: dict = {}
        for f in dataclasses.fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.name == "widths":
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            elif f.name in ("ref_scale",):
                kwargs[f.name] = float(raw)
            elif f.name == "case":
                kwargs[f.name] = raw
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(self.to_kv())

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_kv(Path(path).read_text())


# -- VAE -----------------------------------------------------------------------


class ToyVAE:
    """Conv VAE mapping [B,3,H,W] in [-1,1] to a [B,4,H/8,W/8] latent."""

    def __init__(self, rng: np.random.Generator, name: str = "vae",
                 latent_channels: int = 4):
        self.latent_channels = latent_channels
        n = name
        self.e_conv0 = Conv2d(rng, f"{n}.enc.conv0", 3, 32)
        self.e_gn0 = GroupNorm(f"{n}.enc.gn0", 32)
        self.e_conv1 = Conv2d(rng, f"{n}.enc.conv1", 32, 64, stride=2)
        self.e_gn1 = GroupNorm(f"{n}.enc.gn1", 64)
        self.e_conv2 = Conv2d(rng, f"{n}.enc.conv2", 64, 64, stride=2)
        self.e_gn2 = GroupNorm(f"{n}.enc.gn2", 64)
        self.e_conv3 = Conv2d(rng, f"{n}.enc.conv3", 64, 64, stride=2)
        self.e_gn3 = GroupNorm(f"{n}.enc.gn3", 64)
        self.e_mu = Conv2d(rng, f"{n}.enc.mu", 64, latent_channels)
        self.e_logvar = Conv2d(rng, f"{n}.enc.logvar", 64, latent_channels, std=1e-3)

        self.d_conv0 = Conv2d(rng, f"{n}.dec.conv0", latent_channels, 64)
        self.d_gn0 = GroupNorm(f"{n}.dec.gn0", 64)
        self.d_conv1 = Conv2d(rng, f"{n}.dec.conv1", 64, 64)
        self.d_gn1 = GroupNorm(f"{n}.dec.gn1", 64)
        self.d_conv2 = Conv2d(rng, f"{n}.dec.conv2", 64, 32)
        self.d_gn2 = GroupNorm(f"{n}.dec.gn2", 32)
        self.d_conv3 = Conv2d(rng, f"{n}.dec.conv3", 32, 32)
        self.d_gn3 = GroupNorm(f"{n}.dec.gn3", 32)
        self.d_out = Conv2d(rng, f"{n}.dec.out", 32, 3)

    def _trunk(self, x: Tensor) -> Tensor:
        h = silu(self.e_gn0(self.e_conv0(x)))
        h = silu(self.e_gn1(self.e_conv1(h)))
        h = silu(self.e_gn2(self.e_conv2(h)))
        return silu(self.e_gn3(self.e_conv3(h)))

    def _check_image(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected [B,3,H,W] image tensor, got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise DimensionError(f"image dims must be divisible by 8, got {x.shape}")

    def encode(self, x: Tensor) -> Tensor:
        """Deterministic latent: the posterior mean."""
        self._check_image(x)
        return self.e_mu(self._trunk(x))

    def encode_dist(self, x: Tensor):
        """(mean, logvar) heads, used only during VAE pretraining."""
        self._check_image(x)
        h = self._trunk(x)
        return self.e_mu(h), self.e_logvar(h)

    def decode(self, z: Tensor) -> Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise DimensionError(
                f"expected [B,{self.latent_channels},h,w] latent tensor, got {z.shape}")
        h = silu(self.d_gn0(self.d_conv0(z)))
        h = silu(self.d_gn1(self.d_conv1(upsample_nearest(h, 2))))
        h = silu(self.d_gn2(self.d_conv2(upsample_nearest(h, 2))))
        h = silu(self.d_gn3(self.d_conv3(upsample_nearest(h, 2))))
        return tanh(self.d_out(h))

    def params(self) -> List[Parameter]:
        out: List[Parameter] = []
        for m in (self.e_conv0, self.e_gn0, self.e_conv1, self.e_gn1, self.e_conv2,
                  self.e_gn2, self.e_conv3, self.e_gn3, self.e_mu, self.e_logvar,
                  self.d_conv0, self.d_gn0, self.d_conv1, self.d_gn1, self.d_conv2,
                  self.d_gn2, self.d_conv3, self.d_gn3, self.d_out):
            out += m.params()
        return out


# -- image tokens ----------------------------------------------------------------


class ImageFeatureStack:
    """Frozen seeded conv pyramid: [B,3,64,64] -> 16 tokens of width 64.

    Stands in for a pretrained image encoder; weights are fixed at
    construction and never train. Biases are seeded (not zero) so the
    zero-image response is a nonzero deterministic constant.
    """

    def __init__(self, rng: np.random.Generator, name: str = "image_stack",
                 image_size: int = 64):
        self.image_size = image_size
        self.token_dim = 64
        self.convs = [
            Conv2d(rng, f"{name}.conv0", 3, 16, stride=2),
            Conv2d(rng, f"{name}.conv1", 16, 32, stride=2),
            Conv2d(rng, f"{name}.conv2", 32, 64, stride=2),
            Conv2d(rng, f"{name}.conv3", 64, 64, stride=2),
        ]
        for c in self.convs:
            c.b.value.data = rng.normal(0.0, 0.05, size=c.b.shape).astype(np.float32)

    @property
    def num_tokens(self) -> int:
        return (self.image_size // 16) ** 2

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.image_size \
                or x.shape[3] != self.image_size:
            raise DimensionError(
                f"expected [B,3,{self.image_size},{self.image_size}] image, got {x.shape}")
        h = x
        for i, c in enumerate(self.convs):
            h = c(h)
            if i < len(self.convs) - 1:
                h = silu(h)
        return tokens_from_map(h)

    def params(self) -> List[Parameter]:
        out: List[Parameter] = []
        for c in self.convs:
            out += c.params()
        return out


# -- U-Net ------------------------------------------------------------------------


class ResBlock:
    def __init__(self, rng: np.random.Generator, name: str, channels: int, temb_dim: int):
        self.gn1 = GroupNorm(f"{name}.gn1", channels)
        self.conv1 = Conv2d(rng, f"{name}.conv1", channels, channels)
        self.temb = Linear(rng, f"{name}.temb", temb_dim, channels)
        self.gn2 = GroupNorm(f"{name}.gn2", channels)
        self.conv2 = Conv2d(rng, f"{name}.conv2", channels, channels)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(silu(self.gn1(x)))
        t = self.temb(silu(temb))
        h = add(h, reshape(t, (t.shape[0], t.shape[1], 1, 1)))
        h = self.conv2(silu(self.gn2(h)))
        return add(h, x)

    def params(self) -> List[Parameter]:
        return (self.gn1.params() + self.conv1.params() + self.temb.params()
                + self.gn2.params() + self.conv2.params())


class AttentionSite:
    """One token-attention block: (self/hybrid/cross-only) branch followed by
    cross-attention to conditioning tokens, both residual."""

    def __init__(self, rng: np.random.Generator, name: str, d: int, heads: int,
                 mode: str, cond_dim: int, ref_scale: float):
        self.ln1 = LayerNorm(f"{name}.ln1", d)
        self.attn1 = HybridAttention(rng, f"{name}.attn1", d, d_ref=d, head_count=heads,
                                     mode=mode, ref_scale=ref_scale)
        self.ln2 = LayerNorm(f"{name}.ln2", d)
        self.attn2 = CrossAttention(rng, f"{name}.attn2", d, cond_dim, head_count=heads)

    def __call__(self, tokens: Tensor, cond: Tensor, ref: Optional[Tensor],
                 ref_scale: Optional[float], trace: Optional[dict]) -> Tensor:
        h = add(tokens, self.attn1(self.ln1(tokens), ref, ref_scale, trace))
        return add(h, self.attn2(self.ln2(h), cond))

    def params(self) -> List[Parameter]:
        return (self.ln1.params() + self.attn1.params() + self.ln2.params()
                + self.attn2.params())


class MiniUNet:
    """Three-level U-Net over latents with 7 attention sites.

    `forward(..., collect_ref=True)` additionally returns the token map
    entering each attention site, which is how reference features are
    harvested.
    """

    TEMB_DIM = 128
    TIME_FEATURES = 64

    def __init__(self, rng: np.random.Generator, name: str, cfg: ModelConfig,
                 site_modes: Sequence[str], cond_dim: int):
        if len(site_modes) != NUM_SITES:
            raise ConfigError(f"expected {NUM_SITES} site modes, got {len(site_modes)}")
        w0, w1, w2 = cfg.widths
        heads = cfg.heads
        lam = cfg.ref_scale
        self.name = name
        self.site_modes = list(site_modes)
        self.latent_channels = cfg.latent_channels

        self.t1 = Linear(rng, f"{name}.time.l1", self.TIME_FEATURES, self.TEMB_DIM)
        self.t2 = Linear(rng, f"{name}.time.l2", self.TEMB_DIM, self.TEMB_DIM)

        self.conv_in = Conv2d(rng, f"{name}.conv_in", cfg.latent_channels, w0)
        self.enc_res = [
            ResBlock(rng, f"{name}.enc0.res", w0, self.TEMB_DIM),
            ResBlock(rng, f"{name}.enc1.res", w1, self.TEMB_DIM),
            ResBlock(rng, f"{name}.enc2.res", w2, self.TEMB_DIM),
        ]
        self.down = [
            Conv2d(rng, f"{name}.down0", w0, w1, stride=2),
            Conv2d(rng, f"{name}.down1", w1, w2, stride=2),
        ]
        self.mid_res1 = ResBlock(rng, f"{name}.mid.res1", w2, self.TEMB_DIM)
        self.mid_res2 = ResBlock(rng, f"{name}.mid.res2", w2, self.TEMB_DIM)
        self.dec_res = [
            ResBlock(rng, f"{name}.dec2.res", w2, self.TEMB_DIM),
            ResBlock(rng, f"{name}.dec1.res", w1, self.TEMB_DIM),
            ResBlock(rng, f"{name}.dec0.res", w0, self.TEMB_DIM),
        ]
        self.up = [
            Conv2d(rng, f"{name}.up1", w2, w1),
            Conv2d(rng, f"{name}.up0", w1, w0),
        ]
        dims = [w0, w1, w2, w2, w2, w1, w0]
        site_names = ["enc0", "enc1", "enc2", "mid", "dec2", "dec1", "dec0"]
        self.sites = [
            AttentionSite(rng, f"{name}.{sn}.attn", dims[i], heads, site_modes[i],
                          cond_dim, lam)
            for i, sn in enumerate(site_names)
        ]
        self.gn_out = GroupNorm(f"{name}.gn_out", w0)
        self.conv_out = Conv2d(rng, f"{name}.conv_out", w0, cfg.latent_channels, std=1e-4)

    def _site(self, i: int, x: Tensor, cond: Tensor, ref_feats, ref_scale, trace,
              collected) -> Tensor:
        b, c, h, w = x.shape
        tokens = tokens_from_map(x)
        if collected is not None:
            collected.append(tokens)
        ref = None
        if ref_feats is not None and self.site_modes[i] != "self":
            ref = ref_feats[i]
        t = None
        if trace is not None:
            trace.setdefault("sites", []).append(site_trace := {})
            t = site_trace
        out = self.sites[i](tokens, cond, ref, ref_scale, t)
        return map_from_tokens(out, h, w)

    def forward(self, z: Tensor, t: np.ndarray, cond: Tensor,
                ref_feats: Optional[List[Tensor]] = None,
                ref_scale: Optional[float] = None,
                collect_ref: bool = False,
                trace: Optional[dict] = None):
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise DimensionError(f"expected [B,{self.latent_channels},h,w] latent, got {z.shape}")
        if ref_feats is not None and len(ref_feats) != NUM_SITES:
            raise ConfigError(
                f"reference feature list has length {len(ref_feats)}, expected {NUM_SITES}")
        temb = self.t2(silu(self.t1(Tensor(sinusoidal_embedding(
            np.broadcast_to(np.asarray(t), (z.shape[0],)), self.TIME_FEATURES)))))
        collected: Optional[list] = [] if collect_ref else None

        x = self.conv_in(z)
        skips = []
        for lvl in range(3):
            x = self.enc_res[lvl](x, temb)
            x = self._site(lvl, x, cond, ref_feats, ref_scale, trace, collected)
            skips.append(x)
            if lvl < 2:
                x = self.down[lvl](x)

        x = self.mid_res1(x, temb)
        x = self._site(3, x, cond, ref_feats, ref_scale, trace, collected)
        x = self.mid_res2(x, temb)

        for k, lvl in enumerate((2, 1, 0)):
            x = add(x, skips[lvl])
            x = self.dec_res[k](x, temb)
            x = self._site(4 + k, x, cond, ref_feats, ref_scale, trace, collected)
            if lvl > 0:
                x = self.up[k](upsample_nearest(x, 2))

        out = self.conv_out(silu(self.gn_out(x)))
        if collect_ref:
            return out, collected
        return out

    def params(self) -> List[Parameter]:
        out = self.t1.params() + self.t2.params() + self.conv_in.params()
        for r in self.enc_res:
            out += r.params()
        for d in self.down:
            out += d.params()
        out += self.mid_res1.params() + self.mid_res2.params()
        for r in self.dec_res:
            out += r.params()
        for u in self.up:
            out += u.params()
        for s in self.sites:
            out += s.params()
        out += self.gn_out.params() + self.conv_out.params()
        return out


# -- full model --------------------------------------------------------------------


class TryOffModel:
    """Everything wired together: VAE, image tokens, prompt, both U-Nets."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.config = cfg
        self.seed = seed
        ss = np.random.SeedSequence([0x7269, seed])
        streams = {k: np.random.default_rng(s) for k, s in zip(
            ("vae", "image_stack", "image_proj", "prompt", "denoise", "reference"),
            ss.spawn(6))}
        self.vae = ToyVAE(streams["vae"], "vae", cfg.latent_channels)
        self.image_stack = ImageFeatureStack(streams["image_stack"], "image_stack",
                                             cfg.image_size)
        self.image_proj = Linear(streams["image_proj"], "image_proj",
                                 self.image_stack.token_dim, cfg.cond_dim)
        prompt = streams["prompt"].normal(0.0, 1.0, size=(1, cfg.prompt_len, cfg.cond_dim))
        self.prompt_tokens = Parameter("prompt.tokens", prompt.astype(np.float32))
        self.null_tokens = Tensor(np.zeros((1, cfg.prompt_len, cfg.cond_dim), dtype=np.float32))
        self.denoise = MiniUNet(streams["denoise"], "denoise", cfg, cfg.site_modes(),
                                cfg.cond_dim)
        self.reference: Optional[MiniUNet] = None
        if cfg.uses_reference():
            self.reference = MiniUNet(streams["reference"], "reference", cfg,
                                      ["self"] * NUM_SITES, cfg.cond_dim)
        self.latent_std = 1.0
        self.ref_pass_count = 0
        self.ready = False
        self.apply_freeze_partition()

    # -- parameter bookkeeping -------------------------------------------------

    def parameters(self) -> List[Parameter]:
        out = self.vae.params() + self.image_stack.params() + self.image_proj.params()
        out.append(self.prompt_tokens)
        out += self.denoise.params()
        if self.reference is not None:
            out += self.reference.params()
        return out

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def frozen_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if not p.trainable]

    def apply_freeze_partition(self, unfreeze_backbone: bool = False) -> None:
        """Establish which parameters train: the reference net, the hybrid
        blocks' reference K/V, and the image projection; everything else is
        frozen. `unfreeze_backbone` additionally unfreezes the denoising net
        (the comparison mode for the freezing study)."""
        for p in self.parameters():
            name = p.name
            if name.startswith(("vae.", "image_stack.", "prompt.")):
                p.trainable = False
            elif name.startswith("reference.") or name.startswith("image_proj."):
                p.trainable = True
            elif name.startswith("denoise."):
                if unfreeze_backbone:
                    p.trainable = True
                else:
                    p.trainable = name.endswith((".wk_ref", ".wv_ref"))
            else:
                p.trainable = False

    # -- forward paths -----------------------------------------------------------

    def encode_person_tokens(self, x: Tensor) -> Tensor:
        """Frozen feature stack + trainable projection -> [B,16,cond_dim]."""
        return self.image_proj(self.image_stack(x))

    def reference_forward(self, worn_latent: Tensor, tokens: Tensor) -> List[Tensor]:
        """Single clean pass (t=0) of the reference net; returns the hidden
        token maps entering each of the 7 attention sites."""
        if self.reference is None:
            raise StateError(f"case {self.config.case!r} has no reference network")
        self.ref_pass_count += 1
        _, collected = self.reference.forward(
            worn_latent, np.zeros(worn_latent.shape[0], dtype=np.int64), tokens,
            collect_ref=True)
        return collected

    def denoise_forward(self, z_t: Tensor, t: np.ndarray, cond: Optional[Tensor],
                        ref_feats: Optional[List[Tensor]] = None,
                        ref_scale: Optional[float] = None,
                        trace: Optional[dict] = None) -> Tensor:
        """Noise prediction; `cond=None` selects the null prompt and
        `ref_feats=None` the unconditional (no-reference) branch."""
        if cond is None:
            cond = self.null_tokens
        return self.denoise.forward(z_t, t, cond, ref_feats=ref_feats,
                                    ref_scale=ref_scale, trace=trace)


def build_model(config: ModelConfig, seed: int = 0) -> TryOffModel:
    """Construct a model for the given ablation case with seeded init and the
    freeze partition applied."""
    return TryOffModel(config, seed)
