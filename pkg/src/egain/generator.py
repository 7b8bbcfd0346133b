"""Miniature style-based generator with wavelet output heads, plus a
discriminator that reads Haar subbands instead of pixels.

Block ``i`` runs at ``4 * 2**i`` pixels and consumes style rows ``2i`` and
``2i + 1``. Its head reads the Haar decomposition of the block features and
emits subband increments; the running image from the previous block supplies
the low band, and ``iwt2`` produces the image at the block's resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from egain.errors import ValidationError
from egain.wavelet import Subbands, dwt2_channels, iwt2

W_DIM = 64
Z_DIM = 64
LRELU_SLOPE = 0.2
LRELU_GAIN = math.sqrt(2.0)


def num_blocks(resolution: int) -> int:
    return int(math.log2(resolution)) - 1


def num_styles(resolution: int) -> int:
    return 2 * num_blocks(resolution)


def lrelu(x):
    return F.leaky_relu(x, LRELU_SLOPE) * LRELU_GAIN


class EqualLinear(nn.Module):
    def __init__(self, in_dim, out_dim, bias_init=0.0, lr_mul=1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqualConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.stride = stride
        self.padding = kernel // 2

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias,
                        stride=self.stride, padding=self.padding)


class MappingNetwork(nn.Module):
    def __init__(self, z_dim=Z_DIM, w_dim=W_DIM, n_layers=4, lr_mul=0.01):
        super().__init__()
        dims = [z_dim] + [w_dim] * n_layers
        self.layers = nn.ModuleList(
            EqualLinear(a, b, lr_mul=lr_mul) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, z):
        x = z * torch.rsqrt(z.square().mean(dim=-1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = lrelu(layer(x))
        return x


class ModulatedConv2d(nn.Module):
    """Style-modulated conv. Runs as scale-input / shared conv / scale-output,
    which equals the per-sample weight formulation."""

    def __init__(self, in_ch, out_ch, kernel, w_dim=W_DIM, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.affine = EqualLinear(w_dim, in_ch, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.demodulate = demodulate
        self.padding = kernel // 2

    def forward(self, x, w):
        s = self.affine(w)
        weight = self.weight * self.scale
        out = F.conv2d(x * s[:, :, None, None], weight, padding=self.padding)
        if self.demodulate:
            wsq = weight.square().sum(dim=(2, 3))  # (O, I)
            d = torch.rsqrt(s.square() @ wsq.t() + 1e-8)  # (B, O)
            out = out * d[:, :, None, None]
        return out


class StyledLayer(nn.Module):
    def __init__(self, in_ch, out_ch, w_dim=W_DIM):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, 3, w_dim)
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x, w, noise=None):
        x = self.conv(x, w)
        if noise is not None:
            x = x + noise * self.noise_strength
        return lrelu(x + self.bias[None, :, None, None])


class WaveletHead(nn.Module):
    """Block features -> Haar subband increments (3 channels each)."""

    def __init__(self, in_ch, w_dim=W_DIM):
        super().__init__()
        self.conv = ModulatedConv2d(4 * in_ch, 12, 1, w_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(12))

    def forward(self, x, w) -> Subbands:
        out = self.conv(dwt2_channels(x), w) + self.bias[None, :, None, None]
        return Subbands(*torch.chunk(out, 4, dim=1))


@dataclass
class FusionMaps:
    """Per-block gate logits and detail maps keyed by block resolution."""

    gates: dict[int, torch.Tensor] = field(default_factory=dict)
    details: dict[int, torch.Tensor] = field(default_factory=dict)

    def __contains__(self, resolution):
        return resolution in self.gates

    def resolutions(self):
        return sorted(self.gates)


class Generator(nn.Module):
    def __init__(self, resolution=32, w_dim=W_DIM, z_dim=Z_DIM,
                 base_channels=128, min_channels=32):
        super().__init__()
        if resolution < 16 or resolution & (resolution - 1):
            raise ValidationError(f"resolution must be a power of two >= 16, got {resolution}")
        self.resolution = resolution
        self.w_dim = w_dim
        self.z_dim = z_dim
        self.n_blocks = num_blocks(resolution)
        self.num_styles = 2 * self.n_blocks
        self.channels = [max(base_channels >> i, min_channels) for i in range(self.n_blocks)]
        self.block_resolutions = [4 * 2 ** i for i in range(self.n_blocks)]

        self.mapping = MappingNetwork(z_dim, w_dim)
        self.const = nn.Parameter(torch.randn(1, self.channels[0], 4, 4))
        self.conv1 = nn.ModuleList()
        self.conv2 = nn.ModuleList()
        self.heads = nn.ModuleList()
        prev = self.channels[0]
        for ch in self.channels:
            self.conv1.append(StyledLayer(prev, ch, w_dim))
            self.conv2.append(StyledLayer(ch, ch, w_dim))
            self.heads.append(WaveletHead(ch, w_dim))
            prev = ch

    def block_specs(self, resolutions=None) -> list[tuple[int, int]]:
        """(resolution, channels) of blocks, optionally restricted to ``resolutions``."""
        specs = list(zip(self.block_resolutions, self.channels))
        if resolutions is None:
            return specs
        wanted = set(resolutions)
        return [s for s in specs if s[0] in wanted]

    def fusion_resolutions(self) -> list[int]:
        """Blocks that receive delta detail: res/4 and res/2."""
        return [self.resolution // 4, self.resolution // 2]

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        if not torch.all(torch.isfinite(z)):
            raise ValidationError("latent z contains non-finite values")
        if z.shape[-1] != self.z_dim:
            raise ValidationError(f"z must have {self.z_dim} coordinates, got {z.shape[-1]}")
        return self.mapping(z)

    def broadcast(self, w_single: torch.Tensor) -> torch.Tensor:
        """(…, D) -> (…, L, D) by repeating the row."""
        return w_single.unsqueeze(-2).repeat_interleave(self.num_styles, dim=-2)

    @torch.no_grad()
    def average_latent(self, n: int, seed: int) -> torch.Tensor:
        if n < 1:
            raise ValidationError(f"average_latent needs n >= 1, got {n}")
        gen = torch.Generator().manual_seed(int(seed))
        dtype = self.const.dtype
        z = torch.randn(n, self.z_dim, generator=gen, dtype=torch.float64).to(dtype)
        w = self.map_latent(z)
        return self.broadcast(w.double().mean(dim=0).to(dtype))

    def _check_fusion(self, fusion: FusionMaps, batch: int):
        for r in fusion.resolutions():
            if r not in self.block_resolutions:
                raise ValidationError(f"no generator block at resolution {r}")
            ch = self.channels[self.block_resolutions.index(r)]
            for name, t in (("gate", fusion.gates[r]), ("detail", fusion.details.get(r))):
                if t is None or tuple(t.shape) != (batch, ch, r, r):
                    got = None if t is None else tuple(t.shape)
                    raise ValidationError(
                        f"fusion {name} at {r}px has shape {got}, expected {(batch, ch, r, r)}"
                    )

    def _noise(self, gen, batch, r, dtype):
        return torch.randn(batch, 1, r, r, generator=gen, dtype=torch.float64).to(dtype)

    def synthesize(self, w: torch.Tensor, fusion: FusionMaps | None = None,
                   noise_mode: str = "off", noise_seed: int = 0,
                   return_features: bool = False):
        """Style codes (B, L, D) or (L, D) -> raw images (B, 3, res, res), unclamped."""
        from egain.fusion import fuse_internal

        single = w.dim() == 2
        if single:
            w = w.unsqueeze(0)
        if w.shape[1:] != (self.num_styles, self.w_dim):
            raise ValidationError(
                f"style code must be {self.num_styles}x{self.w_dim}, got {tuple(w.shape[1:])}"
            )
        if noise_mode not in ("off", "seeded"):
            raise ValidationError(f"unknown noise_mode {noise_mode!r}")
        batch = w.shape[0]
        if fusion is not None:
            self._check_fusion(fusion, batch)
        gen = torch.Generator().manual_seed(noise_seed) if noise_mode == "seeded" else None

        x = self.const.expand(batch, -1, -1, -1)
        img = w.new_zeros(batch, 3, 2, 2)
        feats = {}
        for i, r in enumerate(self.block_resolutions):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            n1 = self._noise(gen, batch, r, x.dtype) if gen is not None else None
            n2 = self._noise(gen, batch, r, x.dtype) if gen is not None else None
            x = self.conv1[i](x, w[:, 2 * i], n1)
            x = self.conv2[i](x, w[:, 2 * i + 1], n2)
            if fusion is not None and r in fusion:
                x = fuse_internal(x, fusion.gates[r], fusion.details[r])
            feats[r] = x
            inc = self.heads[i](x, w[:, 2 * i + 1])
            img = iwt2(Subbands(2 * img + inc.ll, inc.lh, inc.hl, inc.hh))
        if single:
            img = img[0]
        return (img, feats) if return_features else img

    def forward(self, w, fusion=None, noise_mode="off"):
        return self.synthesize(w, fusion, noise_mode)

    def sample_from(self, z: torch.Tensor, noise_mode: str = "off"):
        """Images for prior latents z (B, Dz), one shared style row per sample."""
        return self.synthesize(self.broadcast(self.map_latent(z)), noise_mode=noise_mode)


class Discriminator(nn.Module):
    """Conv stack over the Haar subbands of the input image, down to one logit."""

    def __init__(self, resolution=32, base_channels=32, max_channels=128):
        super().__init__()
        self.resolution = resolution
        r = resolution // 2
        ch = base_channels
        self.from_wavelets = EqualConv2d(12, ch, 1)
        self.convs = nn.ModuleList()
        while r > 4:
            nxt = min(ch * 2, max_channels)
            self.convs.append(EqualConv2d(ch, nxt, 3))
            ch, r = nxt, r // 2
        self.fc = EqualLinear(ch * 16, ch)
        self.out = EqualLinear(ch, 1)

    def forward(self, x):
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValidationError(
                f"discriminator expects {self.resolution}px images, got {tuple(x.shape[-2:])}"
            )
        h = lrelu(self.from_wavelets(dwt2_channels(x)))
        for conv in self.convs:
            h = F.avg_pool2d(lrelu(conv(h)), 2)
        h = lrelu(self.fc(h.flatten(1)))
        return self.out(h).squeeze(-1)


def discriminate(x: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    """Logit per image; accepts a single (3, H, W) image or a batch."""
    if x.dim() == 3:
        return disc(x.unsqueeze(0))[0]
    return disc(x)
