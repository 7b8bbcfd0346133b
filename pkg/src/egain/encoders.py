"""Basic encoder (image -> style offsets) and delta encoder (residual -> feature maps)."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from egain.errors import ValidationError
from egain.generator import W_DIM, EqualConv2d, EqualLinear, lrelu, num_styles

DELTA_CHANNELS = 64


def _check_input(x, resolution, what):
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[-1] != resolution or x.shape[-2] != resolution:
        raise ValidationError(
            f"{what} expects (B, 3, {resolution}, {resolution}) input, got {tuple(x.shape)}"
        )


class MapToStyle(nn.Module):
    def __init__(self, in_ch, w_dim=W_DIM):
        super().__init__()
        self.conv = EqualConv2d(in_ch, w_dim, 3, stride=2)
        self.fc = EqualLinear(w_dim, w_dim)

    def forward(self, x):
        h = lrelu(self.conv(x)).mean(dim=(2, 3))
        return self.fc(h)


def style_levels(n_styles: int) -> list[int]:
    """Pyramid level feeding each style row: 2 = deepest (coarse), 0 = shallowest (fine)."""
    parts = np.array_split(np.arange(n_styles), 3)
    levels = [0] * n_styles
    for level, rows in zip((2, 1, 0), parts):
        for r in rows:
            levels[r] = level
    return levels


class BasicEncoder(nn.Module):
    """Three-level conv pyramid (res/2, res/4, res/8) with one map-to-style head per row."""

    def __init__(self, resolution=32, w_dim=W_DIM, channels=(32, 64, 128)):
        super().__init__()
        self.resolution = resolution
        self.num_styles = num_styles(resolution)
        self.w_dim = w_dim
        self.stem = EqualConv2d(3, channels[0], 3)
        self.down = nn.ModuleList()
        prev = channels[0]
        for ch in channels:
            self.down.append(nn.ModuleList([EqualConv2d(prev, ch, 3, stride=2), EqualConv2d(ch, ch, 3)]))
            prev = ch
        self.levels = style_levels(self.num_styles)
        self.heads = nn.ModuleList(MapToStyle(channels[lv], w_dim) for lv in self.levels)

    def pyramid(self, x):
        h = lrelu(self.stem(x))
        out = []
        for down, conv in self.down:
            h = lrelu(conv(lrelu(down(h))))
            out.append(h)
        return out

    def forward(self, x):
        _check_input(x, self.resolution, "basic encoder")
        feats = self.pyramid(x)
        rows = [head(feats[lv]) for head, lv in zip(self.heads, self.levels)]
        return torch.stack(rows, dim=1)


class DeltaEncoder(nn.Module):
    """Residual image -> (B, 64, res/4, res/4) feature maps; zero output at init.

    With ``external=True`` a pooled linear head also emits a style-shaped
    ``w_d``. That head starts random with zero bias, so ``w_d`` is zero as long
    as the maps are.
    """

    def __init__(self, resolution=32, channels=DELTA_CHANNELS, external=False, w_dim=W_DIM):
        super().__init__()
        self.resolution = resolution
        self.channels = channels
        self.conv1 = EqualConv2d(3, 32, 3, stride=2)
        self.conv2 = EqualConv2d(32, channels, 3, stride=2)
        self.final = EqualConv2d(channels, channels, 3)
        nn.init.zeros_(self.final.weight)
        self.num_styles = num_styles(resolution)
        self.w_dim = w_dim
        self.to_style = EqualLinear(channels, self.num_styles * w_dim) if external else None

    def forward(self, delta):
        _check_input(delta, self.resolution, "delta encoder")
        h = lrelu(self.conv1(delta))
        h = lrelu(self.conv2(h))
        return self.final(h)

    def to_code(self, m_d):
        if self.to_style is None:
            raise ValidationError("delta encoder was built without an external-fusion head")
        w_d = self.to_style(m_d.mean(dim=(2, 3)))
        return w_d.view(-1, self.num_styles, self.w_dim)


def encode_basic(x, encoder: BasicEncoder):
    return encoder(x)


def encode_delta(delta, encoder: DeltaEncoder):
    return encoder(delta)


def normalize_codes(w_offsets, w_avg):
    """Re-center encoder offsets on the average face: ``w_b = offsets + w_avg``."""
    if tuple(w_offsets.shape[-2:]) != tuple(w_avg.shape[-2:]):
        raise ValidationError(
            f"code shapes differ: {tuple(w_offsets.shape)} vs {tuple(w_avg.shape)}"
        )
    return w_offsets + w_avg
