"""Delta calculation and fusion of delta features into the generator.

Internal fusion replaces block features with ``F + sigmoid(g) * h``. With the
detail convs zero-initialized, ``h == 0`` and the fused generator reproduces
the plain one exactly.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from egain.errors import ValidationError
from egain.generator import EqualConv2d, FusionMaps


def _same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def compute_delta(x, y0):
    """Information lost by the basic inversion: ``x - y0``."""
    _same_shape(x, y0, "compute_delta")
    return x - y0


def fuse_internal(features, gate, detail):
    _same_shape(features, gate, "fuse_internal gate")
    _same_shape(features, detail, "fuse_internal detail")
    return features + torch.sigmoid(gate) * detail


def fuse_external(w_b, w_d):
    _same_shape(w_b, w_d, "fuse_external")
    return w_b + w_d


class FusionEmbedding(nn.Module):
    """Embeds delta feature maps into a gate and a detail map per fused block."""

    def __init__(self, block_specs, in_channels=64, zero_detail=True):
        super().__init__()
        self.block_specs = [(int(r), int(c)) for r, c in block_specs]
        self.in_channels = in_channels
        self.gate_convs = nn.ModuleDict()
        self.detail_convs = nn.ModuleDict()
        for r, c in self.block_specs:
            self.gate_convs[str(r)] = EqualConv2d(in_channels, c, 3)
            detail = EqualConv2d(in_channels, c, 3)
            if zero_detail:
                nn.init.zeros_(detail.weight)
            self.detail_convs[str(r)] = detail

    def forward(self, m_d: torch.Tensor) -> FusionMaps:
        if m_d.dim() != 4 or m_d.shape[1] != self.in_channels:
            raise ValidationError(
                f"feature maps must be (B, {self.in_channels}, r, r), got {tuple(m_d.shape)}"
            )
        maps = FusionMaps()
        for r, _ in self.block_specs:
            m = m_d if m_d.shape[-1] == r else F.interpolate(m_d, size=(r, r), mode="nearest")
            maps.gates[r] = self.gate_convs[str(r)](m)
            maps.details[r] = self.detail_convs[str(r)](m)
        return maps


def embed_fusion_maps(m_d, embedding: FusionEmbedding, block_specs=None) -> FusionMaps:
    """Apply ``embedding`` after checking it was built for ``block_specs``."""
    if block_specs is not None:
        specs = [(int(r), int(c)) for r, c in block_specs]
        if specs != embedding.block_specs:
            raise ValidationError(
                f"fusion embedding built for {embedding.block_specs}, generator blocks are {specs}"
            )
    return embedding(m_d)
