"""Frozen random-feature face embedder.

Stands in for both the recognition network behind the identity loss/metric
and the magnitude-based quality score: cosine of embeddings for identity,
Euclidean norm of the unnormalized embedding for quality.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from egain.errors import DegenerateInputError, ValidationError
from egain.generator import EqualConv2d, lrelu

EMBED_DIM = 128
EMBED_SEED = 20211
_EPS = 1e-12


def seeded_init_(module: nn.Module, seed: int) -> nn.Module:
    """Redraw every parameter from N(0, 1) with a private generator and freeze it."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype))
            p.requires_grad_(False)
    return module


class IdentityEmbedder(nn.Module):
    def __init__(self, resolution=32, dim=EMBED_DIM, seed=EMBED_SEED):
        super().__init__()
        self.resolution = resolution
        self.dim = dim
        self.seed = seed
        self.convs = nn.ModuleList([
            EqualConv2d(3, 32, 3, stride=2),
            EqualConv2d(32, 64, 3, stride=2),
            EqualConv2d(64, 64, 3),
        ])
        self.proj = EqualConv2d(64, dim, 1)
        seeded_init_(self, seed)
        self.eval()

    def forward(self, x):
        if x.dim() != 4 or x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValidationError(
                f"embedder expects (B, 3, {self.resolution}, {self.resolution}), got {tuple(x.shape)}"
            )
        h = x
        for conv in self.convs:
            h = lrelu(conv(h))
        return self.proj(h).mean(dim=(2, 3))


def embed(x, embedder: IdentityEmbedder):
    """One (3, H, W) image or a batch -> unnormalized embedding(s)."""
    if x.dim() == 3:
        return embedder(x.unsqueeze(0))[0]
    return embedder(x)


def cosine_similarity(a, b):
    """Row-wise cosine in [-1, 1]; raises on zero-magnitude embeddings."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na <= _EPS).any()) or bool((nb <= _EPS).any()):
        raise DegenerateInputError("zero-magnitude embedding has no direction")
    cos = (a * b).sum(dim=-1) / (na * nb)
    return cos.clamp(-1.0, 1.0)


def quality_magnitude(e):
    return torch.linalg.vector_norm(e, dim=-1)
