"""Reconstruction and latent regularization losses and their weighted total.

All image losses take (B, 3, H, W) tensors in [-1, 1] and average over the
batch. Code losses take (B, L, D) style codes (a single (L, D) code works too).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

from egain.errors import NumericDivergenceError, ValidationError
from egain.generator import EqualConv2d, lrelu
from egain.identity import IdentityEmbedder, cosine_similarity, seeded_init_

PERCEPTUAL_SEED = 31337
TERMS = ("d_reg", "w_reg", "l2", "lpips", "id", "avg_reg")


@dataclass(frozen=True)
class LossWeights:
    d_reg: float = 0.0005
    w_reg: float = 0.005
    l2: float = 1.0
    lpips: float = 0.8
    id: float = 0.1
    avg_reg: float = 0.003

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    @classmethod
    def zeros(cls):
        return cls(**{t: 0.0 for t in TERMS})

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(**{t: getattr(self, t) * c for t in TERMS})


@dataclass(frozen=True)
class LossReport:
    d_reg: float
    w_reg: float
    l2: float
    lpips: float
    id: float
    avg_reg: float
    total: float

    def terms(self) -> dict[str, float]:
        return {t: getattr(self, t) for t in TERMS}

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _check_pair(x, y, what):
    if tuple(x.shape) != tuple(y.shape):
        raise ValidationError(f"{what}: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")


def l2_loss(x, y):
    _check_pair(x, y, "l2_loss")
    return (x - y).square().mean()


class PerceptualExtractor(nn.Module):
    """Three frozen random conv stages; features are unit-normalized over channels."""

    def __init__(self, seed=PERCEPTUAL_SEED, channels=(16, 32, 64)):
        super().__init__()
        self.seed = seed
        prev = 3
        self.stages = nn.ModuleList()
        for i, ch in enumerate(channels):
            self.stages.append(EqualConv2d(prev, ch, 3, stride=1 if i == 0 else 2))
            prev = ch
        seeded_init_(self, seed)
        self.eval()

    def forward(self, x):
        feats = []
        h = x
        for conv in self.stages:
            h = lrelu(conv(h))
            norm = torch.sqrt(h.square().sum(dim=1, keepdim=True) + 1e-10)
            feats.append(h / norm)
        return feats


def lpips_loss(x, y, extractor: PerceptualExtractor):
    _check_pair(x, y, "lpips_loss")
    fx, fy = extractor(x), extractor(y)
    return torch.stack([(a - b).square().mean() for a, b in zip(fx, fy)]).mean()


def id_loss(x, y, embedder: IdentityEmbedder):
    """Mean of ``1 - cos(embed(x), embed(y))`` over the batch; in [0, 2]."""
    _check_pair(x, y, "id_loss")
    return (1.0 - cosine_similarity(embedder(x), embedder(y))).mean()


def avg_reg(w_b, w_avg):
    if tuple(w_b.shape[-2:]) != tuple(w_avg.shape[-2:]):
        raise ValidationError(f"avg_reg: shape mismatch {tuple(w_b.shape)} vs {tuple(w_avg.shape)}")
    return (w_b - w_avg).square().mean()


def d_reg(w):
    """Squared offsets of rows 2..L from row 1, normalized by (L - 1) * D."""
    if w.dim() == 2:
        w = w.unsqueeze(0)
    n_rows, dim = w.shape[-2], w.shape[-1]
    if n_rows < 2:
        return w.new_zeros(())
    diffs = w[:, 1:] - w[:, :1]
    return (diffs.square().sum(dim=(1, 2)) / ((n_rows - 1) * dim)).mean()


def w_reg(w_batch, w_samples):
    """Match batch mean and per-coordinate std of the codes to prior samples.

    Both moment gaps are squared and summed over all L * D coordinates.
    """
    if w_batch.shape[0] < 2 or w_samples.shape[0] < 2:
        raise ValidationError("w_reg needs at least 2 codes per batch for a std estimate")
    if tuple(w_batch.shape[1:]) != tuple(w_samples.shape[1:]):
        raise ValidationError(
            f"w_reg: code shapes differ {tuple(w_batch.shape)} vs {tuple(w_samples.shape)}"
        )

    def moments(w):
        mean = w.mean(dim=0)
        std = torch.sqrt(w.var(dim=0, unbiased=True) + 1e-12)
        return mean, std

    mb, sb = moments(w_batch)
    ms, ss = moments(w_samples)
    return (mb - ms).square().sum() + (sb - ss).square().sum()


def total_loss(terms: dict, weights: LossWeights):
    """Weighted sum of the six terms.

    Returns ``(total_tensor, report)``. The report's total is recomputed in
    double precision from the reported term values, in ``TERMS`` order.
    """
    values = {}
    for name in TERMS:
        t = terms[name]
        v = float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
        if not math.isfinite(v):
            raise NumericDivergenceError(name, v)
        values[name] = v
    total_t = sum(getattr(weights, name) * terms[name] for name in TERMS)
    total_f = 0.0
    for name in TERMS:
        total_f += getattr(weights, name) * values[name]
    return total_t, LossReport(total=total_f, **values)
