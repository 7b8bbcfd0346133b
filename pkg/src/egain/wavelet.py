"""Single-level orthonormal 2D Haar transform.

Operates on the last two axes of either a numpy array or a torch tensor, so
the same functions serve image arrays and (B, C, H, W) network activations.
For a 2x2 block ``[[a, b], [c, d]]``::

    ll = (a + b + c + d) / 2      lh = (a + b - c - d) / 2
    hl = (a - b + c - d) / 2      hh = (a - b - c + d) / 2
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch

from egain.errors import ValidationError


class Subbands(NamedTuple):
    ll: object
    lh: object
    hl: object
    hh: object

    def energy(self) -> float:
        return float(sum((b.astype(np.float64) ** 2).sum() if isinstance(b, np.ndarray)
                         else (b.double() ** 2).sum().item() for b in self))


def dwt2(x) -> Subbands:
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ValidationError(f"dwt2 needs even spatial dims, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    s, t = a + b, c + d
    u, v = a - b, c - d
    return Subbands((s + t) / 2, (s - t) / 2, (u + v) / 2, (u - v) / 2)


def iwt2(s: Subbands):
    ll, lh, hl, hh = s
    shape = ll.shape
    if any(band.shape != shape for band in (lh, hl, hh)):
        raise ValidationError("subband shapes differ: " + ", ".join(str(tuple(b.shape)) for b in s))
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    if isinstance(ll, torch.Tensor):
        top = torch.stack((a, b), dim=-1)
        bottom = torch.stack((c, d), dim=-1)
        out = torch.stack((top, bottom), dim=-3)
    else:
        top = np.stack((a, b), axis=-1)
        bottom = np.stack((c, d), axis=-1)
        out = np.stack((top, bottom), axis=-3)
    # (..., h, 2, w, 2) -> (..., 2h, 2w)
    return out.reshape(*shape[:-2], shape[-2] * 2, shape[-1] * 2)


def dwt2_channels(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, 4C, H/2, W/2) with bands stacked as [ll, lh, hl, hh]."""
    return torch.cat(tuple(dwt2(x)), dim=1)


def iwt2_channels(x: torch.Tensor) -> torch.Tensor:
    return iwt2(Subbands(*torch.chunk(x, 4, dim=1)))
