"""Reconstruction-fidelity metrics and per-dataset reports.

SSIM, SCC and VIF take H x W x 3 (or H x W) float arrays in [0, 1] and work on
the unweighted channel mean. Face ID and quality use the frozen embedder.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from egain.errors import DegenerateInputError, EgainError, ValidationError
from egain.identity import IdentityEmbedder, cosine_similarity, quality_magnitude
from egain.imagecore import DatasetManifest, to_batch, to_unit_range

log = logging.getLogger(__name__)

COLUMNS = ("face_id", "ssim", "scc", "vif", "quality")
SIMILARITY_COLUMNS = ("face_id", "ssim", "scc", "vif")

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
VIF_SCALES = 4
VIF_NOISE_VAR = 2.0 / 255.0 ** 2
VIF_EPS = 1e-10
LAPLACIAN = np.array([[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]])


def gray(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x.mean(axis=2)
    if x.ndim == 2:
        return x
    raise ValidationError(f"expected H x W or H x W x C image, got shape {x.shape}")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    k = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(k ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Half-sample symmetric extension (``d c b a | a b c d | d c b a``), periodic in 2n."""
    idx = np.mod(idx, 2 * n)
    return np.where(idx >= n, 2 * n - 1 - idx, idx)


def filter_same(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Same-size correlation with reflected borders; windows may exceed the image."""
    ph, pw = win.shape[0] // 2, win.shape[1] // 2
    rows = reflect_index(np.arange(-ph, img.shape[0] + ph), img.shape[0])
    cols = reflect_index(np.arange(-pw, img.shape[1] + pw), img.shape[1])
    return filter_valid(img[np.ix_(rows, cols)], win)


def _pair(x, y, what):
    gx, gy = gray(x), gray(y)
    if gx.shape != gy.shape:
        raise ValidationError(f"{what}: shape mismatch {gx.shape} vs {gy.shape}")
    return gx, gy


def ssim(x, y) -> float:
    """Mean windowed SSIM, rescaled from [-1, 1] to [0, 1]."""
    gx, gy = _pair(x, y, "ssim")
    if min(gx.shape) < SSIM_WIN:
        raise ValidationError(f"ssim needs images of at least {SSIM_WIN}px, got {gx.shape}")
    win = gaussian_window(SSIM_WIN, SSIM_SIGMA)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mx, my = filter_valid(gx, win), filter_valid(gy, win)
    sxx = filter_valid(gx * gx, win) - mx * mx
    syy = filter_valid(gy * gy, win) - my * my
    sxy = filter_valid(gx * gy, win) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    s = float(smap.mean())
    return min(max((s + 1.0) / 2.0, 0.0), 1.0)


def highpass(img: np.ndarray) -> np.ndarray:
    return filter_valid(img, LAPLACIAN)


def scc(x, y) -> float:
    """Pearson correlation of Laplacian-filtered grayscale images."""
    gx, gy = _pair(x, y, "scc")
    if min(gx.shape) < 3:
        raise ValidationError(f"scc needs images of at least 3px, got {gx.shape}")
    hx, hy = highpass(gx), highpass(gy)
    hx = hx - hx.mean()
    hy = hy - hy.mean()
    vx, vy = float((hx * hx).sum()), float((hy * hy).sum())
    if vx <= 1e-20 or vy <= 1e-20:
        raise DegenerateInputError("scc undefined: high-pass output has zero variance")
    r = float((hx * hy).sum()) / math.sqrt(vx * vy)
    return min(max(r, -1.0), 1.0)


def vif(ref, dist) -> float:
    """Pixel-domain multi-scale visual information fidelity; ``ref`` is the reference."""
    gr, gd = _pair(ref, dist, "vif")
    num = 0.0
    den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES - scale + 1) + 1
        win = gaussian_window(n, n / 5.0)
        if scale > 1:
            gr = filter_same(gr, win)[::2, ::2]
            gd = filter_same(gd, win)[::2, ::2]
        mu1, mu2 = filter_same(gr, win), filter_same(gd, win)
        s1 = np.maximum(filter_same(gr * gr, win) - mu1 * mu1, 0.0)
        s2 = np.maximum(filter_same(gd * gd, win) - mu2 * mu2, 0.0)
        s12 = filter_same(gr * gd, win) - mu1 * mu2

        # eps marks flat windows; it is not added to the variance, so identical
        # inputs give g == 1 and sv == 0 exactly
        flat_ref = s1 < VIF_EPS
        g = np.divide(s12, s1, out=np.zeros_like(s12), where=~flat_ref)
        sv = s2 - g * s12
        sv[flat_ref] = s2[flat_ref]
        s1[flat_ref] = 0.0
        flat_dist = s2 < VIF_EPS
        g[flat_dist] = 0.0
        sv[flat_dist] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, 0.0)

        num += float(np.log2(1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).sum())
        den += float(np.log2(1.0 + s1 / VIF_NOISE_VAR).sum())
    if den <= 0.0:
        raise DegenerateInputError("vif undefined: reference image carries no information")
    return num / den


def _embed_np(x: np.ndarray, embedder: IdentityEmbedder) -> torch.Tensor:
    with torch.no_grad():
        return embedder(to_batch([x], dtype=next(embedder.parameters()).dtype))[0]


def evaluate_pair(x: np.ndarray, y: np.ndarray, embedder: IdentityEmbedder) -> dict:
    """All five columns for source ``x`` and reconstruction ``y`` (both in [-1, 1])."""
    if np.shape(x) != np.shape(y):
        raise ValidationError(f"evaluate_pair: shape mismatch {np.shape(x)} vs {np.shape(y)}")
    # raw generator output is unbounded; clamp to the reporting range here
    x = np.clip(np.asarray(x, np.float32), -1.0, 1.0)
    y = np.clip(np.asarray(y, np.float32), -1.0, 1.0)
    ux, uy = to_unit_range(x.astype(np.float64)), to_unit_range(y.astype(np.float64))
    row = {}
    ex = ey = None
    for name in COLUMNS:
        try:
            if name == "face_id":
                ex, ey = _embed_np(x, embedder), _embed_np(y, embedder)
                row[name] = float(cosine_similarity(ex.double(), ey.double()))
            elif name == "ssim":
                row[name] = ssim(ux, uy)
            elif name == "scc":
                row[name] = scc(ux, uy)
            elif name == "vif":
                row[name] = vif(ux, uy)
            else:
                row[name] = float(quality_magnitude(ey.double()))
        except EgainError as exc:
            raise type(exc)(f"{name}: {exc}") from exc
    return row


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)
    total: int = 0

    @property
    def ids(self) -> list[str]:
        return [r["id"] for r in self.rows]

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def mean(self) -> dict:
        return {c: float(np.mean(self.column(c))) for c in COLUMNS} if self.rows else {}

    def median(self) -> dict:
        return {c: float(np.median(self.column(c))) for c in COLUMNS} if self.rows else {}

    def success_rate(self) -> float:
        return len(self.rows) / self.total if self.total else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id",) + COLUMNS)
        for r in self.rows:
            w.writerow([r["id"]] + [repr(float(r[c])) for c in COLUMNS])
        for label, agg in (("mean", self.mean()), ("median", self.median())):
            if agg:
                w.writerow([label] + [repr(agg[c]) for c in COLUMNS])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "columns": ["id", *COLUMNS],
            "rows": self.rows,
            "mean": self.mean(),
            "median": self.median(),
            "failed": self.failed,
            "total": self.total,
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "metrics.csv", out / "metrics.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return csv_path, json_path

    @classmethod
    def from_json(cls, doc: dict) -> "MetricReport":
        return cls(rows=list(doc["rows"]), failed=list(doc.get("failed", [])),
                   total=int(doc.get("total", len(doc["rows"]))))

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_json(json.loads(Path(path).read_text()))


class IdentityModel:
    """Test hook: reconstructs every image as itself."""

    def reconstruct(self, x: np.ndarray):
        return x, x


def evaluate_dataset(manifest: DatasetManifest, model, out=None,
                     embedder: IdentityEmbedder | None = None,
                     keep_images: int = 0):
    """Invert every manifest entry and score the final reconstruction.

    ``model`` needs ``reconstruct(x) -> (y0, y)``. Failed entries are listed in
    the report rather than aborting the run. Returns the report and, when
    ``keep_images`` > 0, the first ``(x, y0, y)`` triples for a preview grid.
    """
    if embedder is None:
        embedder = IdentityEmbedder(manifest.resolution)
    report = MetricReport(total=len(manifest))
    kept = []
    for idx, (image_id, _) in enumerate(manifest.entries):
        try:
            x = manifest.load(idx)
            y0, y = model.reconstruct(x)
            row = evaluate_pair(x, y, embedder)
        except (OSError, EgainError) as exc:
            log.warning("evaluation failed for %s: %s", image_id, exc)
            report.failed.append(image_id)
            continue
        report.rows.append({"id": image_id, **row})
        if len(kept) < keep_images:
            kept.append((x, y0, y))
    if out is not None:
        report.write(out)
    return report, kept
