"""Image I/O, range conversion and the procedural toy-face dataset.

Images are ``float32`` arrays of shape ``(H, W, 3)`` with values in [-1, 1].
Networks consume channel-first batches; :func:`to_batch` / :func:`from_batch`
convert between the two layouts.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from egain.errors import ValidationError

MANIFEST_NAME = "manifest.json"


def is_power_of_two(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n > 0 and (n & (n - 1)) == 0


def check_resolution(resolution: int) -> int:
    if not is_power_of_two(resolution) or resolution < 16:
        raise ValidationError(
            f"resolution must be a power of two >= 16, got {resolution}"
        )
    return int(resolution)


def check_image(x: np.ndarray) -> np.ndarray:
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got shape {x.shape}")
    if x.shape[0] != x.shape[1] or not is_power_of_two(x.shape[0]):
        raise ValidationError(f"image must be square with power-of-two side, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("image contains non-finite values")
    return x


def to_unit_range(x):
    """Map [-1, 1] to [0, 1]."""
    return (x + 1) / 2


def from_unit_range(x):
    return x * 2 - 1


def resize_bilinear(x: np.ndarray, resolution: int) -> np.ndarray:
    """Bilinear resize of an H x W x C array, half-pixel centers, no antialiasing."""
    if x.shape[0] == resolution and x.shape[1] == resolution:
        return x
    t = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None].double()
    out = F.interpolate(t, size=(resolution, resolution), mode="bilinear",
                        align_corners=False, antialias=False)
    return out[0].numpy().transpose(1, 2, 0)


def load_image(path, resolution: int) -> np.ndarray:
    check_resolution(resolution)
    try:
        with PILImage.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    x = rgb / 255.0 * 2.0 - 1.0
    x = resize_bilinear(x, resolution)
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def quantize(x: np.ndarray) -> np.ndarray:
    """[-1, 1] float image to uint8, clamping out-of-range values."""
    v = np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    return np.round(v * 255.0).astype(np.uint8)


def save_image(x: np.ndarray, path) -> None:
    PILImage.fromarray(quantize(x)).save(path, format="PNG")


def to_batch(images, dtype=torch.float32) -> torch.Tensor:
    """Stack H x W x 3 arrays into a (B, 3, H, W) tensor."""
    arr = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def from_batch(t: torch.Tensor) -> list[np.ndarray]:
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return [np.ascontiguousarray(a) for a in arr]


@dataclass
class DatasetManifest:
    entries: list[tuple[str, str]]
    resolution: int
    seed: int
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        check_resolution(self.resolution)
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("manifest ids must be unique")

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def load(self, index: int) -> np.ndarray:
        return load_image(self.resolve(self.entries[index][1]), self.resolution)

    def load_all(self) -> np.ndarray:
        return np.stack([self.load(i) for i in range(len(self))])

    def to_json(self) -> dict:
        return {
            "resolution": self.resolution,
            "seed": self.seed,
            "entries": [{"id": i, "path": p} for i, p in self.entries],
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return path

    @classmethod
    def from_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            doc = json.loads(path.read_text())
        except OSError:
            raise
        except ValueError as exc:
            raise ValidationError(f"malformed manifest {path}: {exc}") from exc
        try:
            entries = [(e["id"], e["path"]) for e in doc["entries"]]
            return cls(entries, int(doc["resolution"]), int(doc["seed"]), root=path.parent)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed manifest {path}: {exc}") from exc


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def render_toy_face(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Draw one face-like image as uint8 H x W x 3."""
    r = resolution
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64)
    yy = (yy + 0.5) / r
    xx = (xx + 0.5) / r

    def ellipse(cx, cy, ax, ay):
        return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0

    bg_a = np.array(_hsv_to_rgb(rng.uniform(), rng.uniform(0.2, 0.7), rng.uniform(0.3, 0.9)))
    bg_b = np.array(_hsv_to_rgb(rng.uniform(), rng.uniform(0.2, 0.7), rng.uniform(0.3, 0.9)))
    ramp = np.clip(yy + rng.uniform(-0.2, 0.2) * xx, 0, 1)[..., None]
    img = bg_a * (1 - ramp) + bg_b * ramp

    cx = 0.5 + rng.uniform(-0.08, 0.08)
    cy = 0.52 + rng.uniform(-0.06, 0.06)
    scale = rng.uniform(0.8, 1.1)
    ax, ay = 0.30 * scale, 0.38 * scale

    hair = np.array(_hsv_to_rgb(rng.uniform(0.0, 0.12), rng.uniform(0.3, 0.9), rng.uniform(0.1, 0.6)))
    img[ellipse(cx, cy - 0.06 * scale, ax * 1.1, ay * 1.02)] = hair

    skin = np.array(_hsv_to_rgb(rng.uniform(0.02, 0.11), rng.uniform(0.2, 0.6), rng.uniform(0.55, 1.0)))
    head = ellipse(cx, cy, ax, ay)
    img[head] = skin

    # freckles: isolated high-frequency detail
    n_freckles = rng.integers(0, 7)
    for _ in range(n_freckles):
        fx = cx + rng.uniform(-0.7, 0.7) * ax
        fy = cy + rng.uniform(0.0, 0.5) * ay
        img[ellipse(fx, fy, 0.6 / r, 0.6 / r) & head] = skin * 0.6

    eye_dx = rng.uniform(0.10, 0.14) * scale
    eye_y = cy - rng.uniform(0.02, 0.08) * scale
    eye_a = rng.uniform(0.045, 0.065) * scale
    iris = np.array(_hsv_to_rgb(rng.uniform(), rng.uniform(0.4, 1.0), rng.uniform(0.2, 0.6)))
    brow_lift = rng.uniform(0.06, 0.1) * scale
    for sx in (-1, 1):
        ex = cx + sx * eye_dx
        img[ellipse(ex, eye_y, eye_a, eye_a * 0.7)] = (0.95, 0.95, 0.95)
        img[ellipse(ex + rng.uniform(-0.01, 0.01), eye_y, eye_a * 0.5, eye_a * 0.5)] = iris
        brow = (np.abs(yy - (eye_y - brow_lift)) < 0.6 / r) & (np.abs(xx - ex) < eye_a * 1.2)
        img[brow] = hair * 0.8

    mouth_y = cy + rng.uniform(0.14, 0.2) * scale
    mouth_w = rng.uniform(0.06, 0.12) * scale
    lips = np.array(_hsv_to_rgb(rng.uniform(0.94, 1.0), rng.uniform(0.4, 0.8), rng.uniform(0.4, 0.8)))
    img[ellipse(cx, mouth_y, mouth_w, rng.uniform(0.015, 0.04) * scale)] = lips

    nose = (np.abs(xx - cx) < 0.5 / r) & (yy > eye_y + 0.02) & (yy < mouth_y - 0.05)
    img[nose & head] = skin * 0.8

    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def make_toy_faces(n: int, resolution: int, seed: int, out_dir) -> DatasetManifest:
    """Render ``n`` toy faces into ``out_dir`` and write ``manifest.json`` there."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    check_resolution(resolution)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    rng = np.random.default_rng(seed)
    width = max(4, len(str(n - 1)))
    entries = []
    for k in range(n):
        face = render_toy_face(rng, resolution)
        name = f"face_{k:0{width}d}"
        PILImage.fromarray(face).save(out / f"{name}.png", format="PNG")
        entries.append((name, f"{name}.png"))
    manifest = DatasetManifest(entries, resolution, seed, root=out)
    manifest.save()
    return manifest
