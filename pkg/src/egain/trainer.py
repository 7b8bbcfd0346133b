"""GAN pretraining, single-pass inversion training, inference and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from egain import checkpoint as ckpt
from egain.encoders import BasicEncoder, DeltaEncoder, normalize_codes
from egain.errors import CheckpointVersionError, NumericDivergenceError, ValidationError
from egain.fusion import FusionEmbedding, compute_delta, fuse_external
from egain.generator import Discriminator, Generator
from egain.identity import IdentityEmbedder
from egain.imagecore import DatasetManifest, check_resolution, from_batch, to_batch
from egain.losses import (
    LossWeights,
    PerceptualExtractor,
    avg_reg,
    d_reg,
    id_loss,
    l2_loss,
    lpips_loss,
    total_loss,
    w_reg,
)

log = logging.getLogger(__name__)

FUSION_MODES = ("internal", "external", "off")


@dataclass
class TrainConfig:
    resolution: int = 32
    batch_size: int = 8
    steps: int = 500
    learning_rate: float = 1e-3
    gan_steps: int = 2000
    gan_learning_rate: float = 2e-3
    seed: int = 0
    fusion_mode: str = "internal"
    weights: LossWeights = field(default_factory=LossWeights)
    avg_latent_samples: int = 10000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    r1_gamma: float = 1.0
    r1_interval: int = 16
    checkpoint_interval: int = 0
    log_interval: int = 50

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        check_resolution(self.resolution)
        if self.steps < 1 or self.gan_steps < 1:
            raise ValidationError("steps and gan_steps must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (w_reg needs batch statistics)")
        if self.fusion_mode not in FUSION_MODES:
            raise ValidationError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.avg_latent_samples < 1:
            raise ValidationError("avg_latent_samples must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


class InversionModel(nn.Module):
    """Basic encoder, delta encoder, fusion embedding and frozen generator."""

    def __init__(self, generator: Generator, basic: BasicEncoder, delta: DeltaEncoder,
                 fusion: FusionEmbedding | None, w_avg: torch.Tensor, fusion_mode: str):
        super().__init__()
        if fusion_mode not in FUSION_MODES:
            raise ValidationError(f"unknown fusion mode {fusion_mode!r}")
        if fusion_mode == "internal" and fusion is None:
            raise ValidationError("internal fusion needs a fusion embedding")
        if fusion_mode == "external" and delta.to_style is None:
            raise ValidationError("external fusion needs a delta encoder with a style head")
        self.generator = generator
        self.basic = basic
        self.delta = delta
        self.fusion = fusion
        self.register_buffer("w_avg", w_avg.clone())
        self.fusion_mode = fusion_mode
        self.resolution = generator.resolution

    def trainable_parameters(self):
        params = list(self.basic.parameters())
        if self.fusion_mode != "off":
            params += list(self.delta.parameters())
        if self.fusion is not None and self.fusion_mode == "internal":
            params += list(self.fusion.parameters())
        return params

    def forward(self, x, with_delta_maps=False):
        """Steps 1-6 for a batch: returns ``(w_b, m_d, y0, y)``."""
        w_b = normalize_codes(self.basic(x), self.w_avg)
        y0 = self.generator.synthesize(w_b)
        if self.fusion_mode == "off" and not with_delta_maps:
            return w_b, None, y0, y0
        m_d = self.delta(compute_delta(x, y0))
        if self.fusion_mode == "off":
            return w_b, m_d, y0, y0
        if self.fusion_mode == "internal":
            y = self.generator.synthesize(w_b, self.fusion(m_d))
        else:
            y = self.generator.synthesize(fuse_external(w_b, self.delta.to_code(m_d)))
        return w_b, m_d, y0, y

    @torch.no_grad()
    def reconstruct(self, x: np.ndarray):
        _, _, y0, y = invert(x, self)
        return y0, y


def invert(x: np.ndarray, model: InversionModel):
    """Single-pass inversion of one H x W x 3 image.

    Returns ``(w_b, m_d, y0, y)``: the (L, D) code, (C, r, r) delta feature
    maps, and both reconstructions as H x W x 3 arrays.
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != model.resolution or x.shape[1] != model.resolution:
        raise ValidationError(
            f"model expects {model.resolution}x{model.resolution}x3 images, got {x.shape}"
        )
    dtype = model.w_avg.dtype
    with torch.no_grad():
        w_b, m_d, y0, y = model(to_batch([x], dtype=dtype), with_delta_maps=True)
    return (w_b[0].numpy(), m_d[0].numpy(), from_batch(y0)[0], from_batch(y)[0])


@dataclass
class CheckpointBundle:
    config: TrainConfig
    generator: Generator
    discriminator: Discriminator | None = None
    basic: BasicEncoder | None = None
    delta: DeltaEncoder | None = None
    fusion: FusionEmbedding | None = None
    w_avg: torch.Tensor | None = None
    step: int = 0
    kind: str = "gan"

    def model(self) -> InversionModel:
        if self.kind != "inversion":
            raise ValidationError("bundle holds only a pretrained GAN, not an inversion model")
        return InversionModel(self.generator, self.basic, self.delta, self.fusion,
                              self.w_avg, self.config.fusion_mode)

    def _components(self):
        out = {"generator": self.generator, "discriminator": self.discriminator,
               "basic": self.basic, "delta": self.delta, "fusion": self.fusion}
        return {k: v for k, v in out.items() if v is not None}

    def tensors(self) -> dict[str, torch.Tensor]:
        flat = {}
        for prefix, module in self._components().items():
            for name, t in module.state_dict().items():
                flat[f"{prefix}.{name}"] = t
        if self.w_avg is not None:
            flat["w_avg"] = self.w_avg
        return flat


def build_inversion_parts(cfg: TrainConfig, generator: Generator):
    basic = BasicEncoder(cfg.resolution)
    delta = DeltaEncoder(cfg.resolution, external=cfg.fusion_mode == "external")
    fusion = None
    if cfg.fusion_mode == "internal":
        fusion = FusionEmbedding(generator.block_specs(generator.fusion_resolutions()))
    return basic, delta, fusion


def save_checkpoint(bundle: CheckpointBundle, path) -> Path:
    header = {
        "kind": bundle.kind,
        "step": int(bundle.step),
        "config": bundle.config.to_dict(),
        "components": sorted(bundle._components()),
    }
    ckpt.write_container(path, header, bundle.tensors())
    return Path(path)


def load_checkpoint(path) -> CheckpointBundle:
    header, tensors = ckpt.read_container(path)
    cfg = TrainConfig.from_dict(header["config"])
    components = set(header["components"])
    generator = Generator(cfg.resolution)
    bundle = CheckpointBundle(config=cfg, generator=generator, step=header["step"],
                              kind=header["kind"])
    if "discriminator" in components:
        bundle.discriminator = Discriminator(cfg.resolution)
    if header["kind"] == "inversion":
        bundle.basic, bundle.delta, bundle.fusion = build_inversion_parts(cfg, generator)
    for prefix, module in bundle._components().items():
        state = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        try:
            module.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise CheckpointVersionError(f"{path}: {prefix} parameters do not match: {exc}") from exc
    if "w_avg" in tensors:
        bundle.w_avg = tensors["w_avg"]
    for module in bundle._components().values():
        module.eval()
    return bundle


def _adam(params, lr, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def _load_tensor_dataset(manifest: DatasetManifest, cfg: TrainConfig) -> torch.Tensor:
    if len(manifest) == 0:
        raise ValidationError("dataset is empty")
    if manifest.resolution != cfg.resolution:
        raise ValidationError(
            f"dataset resolution {manifest.resolution} != config resolution {cfg.resolution}"
        )
    return to_batch(list(manifest.load_all()))


class _Batches:
    """Endless seeded shuffling over a preloaded (N, 3, H, W) tensor."""

    def __init__(self, data: torch.Tensor, batch_size: int, gen: torch.Generator):
        self.data = data
        self.batch_size = batch_size
        self.gen = gen
        self.order = torch.empty(0, dtype=torch.long)

    def next(self) -> torch.Tensor:
        while self.order.numel() < self.batch_size:
            self.order = torch.cat([self.order, torch.randperm(len(self.data), generator=self.gen)])
        idx, self.order = self.order[: self.batch_size], self.order[self.batch_size:]
        return self.data[idx]


class _JsonLog:
    def __init__(self, path):
        self.fh = open(path, "w") if path is not None else None
        self.t0 = time.perf_counter()

    def write(self, record: dict):
        if self.fh is not None:
            record = dict(record, elapsed=round(time.perf_counter() - self.t0, 3))
            self.fh.write(json.dumps(record) + "\n")

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def pretrain_gan(manifest: DatasetManifest, cfg: TrainConfig, out=None,
                 log_path=None) -> CheckpointBundle:
    """Non-saturating logistic GAN with lazy R1 on real images."""
    data = _load_tensor_dataset(manifest, cfg)
    torch.manual_seed(cfg.seed)
    G = Generator(cfg.resolution)
    D = Discriminator(cfg.resolution)
    opt_g = _adam(G.parameters(), cfg.gan_learning_rate, cfg)
    opt_d = _adam(D.parameters(), cfg.gan_learning_rate, cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    batches = _Batches(data, cfg.batch_size, gen)
    jlog = _JsonLog(log_path)
    try:
        for step in range(1, cfg.gan_steps + 1):
            real = batches.next()
            z = torch.randn(cfg.batch_size, G.z_dim, generator=gen)

            _set_requires_grad(D, True)
            with torch.no_grad():
                fake = G.sample_from(z)
            real_logits = D(real)
            fake_logits = D(fake)
            loss_d = F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()
            record = {"step": step}
            if cfg.r1_gamma > 0 and step % cfg.r1_interval == 0:
                real_r = real.detach().requires_grad_(True)
                (grad,) = torch.autograd.grad(D(real_r).sum(), real_r, create_graph=True)
                r1 = grad.square().sum(dim=(1, 2, 3)).mean()
                loss_d = loss_d + cfg.r1_gamma / 2 * r1 * cfg.r1_interval
                record["r1"] = float(r1.detach())
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()

            _set_requires_grad(D, False)
            z = torch.randn(cfg.batch_size, G.z_dim, generator=gen)
            loss_g = F.softplus(-D(G.sample_from(z))).mean()
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            opt_g.step()

            gap = float(real_logits.detach().mean() - fake_logits.detach().mean())
            for name, v in (("loss_d", float(loss_d.detach())), ("loss_g", float(loss_g.detach()))):
                if not math.isfinite(v):
                    raise NumericDivergenceError(name, v)
                record[name] = v
            record["logit_gap"] = gap
            jlog.write(record)
            if cfg.log_interval and step % cfg.log_interval == 0:
                log.info("gan step %d  loss_d %.4f  loss_g %.4f  gap %.3f",
                         step, record["loss_d"], record["loss_g"], gap)
    finally:
        jlog.close()
    _set_requires_grad(D, True)
    G.eval()
    D.eval()
    bundle = CheckpointBundle(config=cfg, generator=G, discriminator=D,
                              step=cfg.gan_steps, kind="gan")
    if out is not None:
        save_checkpoint(bundle, out)
    return bundle


def sample_prior_codes(generator: Generator, n: int, seed: int) -> torch.Tensor:
    """Broadcast mapped codes from a fixed seed, used as the w_reg reference cloud."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(n, generator.z_dim, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        return generator.broadcast(generator.map_latent(z.to(generator.const.dtype)))


def inversion_loss(model: InversionModel, x, w_samples, extractor, embedder,
                   weights: LossWeights):
    """Forward pass plus the six-term weighted loss on the final reconstruction."""
    w_b, _, y0, y = model(x)
    terms = {
        "d_reg": d_reg(w_b),
        "w_reg": w_reg(w_b, w_samples),
        "l2": l2_loss(x, y),
        "lpips": lpips_loss(x, y, extractor),
        "id": id_loss(x, y, embedder),
        "avg_reg": avg_reg(w_b, model.w_avg),
    }
    total, report = total_loss(terms, weights)
    return total, report, (w_b, y0, y)


def _step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) % (2 ** 63)


def train_inversion(manifest: DatasetManifest, cfg: TrainConfig, gan: CheckpointBundle,
                    out=None, log_path=None, extractor=None, embedder=None) -> CheckpointBundle:
    """Train the encoders and fusion embedding against a frozen generator."""
    if gan.config.resolution != cfg.resolution:
        raise CheckpointVersionError(
            f"GAN checkpoint is {gan.config.resolution}px, config wants {cfg.resolution}px"
        )
    data = _load_tensor_dataset(manifest, cfg)
    torch.manual_seed(cfg.seed)
    G = gan.generator
    G.eval()
    _set_requires_grad(G, False)
    w_avg = G.average_latent(cfg.avg_latent_samples, cfg.seed)
    basic, delta, fusion = build_inversion_parts(cfg, G)
    model = InversionModel(G, basic, delta, fusion, w_avg, cfg.fusion_mode)
    opt = _adam(model.trainable_parameters(), cfg.learning_rate, cfg)
    extractor = extractor or PerceptualExtractor()
    embedder = embedder or IdentityEmbedder(cfg.resolution)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    batches = _Batches(data, cfg.batch_size, gen)
    bundle = CheckpointBundle(config=cfg, generator=G, discriminator=gan.discriminator,
                              basic=basic, delta=delta, fusion=fusion, w_avg=w_avg,
                              step=0, kind="inversion")
    jlog = _JsonLog(log_path)
    try:
        for step in range(1, cfg.steps + 1):
            x = batches.next()
            w_samples = sample_prior_codes(G, cfg.batch_size, _step_seed(cfg.seed, step))
            try:
                total, report, _ = inversion_loss(model, x, w_samples, extractor, embedder,
                                                  cfg.weights)
            except NumericDivergenceError as exc:
                log.error("step %d: %s", step, exc)
                raise
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            jlog.write({"step": step, **report.terms(), "total": report.total})
            if cfg.log_interval and step % cfg.log_interval == 0:
                log.info("inversion step %d  total %.4f  l2 %.4f  lpips %.4f",
                         step, report.total, report.l2, report.lpips)
            bundle.step = step
            if out is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                save_checkpoint(bundle, out)
    finally:
        jlog.close()
    model.eval()
    if out is not None:
        save_checkpoint(bundle, out)
    return bundle


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def smoothed(values, window=10) -> np.ndarray:
    """Trailing moving average; entry t averages values[max(0, t-window+1) : t+1]."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
