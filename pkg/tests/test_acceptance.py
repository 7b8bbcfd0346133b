"""Acceptance criteria 1-9, each at its stated tolerance.

Every test reports one PASS/FAIL line (also repeated in the terminal summary).
Criteria 5, 7 and 8 share two full smoke runs (toy data, 2000 GAN steps,
500 inversion steps per fusion mode), which dominate the suite's runtime.
"""
import math
import time

import numpy as np
import pytest
import torch

from conftest import tiny_model
from egain.fusion import FusionEmbedding
from egain.generator import Generator
from egain.identity import IdentityEmbedder, cosine_similarity, embed, quality_magnitude
from egain.imagecore import DatasetManifest, quantize, to_batch
from egain.losses import TERMS, LossWeights, PerceptualExtractor
from egain.metrics import evaluate_dataset, scc, ssim, vif
from egain.smoke import run_smoke
from egain.trainer import (
    TrainConfig,
    invert,
    inversion_loss,
    load_checkpoint,
    read_log,
    save_checkpoint,
    smoothed,
    train_inversion,
)
from egain.wavelet import dwt2, iwt2
from gradcheck import probe_parameters
from oracles import scc_naive, ssim_naive, vif_naive

SMOKE_SEED = 7
MODES = ("internal", "off")


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    runs = []
    for k in range(2):
        t0 = time.perf_counter()
        summary = run_smoke(tmp_path_factory.mktemp(f"smoke{k}"), seed=SMOKE_SEED, modes=MODES)
        summary["wall"] = time.perf_counter() - t0
        runs.append(summary)
    return runs


def test_criterion_1_wavelet_exactness(criterion):
    rng = np.random.default_rng(1)
    x = torch.from_numpy(rng.normal(size=(1000, 3, 32, 32)).astype(np.float32))
    t0 = time.perf_counter()
    bands = dwt2(x)
    recon = iwt2(bands)
    elapsed = time.perf_counter() - t0
    err = (recon - x).abs().amax(dim=(1, 2, 3)).max().item()
    e_x = x.double().square().sum(dim=(1, 2, 3))
    e_w = sum(b.double().square().sum(dim=(1, 2, 3)) for b in bands)
    rel = ((e_w - e_x).abs() / e_x).max().item()
    ok = err <= 1e-6 and rel <= 1e-6 and elapsed < 5
    criterion(1, ok, f"max recon err {err:.2e}, max energy rel err {rel:.2e}, {elapsed:.2f}s")


def test_criterion_2_metric_oracles(criterion, toy_faces):
    rng = np.random.default_rng(2)
    worst = {"ssim": 0.0, "scc": 0.0, "vif": 0.0}
    pairs = []
    for _ in range(50):
        x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        pairs.append(x)
        worst["ssim"] = max(worst["ssim"], abs(ssim(x, y) - ssim_naive(x, y)))
        worst["scc"] = max(worst["scc"], abs(scc(x, y) - scc_naive(x, y)))
        worst["vif"] = max(worst["vif"], abs(vif(x, y) - vif_naive(x, y)))
    ident = 0.0
    for x in pairs + list(toy_faces):
        ident = max(ident, abs(ssim(x, x) - 1), abs(scc(x, x) - 1), abs(vif(x, x) - 1))
    ok = max(worst.values()) <= 1e-6 and ident <= 1e-6
    criterion(2, ok, "oracle gaps " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
              + f"; identity gap {ident:.1e}")


def test_criterion_3_noise_monotonicity(criterion, toy_faces):
    rng = np.random.default_rng(3)
    s_means, v_means = [], []
    for sigma in (0.05, 0.1, 0.2):
        noisy = [np.clip(x + rng.normal(0, sigma, x.shape), 0, 1) for x in toy_faces]
        s_means.append(np.mean([ssim(x, n) for x, n in zip(toy_faces, noisy)]))
        v_means.append(np.mean([vif(x, n) for x, n in zip(toy_faces, noisy)]))
    ok = s_means[0] > s_means[1] > s_means[2] and v_means[0] > v_means[1] > v_means[2]
    criterion(3, ok, "ssim " + " > ".join(f"{v:.4f}" for v in s_means)
              + "; vif " + " > ".join(f"{v:.4f}" for v in v_means))


def test_criterion_4_baseline_identity(criterion, toy_manifest):
    torch.manual_seed(4)
    G = Generator(32).eval()
    emb = FusionEmbedding(G.block_specs(G.fusion_resolutions()))
    gen = torch.Generator().manual_seed(4)
    worst = 0.0
    with torch.no_grad():
        for _ in range(20):
            w = torch.randn(1, G.num_styles, G.w_dim, generator=gen)
            m_d = torch.randn(1, 64, 8, 8, generator=gen)
            worst = max(worst, (G.synthesize(w, emb(m_d)) - G.synthesize(w)).abs().max().item())

    off = tiny_model("off", resolution=32, seed=4).eval()
    identical = True
    for i in range(len(toy_manifest)):
        _, _, y0, y = invert(toy_manifest.load(i), off)
        identical &= np.array_equal(y0, y) and quantize(y0).tobytes() == quantize(y).tobytes()
    ok = worst <= 1e-6 and identical
    criterion(4, ok, f"zero-detail fusion max diff {worst:.1e} over 20 codes; "
              f"fusion-off y == y0 byte-identical: {identical}")


def _log_consistency(rows, weights):
    worst = 0.0
    for r in rows:
        expect = math.fsum(getattr(weights, t) * r[t] for t in TERMS)
        worst = max(worst, abs(r["total"] - expect) / abs(expect) if expect else abs(r["total"]))
    return worst


@pytest.mark.slow
def test_criterion_5_loss_consistency(criterion, smoke_runs, tmp_path):
    rows = []
    for run in smoke_runs:
        for mode in MODES:
            rows += read_log(f"{run['workdir']}/inv_{mode}/train_log.jsonl")
    worst = _log_consistency(rows, LossWeights())

    data = DatasetManifest.from_file(f"{smoke_runs[0]['workdir']}/data_train")
    gan = load_checkpoint(f"{smoke_runs[0]['workdir']}/gan.ckpt")
    cfg = TrainConfig(resolution=32, steps=5, avg_latent_samples=512, seed=SMOKE_SEED,
                      weights=LossWeights.zeros(), log_interval=0)
    train_inversion(data, cfg, gan, log_path=tmp_path / "zero.jsonl")
    zero_totals = [r["total"] for r in read_log(tmp_path / "zero.jsonl")]
    ok = worst <= 1e-9 and all(t == 0.0 for t in zero_totals)
    criterion(5, ok, f"{len(rows)} logged steps, max rel gap {worst:.1e}; "
              f"all-zero weights totals {sorted(set(zero_totals))}")


def test_criterion_6_gradient_correctness(criterion):
    model = tiny_model("internal", resolution=16, seed=6, dtype=torch.float64)
    # move off the zero-initialized saddle so every probed gradient is generic
    with torch.no_grad():
        model.delta.final.weight.normal_(0, 0.3)
        for conv in model.fusion.detail_convs.values():
            conv.weight.normal_(0, 0.3)
    extractor = PerceptualExtractor().double()
    embedder = IdentityEmbedder(16).double()
    gen = torch.Generator().manual_seed(6)
    x = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
    w_samples = torch.randn(4, 6, 64, generator=gen, dtype=torch.float64) * 0.5
    weights = LossWeights()

    def loss():
        return inversion_loss(model, x, w_samples, extractor, embedder, weights)[0]

    groups = {"basic": list(model.basic.parameters()),
              "delta": list(model.delta.parameters()),
              "fusion": list(model.fusion.parameters())}
    t0 = time.perf_counter()
    res = [r for name, n in (("basic", 7), ("delta", 7), ("fusion", 6))
           for r in probe_parameters(loss, {name: groups[name]}, n, seed=len(name), min_grad=1e-5)]
    elapsed = time.perf_counter() - t0
    worst = max(r[-1] for r in res)
    ok = len(res) == 20 and worst <= 1e-3 and elapsed < 120
    criterion(6, ok, f"{len(res)} parameters (L=6, 16x16, float64), max rel err {worst:.1e}, "
              f"{elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_7_smoke_training(criterion, smoke_runs):
    run = smoke_runs[0]
    ratios = {m: run["modes"][m]["loss_final"] / run["modes"][m]["loss_step10"] for m in MODES}
    fused, off = run["modes"]["internal"]["mean"], run["modes"]["off"]["mean"]
    directional = {k: fused[k] >= off[k] for k in ("ssim", "scc", "vif")}
    wall = max(r["wall"] for r in smoke_runs)
    ok = all(r <= 0.7 for r in ratios.values()) and all(directional.values()) and wall <= 15 * 60
    detail = (
        "loss ratio " + ", ".join(f"{m} {r:.3f}" for m, r in ratios.items())
        + "; internal vs off " + ", ".join(f"{k} {fused[k]:.4f}/{off[k]:.4f}" for k in directional)
        + f"; wall {wall / 60:.1f} min"
    )
    criterion(7, ok, detail)


@pytest.mark.slow
def test_criterion_8_determinism(criterion, smoke_runs):
    a, b = (r["workdir"] for r in smoke_runs)
    same_csv = all(open(f"{a}/inv_{m}/metrics.csv", "rb").read()
                   == open(f"{b}/inv_{m}/metrics.csv", "rb").read() for m in MODES)

    heldout = DatasetManifest.from_file(f"{a}/data_heldout")
    worst = 0.0
    recomputed_csv = True
    for m in MODES:
        path = f"{a}/inv_{m}/model.ckpt"
        bundle = load_checkpoint(path)
        live = bundle.model()
        resaved = f"{a}/inv_{m}/resaved.ckpt"
        save_checkpoint(bundle, resaved)
        loaded = load_checkpoint(resaved).model()
        for i in range(len(heldout)):
            x = heldout.load(i)
            for p, q in zip(invert(x, live), invert(x, loaded)):
                worst = max(worst, float(np.abs(p - q).max()))
        # metrics.csv was written from the in-memory model at the end of training
        report, _ = evaluate_dataset(heldout, loaded)
        recomputed_csv &= report.to_csv() == open(f"{a}/inv_{m}/metrics.csv").read()
    ok = same_csv and worst <= 1e-7 and recomputed_csv
    criterion(8, ok, f"metrics.csv identical across runs: {same_csv}; "
              f"checkpoint roundtrip max diff {worst:.1e}; "
              f"reloaded model reproduces metrics.csv: {recomputed_csv}")


def test_criterion_9_embedding_contracts(criterion, toy_faces):
    emb = IdentityEmbedder(32)
    e = embed(to_batch([f * 2 - 1 for f in toy_faces]), emb).double()
    rng = np.random.default_rng(9)
    e = torch.cat([e, torch.from_numpy(rng.normal(size=(10, 128)))])
    self_gap = (cosine_similarity(e, e) - 1).abs().max().item()
    neg_gap = (cosine_similarity(e, -e) + 1).abs().max().item()
    base = cosine_similarity(e, e.roll(1, dims=0))
    scale_gap = 0.0
    homog_gap = 0.0
    for c in (-7.5, -1.0, 0.001, 3.0, 250.0):
        scale_gap = max(scale_gap, (cosine_similarity(abs(c) * e, e.roll(1, dims=0)) - base)
                        .abs().max().item())
        homog_gap = max(homog_gap, (quality_magnitude(c * e) - abs(c) * quality_magnitude(e))
                        .abs().max().item())
    rounding = 1e-12
    ok = self_gap <= rounding and neg_gap <= rounding and scale_gap <= rounding and homog_gap <= 1e-6
    criterion(9, ok, f"|cos(e,e)-1| {self_gap:.1e}, |cos(e,-e)+1| {neg_gap:.1e}, "
              f"scale gap {scale_gap:.1e}, homogeneity gap {homog_gap:.1e}")


def _unit(a):
    return (np.clip(a, -1, 1).astype(np.float64) + 1) / 2


@pytest.mark.slow
def test_smoke_side_observations(smoke_runs):
    """Derived examples that ride on the smoke run but are not numbered criteria."""
    work = smoke_runs[0]["workdir"]
    gaps = [r["logit_gap"] for r in read_log(f"{work}/gan_log.jsonl")]
    # the gap spikes early then settles as the generator catches up; only separation is expected
    assert np.mean(gaps[-200:]) > max(0.0, gaps[0])
    w_terms = [r["w_reg"] for r in read_log(f"{work}/inv_internal/train_log.jsonl")]
    sm = smoothed(w_terms, 10)
    assert sm[-1] < sm[9]
    train = DatasetManifest.from_file(f"{work}/data_train")
    model = load_checkpoint(f"{work}/inv_internal/model.ckpt").model()
    gains = []
    for i in range(8):
        x = train.load(i)
        _, _, y0, y = invert(x, model)
        gains.append(ssim(_unit(x), _unit(y)) - ssim(_unit(x), _unit(y0)))
    assert np.mean(gains) >= 0
