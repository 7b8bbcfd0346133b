import json

import numpy as np
import pytest

from egain.errors import DegenerateInputError, ValidationError
from egain.identity import IdentityEmbedder
from egain.imagecore import DatasetManifest, from_unit_range, save_image
from egain.metrics import (
    COLUMNS,
    IdentityModel,
    MetricReport,
    evaluate_dataset,
    evaluate_pair,
    scc,
    ssim,
    vif,
)
from oracles import scc_naive, ssim_naive, vif_naive

NOISE_LEVELS = (0.05, 0.1, 0.2)


def _noisy(x, sigma, rng):
    return np.clip(x + rng.normal(0.0, sigma, x.shape), 0.0, 1.0)


def _box_blur(x):
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    return sum(p[i:i + x.shape[0], j:j + x.shape[1]] for i in range(3) for j in range(3)) / 9.0


def test_ssim_identity(toy_faces):
    for x in toy_faces:
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    c1 = 0.01 ** 2
    raw = (2 * 0.3 * 0.8 + c1) / (0.3 ** 2 + 0.8 ** 2 + c1)
    expected = (raw + 1) / 2
    assert expected == pytest.approx(0.4801 / 0.7301 / 2 + 0.5, rel=1e-12)  # frozen from the closed form
    got = ssim(np.full((16, 16, 3), 0.3), np.full((16, 16, 3), 0.8))
    assert got == pytest.approx(expected, abs=1e-12)


def test_ssim_symmetric(rng):
    x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-15)


def test_ssim_too_small():
    with pytest.raises(ValidationError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_noise_monotonicity(toy_faces, rng):
    ssims, vifs = [], []
    for sigma in NOISE_LEVELS:
        noisy = [_noisy(x, sigma, rng) for x in toy_faces]
        ssims.append(np.mean([ssim(x, n) for x, n in zip(toy_faces, noisy)]))
        vifs.append(np.mean([vif(x, n) for x, n in zip(toy_faces, noisy)]))
    assert ssims[0] > ssims[1] > ssims[2]
    assert vifs[0] > vifs[1] > vifs[2]
    assert vifs[0] < 1


def test_scc_identity_and_negation(toy_faces):
    for x in toy_faces:
        assert scc(x, x) == pytest.approx(1.0, abs=1e-12)
        assert scc(x, 1 - x) == pytest.approx(-1.0, abs=1e-12)


def test_scc_blur_loses_correlation(toy_faces):
    for x in toy_faces:
        assert scc(x, _box_blur(x)) < scc(x, x)


def test_scc_symmetric(rng):
    x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert scc(x, y) == pytest.approx(scc(y, x), abs=1e-15)


def test_scc_constant_is_degenerate():
    with pytest.raises(DegenerateInputError):
        scc(np.full((16, 16, 3), 0.5), np.random.default_rng(0).random((16, 16, 3)))


def test_vif_identity_and_constant(toy_faces):
    for x in toy_faces:
        assert vif(x, x) == pytest.approx(1.0, abs=1e-6)
        assert vif(x, np.full_like(x, 0.5)) < 0.05


def test_vif_not_symmetric(toy_faces, rng):
    x = toy_faces[0]
    y = _noisy(x, 0.1, rng)
    assert vif(x, y) != pytest.approx(vif(y, x), abs=1e-6)


def test_vif_shape_mismatch():
    with pytest.raises(ValidationError):
        vif(np.zeros((16, 16)), np.zeros((8, 8)))


def test_metrics_match_loop_oracles_on_50_pairs():
    rng = np.random.default_rng(50)
    for _ in range(50):
        x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert abs(ssim(x, y) - ssim_naive(x, y)) <= 1e-6
        assert abs(scc(x, y) - scc_naive(x, y)) <= 1e-6
        assert abs(vif(x, y) - vif_naive(x, y)) <= 1e-6


def test_vif_oracle_on_structured_pair(toy_faces, rng):
    x = toy_faces[3][8:24, 8:24]
    y = _noisy(x, 0.05, rng)
    assert abs(vif(x, y) - vif_naive(x, y)) <= 1e-6


@pytest.fixture(scope="module")
def embedder():
    return IdentityEmbedder(32)


def test_evaluate_pair_identity_row(toy_faces, embedder):
    x = from_unit_range(toy_faces[0]).astype(np.float32)
    row = evaluate_pair(x, x, embedder)
    assert list(row) == list(COLUMNS)
    for col in ("face_id", "ssim", "scc", "vif"):
        assert row[col] == pytest.approx(1.0, abs=1e-6)
    assert row["quality"] > 0


def test_evaluate_pair_different_images(toy_faces, embedder):
    x = from_unit_range(toy_faces[0]).astype(np.float32)
    y = from_unit_range(toy_faces[1]).astype(np.float32)
    row = evaluate_pair(x, y, embedder)
    for col in ("face_id", "ssim", "scc", "vif"):
        assert row[col] < 1


def test_evaluate_pair_names_failing_metric(embedder):
    x = np.zeros((32, 32, 3), np.float32)
    with pytest.raises(DegenerateInputError, match="scc"):
        evaluate_pair(x, x, embedder)


def test_evaluate_dataset_identity_model(toy_manifest, tmp_path, embedder):
    report, kept = evaluate_dataset(toy_manifest, IdentityModel(), out=tmp_path,
                                    embedder=embedder, keep_images=2)
    assert report.failed == [] and len(kept) == 2
    mean = report.mean()
    for col in ("face_id", "ssim", "scc", "vif"):
        assert mean[col] == pytest.approx(1.0, abs=1e-6)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "id,face_id,ssim,scc,vif,quality"
    assert lines[-2].startswith("mean,") and lines[-1].startswith("median,")
    assert len(lines) == 1 + len(toy_manifest) + 2


def test_aggregates_recomputable(toy_manifest, tmp_path, embedder):
    class Shifted:
        def reconstruct(self, x):
            y = np.clip(x * 0.9 + 0.05, -1, 1)
            return y, y

    evaluate_dataset(toy_manifest, Shifted(), out=tmp_path, embedder=embedder)
    doc = json.loads((tmp_path / "metrics.json").read_text())
    for col in COLUMNS:
        vals = [r[col] for r in doc["rows"]]
        assert abs(np.mean(vals) - doc["mean"][col]) <= 1e-9
        assert abs(np.median(vals) - doc["median"][col]) <= 1e-9
    # CSV aggregate rows parse back to the same numbers
    rows = [line.split(",") for line in (tmp_path / "metrics.csv").read_text().splitlines()]
    mean_row = dict(zip(rows[0], rows[-2]))
    for col in COLUMNS:
        assert abs(float(mean_row[col]) - doc["mean"][col]) <= 1e-12


def test_evaluate_dataset_partial_failure(tmp_path, embedder):
    save_image(np.zeros((32, 32, 3)), tmp_path / "ok.png")
    m = DatasetManifest([("flat", "ok.png"), ("missing", "nope.png")], 32, 0, root=tmp_path)
    report, _ = evaluate_dataset(m, IdentityModel(), embedder=embedder)
    assert report.failed == ["flat", "missing"]
    assert report.success_rate() == 0.0


def test_report_json_roundtrip(toy_manifest, embedder):
    report, _ = evaluate_dataset(toy_manifest, IdentityModel(), embedder=embedder)
    again = MetricReport.from_json(json.loads(json.dumps(report.to_json())))
    assert again.to_csv() == report.to_csv()
