import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from egain.imagecore import make_toy_faces, to_unit_range  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    return make_toy_faces(10, 32, 7, tmp_path_factory.mktemp("toy10"))


@pytest.fixture(scope="session")
def toy_faces(toy_manifest):
    """Ten toy faces as float64 H x W x 3 arrays in [0, 1]."""
    return [to_unit_range(toy_manifest.load(i).astype(np.float64)) for i in range(10)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(fusion_mode="internal", resolution=16, seed=0, dtype=torch.float32):
    """Untrained inversion model on a random generator, for structural tests."""
    from egain.generator import Generator
    from egain.trainer import InversionModel, TrainConfig, build_inversion_parts

    torch.manual_seed(seed)
    G = Generator(resolution).eval()
    for p in G.parameters():
        p.requires_grad_(False)
    cfg = TrainConfig(resolution=resolution, fusion_mode=fusion_mode)
    basic, delta, fusion = build_inversion_parts(cfg, G)
    model = InversionModel(G, basic, delta, fusion, G.average_latent(256, seed), fusion_mode)
    return model.to(dtype)


_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
