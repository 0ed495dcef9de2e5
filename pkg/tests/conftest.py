from pathlib import Path

import numpy as np
import pytest

from saprlab.models import CNNConfig, CNNModel, MLPConfig, MLPModel, ViTConfig, ViTModel

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def golden_dir():
    return GOLDEN


@pytest.fixture(scope="session")
def tiny_vit_config():
    return ViTConfig(image_size=8, patch_size=4, in_channels=3, embed_dim=8, num_heads=2, num_blocks=2,
                     mlp_ratio=2, num_classes=3)


@pytest.fixture
def tiny_vit(tiny_vit_config):
    model = ViTModel(tiny_vit_config, seed=7)
    # larger weights than the 0.02 init so gradients are far from trivial
    rng = np.random.default_rng(11)
    for p in model.parameters():
        if p.data.ndim == 2:
            p.data = rng.normal(0, 0.5, size=p.shape)
    return model


@pytest.fixture
def default_vit():
    return ViTModel(ViTConfig(), seed=0)


@pytest.fixture
def images32():
    return np.random.default_rng(0).integers(0, 256, size=(6, 3, 32, 32)).astype(np.float64)


@pytest.fixture
def small_targets():
    return {"cnn": CNNModel(CNNConfig(), seed=1), "mlp": MLPModel(MLPConfig(), seed=2)}


# One line per acceptance criterion, echoed in the terminal summary so the
# verdicts survive output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
