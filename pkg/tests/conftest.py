import numpy as np
import pytest
import torch

from domgen.data import generate_synthetic_dataset
from domgen.model import ModelConfig


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(
        encoder_widths=[4, 8, 8, 8], fpn_channels=8, head_depth=1, num_domains=2,
        discriminator_channels=8, dropout_p=0.0, patch_size=64,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture(scope="session")
def small_dataset():
    # 3 domains, last one unlabeled; 5 images each -> 3 train / 1 val / 1 test
    return generate_synthetic_dataset(3, 5, 128, (2, 4), unlabeled_domains=[2], seed=3)


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
