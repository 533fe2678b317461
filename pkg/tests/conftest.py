import pytest
import torch

from save_avs.config import ModelConfig, TrainConfig
from save_avs.data import AVSDataset, SyntheticSpec, generate_synthetic
from save_avs.model import build_model
from save_avs.trainer import train

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion():
    """Record one pass/fail line per acceptance criterion."""

    def _report(number, description, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {description}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return _report


def small_config(**overrides) -> ModelConfig:
    """C=8, N=2 model on a 4x4 token grid."""
    kw = dict(embed_dim=8, num_blocks=2, num_heads=2, patch_size=4, input_resolution=16,
              prompt_dim=8, audio_dim=6, seed=0)
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def tiny_config():
    return small_config()


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_synthetic(SyntheticSpec(num_videos=20, frames_per_video=2, seed=3), root)
    return root


@pytest.fixture(scope="session")
def toy_sets(toy_data):
    return (AVSDataset.from_manifest(toy_data / "train", 64),
            AVSDataset.from_manifest(toy_data / "val", 64))


@pytest.fixture(scope="session")
def trained_toy(toy_sets):
    """Default-config model after a short run, with its metrics log."""
    train_set, val_set = toy_sets
    model = build_model(ModelConfig())
    _, log, _ = train(model, train_set, val_set, TrainConfig(epochs=6, base_lr=1e-3))
    return model, log


def random_sample(config, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    r = config.input_resolution
    return (torch.rand(3, r, r, generator=g, dtype=dtype),
            torch.randn(config.audio_dim, generator=g, dtype=dtype),
            (torch.rand(r, r, generator=g) > 0.5).to(dtype))
