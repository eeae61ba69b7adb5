from pathlib import Path
from typing import Dict, Text

from pytest import fixture, mark

TINY_OVERRIDES: Dict[Text, object] = {
    "model.layers": 2,
    "model.channels": 8,
    "model.heads": 2,
    "model.mlp_ratio": 2,
    "model.head_channels": 8,
    "crop.template_size": 16,
    "crop.search_size": 32,
    "train.steps": 3,
    "train.batch_size": 2,
    "train.log_every": 1,
    "data.train_sequences": 2,
    "data.test_sequences": 2,
    "data.length": 5,
    "data.canvas": 64,
}
"""Smallest sensible geometry: 16 search tokens, 4 template tokens."""


def pytest_addoption(parser):
    parser.addoption(
        "--desk",
        action="store_true",
        default=False,
        help="Run the desk-scale training experiments",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--desk"):
        return
    skip_desk = mark.skip(reason="Desk-scale experiment, run with --desk")
    for item in items:
        if "desk" in item.keywords:
            item.add_marker(skip_desk)


@fixture(autouse=True)
def logger():
    from logging import CRITICAL, getLogger

    logger = getLogger("ckdtrack")
    logger.setLevel(CRITICAL)
    return logger


@fixture
def tiny_config():
    """Encoder geometry small enough for finite differences."""
    from ckdtrack.backbone import ModelConfig

    return ModelConfig(
        layers=2,
        channels=8,
        heads=2,
        patch=8,
        mlp_ratio=2,
        head_channels=8,
        template_size=16,
        search_size=32,
    )


@fixture
def tiny_crop(tiny_config):
    from ckdtrack.sequences import CropConfig

    return CropConfig(
        template_size=tiny_config.template_size, search_size=tiny_config.search_size
    )


@fixture
def tiny_model(tiny_config):
    from ckdtrack.backbone import FourBranchModel

    return FourBranchModel.build(tiny_config, seed=0)


@fixture
def double_model(tiny_model):
    """Tiny model in double precision, for gradient checks."""
    return tiny_model.double()


@fixture
def sequence():
    from ckdtrack.sequences import generate_synthetic_sequence

    return generate_synthetic_sequence(seed=0, length=6, canvas=64)


@fixture
def samples(sequence, tiny_crop):
    """One sample per frame, searched around the ground truth."""
    from ckdtrack.sequences import make_sample

    return [
        make_sample(frame, sequence[0], frame.gt, tiny_crop) for frame in sequence[1:]
    ]


@fixture
def batch(samples):
    from torch import float64

    from ckdtrack.sequences import collate

    return collate(samples[:3], dtype=float64)


@fixture
def run_config():
    """Fully resolved settings for a tiny run."""
    from ckdtrack.readers.toml import read_settings

    return read_settings(overrides=TINY_OVERRIDES)


@fixture
def tiny_settings(tmp_path) -> Path:
    """Settings file for a tiny run."""
    from toml import dumps

    from ckdtrack.readers.toml import parse_overrides

    path = tmp_path / "tiny.toml"
    path.write_text(dumps(parse_overrides(TINY_OVERRIDES)))
    return path


@fixture
def features():
    """Random double-precision features: 2 layers, batch 3, 20 tokens, 8 channels."""
    import torch

    generator = torch.Generator().manual_seed(42)
    return [
        torch.randn(3, 20, 8, generator=generator, dtype=torch.float64)
        for _ in range(2)
    ]
