"""Ensemble of functions to read ckdtrack settings and data."""
__all__ = [
    "read_settings",
    "read_sequences",
    "load_dataset",
    "RunConfig",
    "DataConfig",
    "resolved_snapshot",
    "IncorrectSettings",
    "MissingSettings",
]
from typing import List, Text

from ckdtrack.readers.dataset import load_dataset
from ckdtrack.readers.toml import (
    DataConfig,
    IncorrectSettings,
    MissingSettings,
    RunConfig,
    read_settings,
    resolved_snapshot,
)


def read_sequences(config: RunConfig, split: Text = "train") -> List:
    """Training or test sequences, synthetic or from disk.

    Synthetic train and test splits use disjoint seeds derived from ``data.seed``.
    """
    from ckdtrack.sequences import generate_synthetic_sequence

    data = config.data
    if not data.synthetic:
        root = data.root if split == "train" or not data.test_root else data.test_root
        if not root:
            raise MissingSettings("data.root is required when data.synthetic is false")
        return load_dataset(root)

    count = data.train_sequences if split == "train" else data.test_sequences
    first = data.seed * 100_000 + (0 if split == "train" else 50_000)
    return [
        generate_synthetic_sequence(
            seed=first + i, length=data.length, canvas=data.canvas, style=data.style
        )
        for i in range(count)
    ]
