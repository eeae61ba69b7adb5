"""Default global values used in keyword arguments."""
from pathlib import Path

DATA_DIRECTORY = Path(__file__).parent / "data"
""" Standard data directory."""
DEFAULT_SETTINGS_PATH = DATA_DIRECTORY / "default_settings.toml"
""" Settings every user file is merged over."""
DEFAULT_OUTPUT_DIRECTORY = Path("Results")
""" Default root directory for checkpoints, loss logs and reports."""
CHECKPOINT_VERSION = "ckdtrack-checkpoint/1"
""" Version tag written to and checked in checkpoint files."""
