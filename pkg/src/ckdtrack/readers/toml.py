"""Reads, merges and validates run settings.

Settings are TOML files with one section per component, e.g.:

.. code-block:: TOML

    seed = 3

    [elim]
    mode = "mce"
    keep_ratio = 0.7

Dotted keys are equivalent and often shorter, e.g. ``elim.keep_ratio = 0.7``. Every
key has a default in ``ckdtrack/data/default_settings.toml``. Keys that are not
in the defaults are rejected.
"""
__all__ = ["read_settings", "RunConfig", "DataConfig", "parse_overrides"]

from copy import deepcopy
from dataclasses import asdict, dataclass, field, fields
from logging import getLogger
from pathlib import Path
from typing import IO, Any, Dict, Mapping, MutableMapping, Optional, Text, Union

from ckdtrack.backbone import ModelConfig
from ckdtrack.decorators import SETTINGS_CHECKS, register_settings_check
from ckdtrack.defaults import DEFAULT_SETTINGS_PATH
from ckdtrack.distill import DistillConfig
from ckdtrack.elimination import EliminationConfig
from ckdtrack.errors import ConfigurationError
from ckdtrack.sequences import CropConfig
from ckdtrack.train import TrainConfig


class InputError(ConfigurationError):
    """Root for TOML input errors."""


class MissingSettings(InputError):
    """Error when an input is missing."""


class IncorrectSettings(InputError):
    """Error when an input exists but is incorrect."""


@dataclass(frozen=True)
class DataConfig:
    """Where training and test sequences come from."""

    synthetic: bool = True
    root: Text = ""
    test_root: Text = ""
    train_sequences: int = 20
    test_sequences: int = 5
    length: int = 50
    canvas: int = 128
    style: Text = "default"
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings of a run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    elim: EliminationConfig = field(default_factory=EliminationConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    log_level: Text = "INFO"
    output_dir: Text = "Results"

    @classmethod
    def from_settings(cls, settings: Mapping) -> "RunConfig":
        """Creates the configuration from a merged and validated dictionary."""
        from ckdtrack.variants import get_variant

        def build(kind, section: Mapping, **extras):
            kwargs = {}
            for f in fields(kind):
                if f.name in extras:
                    kwargs[f.name] = extras[f.name]
                elif f.name in section:
                    value = section[f.name]
                    kwargs[f.name] = tuple(value) if isinstance(value, list) else value
            return kind(**kwargs)

        crop = build(CropConfig, settings["crop"])
        return cls(
            model=build(
                ModelConfig,
                settings["model"],
                template_size=crop.template_size,
                search_size=crop.search_size,
                content_only=get_variant(settings["train"]["variant"]).content_only,
            ),
            crop=crop,
            elim=build(EliminationConfig, settings["elim"]),
            distill=build(DistillConfig, settings["distill"]),
            train=build(TrainConfig, settings["train"]),
            data=build(DataConfig, settings["data"]),
            seed=settings["seed"],
            log_level=settings["log_level"],
            output_dir=str(settings["output_dir"]),
        )

    def to_dict(self) -> Dict[Text, Any]:
        """Settings dictionary which reads back into the same configuration."""
        model = {
            k: v
            for k, v in asdict(self.model).items()
            if k not in ("template_size", "search_size", "content_only")
        }

        def listed(section) -> Dict[Text, Any]:
            return {
                k: list(v) if isinstance(v, tuple) else v
                for k, v in asdict(section).items()
            }

        return {
            "seed": self.seed,
            "log_level": self.log_level,
            "output_dir": self.output_dir,
            "model": model,
            "crop": listed(self.crop),
            "elim": listed(self.elim),
            "distill": listed(self.distill),
            "train": listed(self.train),
            "data": listed(self.data),
        }

    def replace(self, **overrides: Any) -> "RunConfig":
        """New configuration with dotted-key overrides applied and validated.

        >>> from ckdtrack.readers.toml import read_settings
        >>> config = read_settings().replace(**{"elim.keep_ratio": 1.0})
        >>> config.elim.keep_ratio
        1.0
        """
        return read_settings(self.to_dict(), overrides=overrides)


def parse_value(value: Any) -> Any:
    """Interprets command-line text as a TOML literal, or leaves it as a string.

    >>> from ckdtrack.readers.toml import parse_value
    >>> parse_value("0.25"), parse_value("[2, 3]"), parse_value("mce")
    (0.25, [2, 3], 'mce')
    """
    from toml import TomlDecodeError, loads

    if not isinstance(value, Text):
        return value
    try:
        return loads(f"value = {value}")["value"]
    except (TomlDecodeError, IndexError, ValueError):
        return value


def parse_overrides(overrides: Optional[Mapping[Text, Any]]) -> Dict[Text, Any]:
    """Nests dotted-key overrides into a settings dictionary.

    >>> from ckdtrack.readers.toml import parse_overrides
    >>> parse_overrides({"elim.keep_ratio": "0.5", "seed": 3})
    {'elim': {'keep_ratio': 0.5}, 'seed': 3}
    """
    result: Dict[Text, Any] = {}
    for key, value in (overrides or {}).items():
        *sections, name = key.replace("-", "_").split(".")
        current = result
        for section in sections:
            current = current.setdefault(section, {})
            if not isinstance(current, MutableMapping):
                raise IncorrectSettings(f"Setting {key} overrides a non-section")
        current[name] = parse_value(value)
    return result


def merge(base: Mapping, extra: Mapping) -> Dict[Text, Any]:
    """Recursively merges two settings dictionaries, ``extra`` taking precedence."""
    result = deepcopy(dict(base))
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(result.get(key), Mapping):
            result[key] = merge(result[key], value)
        else:
            result[key] = deepcopy(value)
    return result


def check_unknown_parameters(defaults: Mapping, user: Mapping, parent=None) -> None:
    """Rejects keys absent from the defaults, naming the full dotted key."""
    for key, value in user.items():
        dotted = key if parent is None else f"{parent}.{key}"
        if key not in defaults:
            raise IncorrectSettings(f"Unknown setting: {dotted}")
        if isinstance(value, Mapping) != isinstance(defaults[key], Mapping):
            raise IncorrectSettings(f"Setting {dotted} should be a section")
        if isinstance(value, Mapping):
            check_unknown_parameters(defaults[key], value, dotted)


def add_known_parameters(dd, u, parent=None):
    """Updates the default settings recursively with the user settings.

    Those variables that take default values are logged.
    """
    defaults_used = []
    d = deepcopy(dd)

    for k in dd:
        if k in u:
            v = u[k]
            if isinstance(v, Mapping):
                new_parent = k if parent is None else "{}.{}".format(parent, k)
                d[k] = add_known_parameters(d.get(k, {}), v, new_parent)
            else:
                d[k] = v
        elif not isinstance(d[k], Mapping):
            defaults_used.append(k if parent is None else "{}.{}".format(parent, k))

    if len(defaults_used) > 0:
        msg = " Default input values used: " + ", ".join(defaults_used)
        getLogger(__name__).info(msg)

    return d


def load_toml(settings_file: Union[Text, Path, IO[Text], Mapping]) -> Dict[Text, Any]:
    from toml import TomlDecodeError, load

    if isinstance(settings_file, Mapping):
        return deepcopy(dict(settings_file))
    if isinstance(settings_file, (Text, Path)) and not Path(settings_file).is_file():
        raise MissingSettings(f"Settings file {settings_file} does not exist")
    try:
        return load(settings_file)
    except TomlDecodeError as error:
        raise IncorrectSettings(f"Could not parse {settings_file}: {error}") from error


def read_settings(
    settings_file: Optional[Union[Text, Path, IO[Text], Mapping]] = None,
    overrides: Optional[Mapping[Text, Any]] = None,
) -> RunConfig:
    """Loads the settings for a run.

    The user file (optional) and the overrides (optional, dotted keys) are merged over
    the defaults. Unknown keys are an error. The registered settings checks are then
    run, and the result is converted to a :py:class:`RunConfig`.

    >>> from ckdtrack.readers.toml import read_settings
    >>> config = read_settings(overrides={"train.mask_ratio": "0.5"})
    >>> config.train.mask_ratio, config.elim.layers
    (0.5, (2,))
    >>> read_settings(overrides={"elim.keep_rate": "0.5"})
    Traceback (most recent call last):
    ...
    ckdtrack.readers.toml.IncorrectSettings: Unknown setting: elim.keep_rate
    """
    getLogger(__name__).info("Reading settings")

    defaults = load_toml(DEFAULT_SETTINGS_PATH)
    user = {} if settings_file is None else load_toml(settings_file)
    user = merge(user, parse_overrides(overrides))

    check_unknown_parameters(defaults, user)
    settings = add_known_parameters(defaults, user)
    validate_settings(settings)
    return RunConfig.from_settings(settings)


def validate_settings(settings: Dict) -> None:
    """Run the checks on the settings."""
    getLogger(__name__).debug(" Validating input settings...")
    for check in SETTINGS_CHECKS.values():
        check(settings)


def _require(condition: bool, msg: Text) -> None:
    if not condition:
        raise IncorrectSettings(msg)


@register_settings_check(vary_name=False)
def check_log_level(settings: Dict) -> None:
    """Check the log level required in the run."""
    valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
    level = str(settings["log_level"]).upper()
    _require(level in valid_levels, f"log_level must be one of {valid_levels}")
    settings["log_level"] = level


@register_settings_check(vary_name=False)
def check_model(settings: Dict) -> None:
    """Checks the encoder geometry."""
    model = settings["model"]
    for key in ("layers", "channels", "heads", "patch", "mlp_ratio", "head_channels"):
        _require(
            isinstance(model[key], int) and model[key] > 0,
            f"model.{key} must be a positive integer",
        )
    _require(
        model["channels"] % model["heads"] == 0,
        "model.channels must be divisible by model.heads",
    )


@register_settings_check(vary_name=False)
def check_crop(settings: Dict) -> None:
    """Checks crop sizes are multiples of the patch size."""
    crop, patch = settings["crop"], settings["model"]["patch"]
    for key in ("template_size", "search_size"):
        _require(
            isinstance(crop[key], int) and crop[key] > 0 and crop[key] % patch == 0,
            f"crop.{key} must be a positive multiple of model.patch ({patch})",
        )
    for key in ("template_factor", "search_factor"):
        _require(crop[key] > 0, f"crop.{key} must be positive")
        crop[key] = float(crop[key])


@register_settings_check(vary_name=False)
def check_elimination(settings: Dict) -> None:
    """Checks the elimination mode, and resolves the default layer."""
    from ckdtrack.elimination import ELIMINATION_MODES
    from ckdtrack.registration import lookup

    elim, layers = settings["elim"], settings["model"]["layers"]
    elim["mode"] = str(elim["mode"]).lower()
    if elim["mode"] != "none":
        lookup(ELIMINATION_MODES, elim["mode"], "elimination mode")
    _require(0 < elim["keep_ratio"] <= 1, "elim.keep_ratio must be in (0, 1]")
    elim["keep_ratio"] = float(elim["keep_ratio"])
    if len(elim["layers"]) == 0:
        elim["layers"] = [max(1, layers // 2)]
    for layer in elim["layers"]:
        _require(
            isinstance(layer, int) and 1 <= layer <= layers,
            f"elim.layers must be within [1, {layers}]",
        )
    elim["layers"] = sorted(set(elim["layers"]))


@register_settings_check(vary_name=False)
def check_distill(settings: Dict) -> None:
    """Checks distillation weights and the variance guard."""
    distill = settings["distill"]
    for key in ("lambda_sd", "lambda_cd", "lambda_fd"):
        _require(distill[key] >= 0, f"distill.{key} must be non-negative")
        distill[key] = float(distill[key])
    _require(distill["epsilon"] > 0, "distill.epsilon must be positive")
    distill["epsilon"] = float(distill["epsilon"])


@register_settings_check(vary_name=False)
def check_train(settings: Dict) -> None:
    """Checks the training loop settings and the ablation variant."""
    from ckdtrack.registration import lookup
    from ckdtrack.variants import VARIANTS

    train = settings["train"]
    lookup(VARIANTS, train["variant"], "variant")
    train["variant"] = str(train["variant"]).lower()
    _require(0 <= train["mask_ratio"] < 1, "train.mask_ratio must be in [0, 1)")
    for key in ("steps", "batch_size", "max_gap", "log_every"):
        _require(
            isinstance(train[key], int) and train[key] > 0,
            f"train.{key} must be a positive integer",
        )
    for key in ("lr_backbone", "lr_head"):
        _require(train[key] > 0, f"train.{key} must be positive")
    for key in ("mask_ratio", "lr_backbone", "lr_head", "weight_decay"):
        train[key] = float(train[key])
    for key in ("center_jitter", "scale_jitter", "weight_decay"):
        _require(train[key] >= 0, f"train.{key} must be non-negative")
        train[key] = float(train[key])


@register_settings_check(vary_name=False)
def check_data(settings: Dict) -> None:
    """Checks the data settings."""
    from ckdtrack.registration import lookup
    from ckdtrack.sequences import STYLE_PRESETS

    data = settings["data"]
    if data["synthetic"]:
        lookup(STYLE_PRESETS, data["style"], "style preset")
        for key in ("train_sequences", "test_sequences"):
            _require(data[key] >= 1, f"data.{key} must be at least 1")
        _require(data["length"] >= 2, "data.length must be at least 2")
    _require(isinstance(settings["seed"], int), "seed must be an integer")


def resolved_snapshot(config: RunConfig) -> Text:
    """TOML text of the resolved settings."""
    from toml import dumps

    return dumps(config.to_dict())
