from logging import getLogger
from typing import Callable, MutableMapping, Text

from ckdtrack.registration import registrator

SETTINGS_CHECKS_SIGNATURE = Callable[[dict], None]
"""settings checks signature."""

SETTINGS_CHECKS: MutableMapping[Text, SETTINGS_CHECKS_SIGNATURE] = {}
"""Dictionary of settings checks."""


@registrator(registry=SETTINGS_CHECKS, loglevel="debug")
def register_settings_check(function: SETTINGS_CHECKS_SIGNATURE):
    """Decorator to register a function as a settings check.

    Checks receive the merged settings dictionary. They raise
    :py:class:`~ckdtrack.readers.toml.IncorrectSettings` when something is wrong, and
    may normalize values in place (e.g. upper-casing the log level).
    """
    from functools import wraps

    @wraps(function)
    def decorated(settings) -> None:
        result = function(settings)
        getLogger(__name__).debug(f" {function.__name__} PASSED")
        return result

    return decorated
