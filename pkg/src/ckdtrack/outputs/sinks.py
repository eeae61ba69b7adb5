"""Sinks where results are stored.

Sinks take as argument the data to save (a pandas frame, an xarray object or a plain
mapping) and a destination. They return the path of the file written.

The signature of a sink is:

.. code-block:: python

    @register_output_sink(name="json")
    def to_json(quantity: Mapping, filename: Path, **params) -> None:
        pass
"""
__all__ = ["OUTPUT_SINKS", "register_output_sink", "sink_to_file", "factory"]

from pathlib import Path
from typing import Any, Callable, Mapping, MutableMapping, Text, Union

import pandas as pd
import xarray as xr
from mypy_extensions import KwArg

from ckdtrack.registration import registrator

QUANTITY = Union[pd.DataFrame, xr.DataArray, xr.Dataset, Mapping]

OUTPUT_SINK_SIGNATURE = Callable[[QUANTITY, Union[Text, Path], KwArg(Any)], Path]
"""Signature of functions used to save results."""

OUTPUT_SINKS: MutableMapping[Text, OUTPUT_SINK_SIGNATURE] = {}
"""Stores results somewhere."""


def factory(name: Text) -> OUTPUT_SINK_SIGNATURE:
    """Sink registered under ``name``, or under the suffix of a file name.

    >>> from ckdtrack.outputs.sinks import factory
    >>> factory("report.json").__name__
    'to_json'
    """
    from ckdtrack.registration import lookup

    suffix = Path(name).suffix
    return lookup(OUTPUT_SINKS, suffix[1:] if suffix else name, "output sink")


@registrator(registry=OUTPUT_SINKS, loglevel=None)
def register_output_sink(function: OUTPUT_SINK_SIGNATURE) -> Callable:
    """Registers a function to save results."""
    return function


def sink_to_file(suffix: Text):
    """Simplifies sinks to files.

    The decorator takes care of the suffix of the file, of creating the parent
    directories, and of not overwriting existing files unless ``overwrite=True``. The
    decorated function returns the path to the output file.
    """
    from functools import wraps
    from logging import getLogger

    def decorator(function: Callable[[QUANTITY, Path], None]):
        @wraps(function)
        def decorated(
            quantity: QUANTITY, filename: Union[Text, Path], **params
        ) -> Path:
            overwrite = params.pop("overwrite", False)
            path = Path(filename)
            if path.suffix == "":
                path = path.with_suffix(suffix)
            if path.exists():
                if overwrite:
                    path.unlink()
                else:
                    msg = (
                        f"File {path} already exists and overwrite argument has "
                        "not been given."
                    )
                    getLogger(function.__module__).critical(msg)
                    raise IOError(msg)

            path.parent.mkdir(parents=True, exist_ok=True)
            function(quantity, path, **params)  # type: ignore
            getLogger(function.__module__).info(f"Wrote {path}")
            return path

        return decorated

    return decorator


@register_output_sink(name="csv")
@sink_to_file(".csv")
def to_csv(quantity: QUANTITY, filename: Path, **params) -> None:
    """Saves tabular data to csv format, using pandas.to_csv.

    Arguments:
        quantity: The data to be saved
        filename: File to which the data should be saved
        params: Any argument to `pandas.DataFrame.to_csv`
    """
    params.setdefault("float_format", "%.11g")
    params.setdefault("index", False)
    if isinstance(quantity, (xr.DataArray, xr.Dataset)):
        quantity = quantity.to_dataframe().reset_index()
    elif isinstance(quantity, Mapping):
        quantity = pd.DataFrame(quantity)
    quantity.to_csv(filename, **params)


@register_output_sink(name="json")
@sink_to_file(".json")
def to_json(quantity: QUANTITY, filename: Path, **params) -> None:
    """Saves data to json format.

    xarray objects are written with their ``to_dict`` representation, frames as a
    list of records.

    Arguments:
        quantity: The data to be saved
        filename: File to which the data should be saved
        params: Any argument to `json.dump`
    """
    from json import dump

    params.setdefault("indent", 2)
    if isinstance(quantity, (xr.DataArray, xr.Dataset)):
        quantity = quantity.to_dict(data="list")
    elif isinstance(quantity, pd.DataFrame):
        quantity = quantity.to_dict(orient="records")
    with open(filename, "w") as file:
        dump(quantity, file, **params)
