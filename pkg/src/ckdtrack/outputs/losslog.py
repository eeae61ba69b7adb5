"""Per-step log of the training losses.

Every training step publishes its loss breakdown on a pubsub topic. A
:py:class:`LossLog` listens to that topic while it is active:

.. code-block:: python

    with LossLog() as log:
        trainer.fit(sequences)
    log.save("Results/losses.csv")
"""
__all__ = ["LossLog", "LOSS_COLUMNS"]

from pathlib import Path
from typing import Dict, List, Text, Union

import pandas as pd

LOSS_COLUMNS = ("step", "task", "cd", "sd", "fd", "total")
"""Columns of the loss log, in order."""


class LossLog:
    """Accumulates one row per training step."""

    def __init__(self):
        self.rows: List[Dict[Text, float]] = []
        self._listening = False

    def __call__(self, breakdown) -> None:
        self.rows.append(breakdown.to_dict())

    def __enter__(self) -> "LossLog":
        from pubsub import pub

        from ckdtrack.train import LOSS_TOPIC

        pub.subscribe(self, LOSS_TOPIC)
        self._listening = True
        return self

    def __exit__(self, *args) -> None:
        from pubsub import pub

        from ckdtrack.train import LOSS_TOPIC

        if self._listening:
            pub.unsubscribe(self, LOSS_TOPIC)
            self._listening = False

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(LOSS_COLUMNS))

    def save(self, filename: Union[Text, Path], overwrite: bool = False) -> Path:
        """Writes the log with the ``csv`` sink."""
        from ckdtrack.outputs.sinks import OUTPUT_SINKS

        return OUTPUT_SINKS["csv"](self.to_dataframe(), filename, overwrite=overwrite)
