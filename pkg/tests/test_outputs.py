"""Test saving outputs to file."""
import numpy as np
import pandas as pd
import xarray as xr
from pytest import approx, fixture, raises


@fixture
def table() -> pd.DataFrame:
    return pd.DataFrame(
        {"variant": ["baseline", "ckd"], "pr": [0.25, 0.5], "sr": [0.125, 1 / 3]}
    )


def test_csv_sink(table, tmp_path):
    from ckdtrack.outputs.sinks import OUTPUT_SINKS

    path = OUTPUT_SINKS["csv"](table, tmp_path / "results" / "ablation")
    assert path == tmp_path / "results" / "ablation.csv"
    saved = pd.read_csv(path)
    assert list(saved.columns) == ["variant", "pr", "sr"]
    assert saved.sr.values == approx(table.sr.values, rel=1e-10)


def test_csv_sink_of_xarray(tmp_path):
    from ckdtrack.outputs.sinks import OUTPUT_SINKS

    data = xr.DataArray(
        np.arange(6.0).reshape(2, 3),
        coords={"sequence": ["a", "b"], "threshold": [0, 0.5, 1]},
        dims=("sequence", "threshold"),
        name="curve",
    )
    saved = pd.read_csv(OUTPUT_SINKS["csv"](data, tmp_path / "curve.csv"))
    assert list(saved.columns) == ["sequence", "threshold", "curve"]
    assert len(saved) == 6


def test_json_sink(table, tmp_path):
    from json import loads

    from ckdtrack.outputs.sinks import OUTPUT_SINKS

    path = OUTPUT_SINKS["json"]({"aggregate": {"pr": 0.5}}, tmp_path / "metrics")
    assert path.suffix == ".json"
    assert loads(path.read_text()) == {"aggregate": {"pr": 0.5}}

    records = OUTPUT_SINKS["json"](table, tmp_path / "table.json")
    assert loads(records.read_text())[1]["variant"] == "ckd"


def test_overwrite(table, tmp_path):
    from ckdtrack.outputs.sinks import OUTPUT_SINKS

    path = tmp_path / "stuff.csv"
    OUTPUT_SINKS["csv"](table, path)

    # default is to never overwrite
    with raises(IOError, match="already exists"):
        OUTPUT_SINKS["csv"](table.head(1), path)
    assert len(pd.read_csv(path)) == 2

    OUTPUT_SINKS["csv"](table.head(1), path, overwrite=True)
    assert len(pd.read_csv(path)) == 1


def test_factory():
    from ckdtrack.errors import ConfigurationError
    from ckdtrack.outputs.sinks import OUTPUT_SINKS, factory

    assert factory("gap_report.csv") is OUTPUT_SINKS["csv"]
    assert factory("JSON") is OUTPUT_SINKS["json"]
    with raises(ConfigurationError, match="output sink"):
        factory("model.pt")


def breakdown(step: int):
    from ckdtrack.train import LossBreakdown

    return LossBreakdown(step=step, task=1.0, cd=0.5, sd=0.25, fd=0.0, total=2.0)


def test_loss_log_listens_only_while_active():
    from pubsub import pub

    from ckdtrack.outputs.losslog import LossLog
    from ckdtrack.train import LOSS_TOPIC

    pub.sendMessage(LOSS_TOPIC, breakdown=breakdown(0))
    with LossLog() as log:
        pub.sendMessage(LOSS_TOPIC, breakdown=breakdown(1))
        pub.sendMessage(LOSS_TOPIC, breakdown=breakdown(2))
    pub.sendMessage(LOSS_TOPIC, breakdown=breakdown(3))
    assert [row["step"] for row in log.rows] == [1, 2]


def test_loss_log_save(tmp_path):
    from pubsub import pub

    from ckdtrack.outputs.losslog import LOSS_COLUMNS, LossLog
    from ckdtrack.train import LOSS_TOPIC

    with LossLog() as log:
        pub.sendMessage(LOSS_TOPIC, breakdown=breakdown(0))
    path = log.save(tmp_path / "losses.csv")
    saved = pd.read_csv(path)
    assert tuple(saved.columns) == LOSS_COLUMNS
    assert saved.iloc[0].to_dict() == approx(breakdown(0).to_dict())
    with raises(IOError):
        log.save(tmp_path / "losses.csv")


def test_loss_log_during_training(run_config):
    from ckdtrack.outputs.losslog import LossLog
    from ckdtrack.readers import read_sequences
    from ckdtrack.train import Trainer

    with LossLog() as log:
        history = Trainer(run_config).fit(read_sequences(run_config), steps=2)
    assert log.rows == [b.to_dict() for b in history]
