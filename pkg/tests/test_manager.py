"""Test manager use in library, the default approach."""

import json
import unittest

from unittest import mock

import numpy as np
import pandas as pd
import pytest

import federated_split_manager as fsm

from federated_split_manager.exceptions import ConfigError


small = dict(
    vocab_size=40,
    seq_len=8,
    hidden=8,
    heads=2,
    encoder_layers=2,
    ff_mult=2,
    critical_layer=1,
    rounds=2,
    local_epochs=1,
    batch_size=8,
    eta=0.1,
    samples_per_client=40,
)


def test_keyword_parameters():
    """Make sure unknown parameters are not input."""

    with pytest.raises(KeyError):
        fsm.SplitTransformerModel(incorrect_key="test")


def test_range_checks():
    with pytest.raises(ConfigError):
        fsm.SplitTransformerModel(critical_layer=5)

    with pytest.raises(ConfigError):
        fsm.SplitTransformerModel(fedprox_lambda=-1.0)

    with pytest.raises(ConfigError):
        fsm.SplitTransformerModel(aggregator="fedsgd")

    with pytest.raises(ConfigError):
        fsm.SplitTransformerModel(hidden=30, heads=4)

    with pytest.raises(ConfigError):
        fsm.SplitTransformerModel(num_clients=2, clients_per_round=3)

    m = fsm.SplitTransformerModel()
    with pytest.raises(ConfigError):
        m.critical_layer = 6
    with pytest.raises(ConfigError):
        m.rounds = "ten"


def test_regression_sets_num_classes():
    m = fsm.SplitTransformerModel(task="regression", num_classes=4)
    assert m.num_classes == 1
    assert m.show_config(key="num_classes")["value"] == 1

    with pytest.raises(ConfigError):
        fsm.SplitTransformerModel(num_classes=1)


def test_scheme_checked_when_resolved():
    m = fsm.SplitTransformerModel(num_clients=10)
    with pytest.raises(ConfigError):
        m.experiment_config()
    m.label_scheme = "binary10"
    assert m.experiment_config().scheme.shape == (10, 2)


def test_log_level():
    m = fsm.SplitTransformerModel(log="high")
    assert m.logger.level == 0
    m.log = "low"
    assert m.logger.level == 20

    with pytest.raises(ConfigError):
        fsm.SplitTransformerModel(log="loud")


def test_partition():
    m = fsm.SplitTransformerModel(**small)
    table = m.partition()
    assert list(table.index) == [0, 1, 2]
    assert table.loc[0, "class_0"] == 26 and table.loc[0, "class_0_test"] == 6
    assert (table["size"] + table["size_test"]).tolist() == [40, 40, 40]


def test_gradcheck():
    m = fsm.SplitTransformerModel(**small)
    assert m.gradcheck(probes=50) < 1e-5


class TestOutputDir(unittest.TestCase):
    """Output directory resolution."""

    def test_explicit(self):
        m = fsm.SplitTransformerModel(output_dir="somewhere")
        self.assertEqual(m.resolved_output_dir, "somewhere")

    @mock.patch.dict("os.environ", {"FSB_OUT_DIR": "from-env"})
    def test_environment(self):
        m = fsm.SplitTransformerModel()
        self.assertEqual(m.resolved_output_dir, "from-env")
        self.assertEqual(m.experiment_config().output_dir, "from-env")

    @mock.patch.dict("os.environ", {}, clear=True)
    def test_default(self):
        m = fsm.SplitTransformerModel()
        self.assertEqual(m.resolved_output_dir, "fsm-output")


def test_run(tmp_path):
    m = fsm.SplitTransformerModel(**small, output_dir=str(tmp_path))
    run = m.run()
    assert m.has_run

    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [
        "checkpoints",
        "final.csv",
        "ledger.csv",
        "metrics.csv",
        "resolved_config.json",
        "summary.csv",
    ]
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == [
        "client_00.fsbc",
        "client_01.fsbc",
        "client_02.fsbc",
    ]

    resolved = json.loads((tmp_path / "resolved_config.json").read_text())
    assert resolved["critical_layer"] == 1
    assert resolved["output_dir"] == str(tmp_path)

    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert len(metrics) == 2 * 3
    ledger = pd.read_csv(tmp_path / "ledger.csv")
    assert ledger.cumulative_bytes.iloc[-1] == run.totals["bytes"]

    checkpoint = fsm.load_checkpoint(tmp_path / "checkpoints" / "client_00.fsbc")
    assert checkpoint.equals(run.client_params[0])
    assert np.isfinite(run.final_averages()[0])


def test_failed_run_cleans_up(tmp_path):
    m = fsm.SplitTransformerModel(**small, output_dir=str(tmp_path / "run"))
    m.eta = 1e30
    with pytest.raises(fsm.DivergenceError):
        m.run()
    assert list((tmp_path / "run").iterdir()) == []


def test_sweep(tmp_path):
    frame = fsm.sweep(
        {**small, "output_dir": str(tmp_path), "target_metric": 0.0}, "c", [0, 2], rounds=1
    )
    assert frame["value"].tolist() == [0, 2]
    assert frame["total_bytes"].iloc[0] == 0
    assert frame["total_bytes"].iloc[1] > 0
    assert frame["rounds_to_target"].tolist() == [0, 0]
    assert frame["communication_gain"].tolist() == [1.0, 0.0]
    assert (tmp_path / "sweep.csv").exists()
    assert (tmp_path / "critical_layer-2" / "summary.csv").exists()


def test_run_64_bit(tmp_path):
    m = fsm.SplitTransformerModel(**small, precision=64, output_dir=str(tmp_path))
    run = m.run()
    assert run.client_params[0]["emb.tok"].dtype == np.float64
    checkpoint = fsm.load_checkpoint(tmp_path / "checkpoints" / "client_00.fsbc")
    assert checkpoint.equals(run.client_params[0].astype(np.float32))


def test_sweep_checks_every_value_first(tmp_path):
    with pytest.raises(ConfigError):
        fsm.sweep({**small, "output_dir": str(tmp_path)}, "c", [0, 2, 6], rounds=1)
    assert list(tmp_path.iterdir()) == []
