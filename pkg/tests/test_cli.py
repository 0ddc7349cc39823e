"""Test CLI methods."""

import json
import os
import sys

import pandas as pd
import pytest

import federated_split_manager as fsm

from federated_split_manager.cli import convert, main, parse_vary


small = {
    "model.vocab_size": 40,
    "model.seq_len": 8,
    "model.hidden": 8,
    "model.heads": 2,
    "model.encoder_layers": 2,
    "model.ff_mult": 2,
    "model.critical_layer": 1,
    "federation.rounds": 2,
    "federation.local_epochs": 1,
    "federation.batch_size": 8,
    "federation.eta": 0.1,
    "data.samples_per_client": 40,
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({**small, "output.output_dir": str(tmp_path / "out")}))
    return path


def test_convert():
    assert convert("3") == 3
    assert convert("-0.5") == -0.5
    assert convert("None") is None
    assert convert("True") is True
    assert convert("fedavg") == "fedavg"
    assert convert("[[80,20],[50,50]]") == [[80, 20], [50, 50]]
    assert parse_vary("c=0,2,4") == ("c", [0, 2, 4])


def test_setup():
    """Test CLI setup without training."""
    ret_value = os.system(f"{sys.executable} -m federated_split_manager.cli run missing.json --dry-run")
    # missing config file is an i/o error
    assert os.WEXITSTATUS(ret_value) == 4


def test_dry_run(config, capsys):
    assert main(["run", str(config), "critical_layer=2", "--dry-run"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["critical_layer"] == 2
    assert printed["eta"] == 0.1
    assert not (config.parent / "out").exists()


def test_run_and_inspect(config, capsys):
    assert main(["run", str(config), "quantize=True"]) == 0
    out = config.parent / "out"
    assert (out / "run.log").read_text().count("round ") >= 2
    assert len(pd.read_csv(out / "ledger.csv")) == 6
    capsys.readouterr()

    assert main(["inspect", str(out / "checkpoints" / "client_01.fsbc")]) == 0
    printed = capsys.readouterr().out
    assert "emb.tok\t(40, 8)\tfloat32" in printed


def test_partition(config, capsys):
    assert main(["partition", str(config)]) == 0
    assert "class_0_test" in capsys.readouterr().out


def test_gradcheck(config):
    assert main(["gradcheck", str(config), "--probes", "20"]) == 0
    assert main(["gradcheck", str(config), "--probes", "5", "--threshold=-1"]) == 1


def test_sweep(config, capsys):
    assert main(["sweep", str(config), "rounds=1", "--vary", "c=0,1"]) == 0
    frame = pd.read_csv(config.parent / "out" / "sweep.csv")
    assert frame["value"].tolist() == [0, 1]


def test_exit_codes(config, tmp_path):
    assert main(["run", str(config), "critical_layer=7"]) == 2
    assert main(["run", str(config), "no_such_key=1"]) == 2
    assert main(["run", str(config), "eta=1e30"]) == 3
    assert main(["run", str(tmp_path / "missing.json")]) == 4

    bad = tmp_path / "bad.fsbc"
    bad.write_bytes(b"nope")
    assert main(["inspect", str(bad)]) == 4

    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 2


def test_plot(config):
    pytest.importorskip("matplotlib")
    assert main(["run", str(config)]) == 0
    assert main(["plot", str(config.parent / "out")]) == 0
    assert (config.parent / "out" / "summary.png").exists()
