"""Test realistic scenarios, which are slower."""

import numpy as np
import pytest

import federated_split_manager as fsm


experiment = {
    "vocab_size": 200,
    "encoder_layers": 4,
    "num_clients": 3,
    "rounds": 10,
    "local_epochs": 3,
    "batch_size": 16,
    "eta": 0.1,
    "samples_per_client": 600,
    "keyword_strength": 0.8,
    "label_scheme": "other",
}

_runs = {}


def run(tmp_path_factory, seed, critical_layer, **kwargs):
    key = (seed, critical_layer, tuple(sorted(kwargs.items())))
    if key not in _runs:
        out = tmp_path_factory.mktemp(f"seed{seed}-c{critical_layer}")
        cfg = fsm.load_config(
            experiment, seed=seed, critical_layer=critical_layer, output_dir=str(out), **kwargs
        )
        _runs[key] = fsm.run_experiment(cfg)
    return _runs[key]


def final_accuracy(result):
    return result.final_averages()[0]


@pytest.mark.slow
def test_split_beats_fedavg_on_skewed_labels(tmp_path_factory):
    """Interior split against FedAvg and isolated clients."""

    interior_best = 0
    for seed in range(3):
        isolated, split, fedavg = (
            final_accuracy(run(tmp_path_factory, seed, c)) for c in (0, 2, 4)
        )
        assert split > fedavg
        if split >= max(isolated, fedavg):
            interior_best += 1
    assert interior_best >= 2


@pytest.mark.slow
def test_quantized_training_keeps_accuracy(tmp_path_factory):
    for seed in range(3):
        plain = final_accuracy(run(tmp_path_factory, seed, 2))
        quantized = final_accuracy(run(tmp_path_factory, seed, 2, quantize=True))
        assert abs(plain - quantized) <= 0.02


@pytest.mark.slow
def test_rerun_is_byte_identical(tmp_path_factory):
    first = run(tmp_path_factory, 0, 2)
    again = run(tmp_path_factory, 0, 2, workers=3)
    for name in ("metrics.csv", "ledger.csv", "summary.csv"):
        assert (first.output_dir / name).read_bytes() == (again.output_dir / name).read_bytes()
    for client_id, params in first.client_params.items():
        assert params.equals(again.client_params[client_id])


@pytest.mark.slow
def test_isolated_clients_exchange_nothing(tmp_path_factory):
    result = run(tmp_path_factory, 0, 0)
    assert result.totals["bytes"] == 0 and result.totals["data_bytes"] == 0


@pytest.mark.slow
def test_regression_task(tmp_path_factory):
    """Score-sorted shards, Pearson as the test metric."""

    out = tmp_path_factory.mktemp("regression")
    cfg = fsm.load_config(
        {**experiment, "label_scheme": "sorted", "rounds": 3},
        task="regression",
        eta=0.01,
        output_dir=str(out),
    )
    result = fsm.run_experiment(cfg)
    assert np.isfinite(result.summary.mean_train_loss).all()
    assert set(result.final_metrics[0]) == {"test_metric", "pearson", "mse"}
