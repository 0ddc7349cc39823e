"""Config-driven experiments: load a config, build clients, train, write outputs."""

import json
import logging

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .data import (
    LabeledDataset,
    generate_classification_task,
    generate_regression_task,
    label_scheme,
    largest_remainder,
    partition_label_skew,
    partition_sorted,
    split_train_test,
)
from .exceptions import ConfigError, SplitError, UnknownParameterError
from .federation import FedConfig, Federation, RoundRecord
from .metrics import client_averages
from .models.transformer.encoder import ModelConfig, SplitSpec, build_model
from .outputs import (
    CommLedger,
    OutputDirectory,
    communication_gain,
    communication_to_target,
    metrics_frame,
    summary_frame,
)
from .tensor import ParameterSet, precision


logger = logging.getLogger(__name__)

PARAMETER_ALIASES = {"c": "critical_layer"}


@dataclass(frozen=True)
class DataConfig:
    """Synthetic task and client partition."""

    task: str = "classification"
    num_classes: int = 2
    samples_per_client: int = 600
    keyword_strength: float = 0.8
    label_scheme: Union[str, list] = "other"
    train_fraction: float = 0.8


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Everything one run needs, validated.

    ``params`` is the flat parameter echo written to ``resolved_config.json``.
    """

    model: ModelConfig
    federation: FedConfig
    data: DataConfig
    critical_layer: int
    head_global: Optional[bool] = None
    output_dir: str = "fsm-output"
    precision: int = 32
    target_metric: Optional[float] = None
    write_checkpoints: bool = True
    params: Dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.split_spec
        except SplitError as err:
            raise ConfigError("critical_layer", str(err)) from err
        if self.data.task == "regression" and self.model.num_classes != 1:
            raise ConfigError("num_classes", "regression needs a single output")
        if self.data.task == "classification":
            if self.model.num_classes != self.data.num_classes:
                raise ConfigError("num_classes", "model and data disagree")
            self.scheme

    @property
    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.model.encoder_layers, self.critical_layer, self.head_global)

    @property
    def scheme(self) -> np.ndarray:
        """Per-client class fractions, (K, C)."""
        return label_scheme(
            self.data.label_scheme, self.federation.num_clients, self.data.num_classes
        )


@dataclass
class RunResult:
    """In-memory view of what a run wrote."""

    output_dir: Path
    records: List[RoundRecord]
    summary: pd.DataFrame
    totals: Dict[str, int]
    final_metrics: Dict[int, Dict[str, float]]
    sample_counts: Dict[int, int]
    client_params: Dict[int, ParameterSet]

    def final_averages(self) -> Tuple[float, float]:
        """Uniform and sample-weighted mean of the final test metric."""
        return client_averages(
            {c: m["test_metric"] for c, m in self.final_metrics.items()}, self.sample_counts
        )


def _schema() -> dict:
    from .models.transformer.transformer import config_model
    from .the_manager import config_fsm

    return {**config_fsm, **config_model}


def normalize_keys(raw: Mapping) -> dict:
    """Strip section prefixes (``federation.eta`` -> ``eta``) and resolve aliases.

    Raises
    ------
    UnknownParameterError
        For a key no schema knows, or a section that does not match the key.
    """
    schema = _schema()
    params = {}
    for key, value in raw.items():
        section, _, name = str(key).rpartition(".")
        name = PARAMETER_ALIASES.get(name, name)
        if name not in schema:
            raise UnknownParameterError(key, "unknown parameter")
        if section and schema[name].get("section") != section:
            raise UnknownParameterError(
                key, f"{name} belongs to section {schema[name].get('section')!r}"
            )
        if name in params:
            raise ConfigError(key, "given more than once")
        params[name] = value
    return params


def load_manager(config, **overrides):
    """Read a JSON experiment file (or a mapping) into a validated manager.

    See :func:`load_config` for the accepted forms.
    """
    from .models.transformer.transformer import SplitTransformerModel

    if isinstance(config, Mapping):
        raw = dict(config)
    else:
        with open(config, "r") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as err:
                raise ConfigError(str(config), f"not valid JSON: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError(str(config), "must contain one JSON object")
    params = normalize_keys(raw)
    params.update(normalize_keys(overrides))
    if params.pop("model", "transformer") != "transformer":
        raise ConfigError("model", "only 'transformer' is available")
    return SplitTransformerModel(**params)


def load_config(config, **overrides) -> ExperimentConfig:
    """Read a JSON experiment file (or a mapping), apply overrides and validate.

    Parameters
    ----------
    config : str, Path or Mapping
        One JSON object with flat keys, bare (``eta``) or with their section
        (``federation.eta``). Missing keys take their documented defaults.
    overrides
        Keys in the same form, applied on top.

    Raises
    ------
    ConfigError
        Naming the offending field and constraint.
    OSError
        If the file cannot be read.
    """
    return load_manager(config, **overrides).experiment_config()


def build_client_data(cfg: ExperimentConfig) -> List[Tuple[LabeledDataset, LabeledDataset]]:
    """Generate the task and return each client's (train, test) split."""
    data = cfg.data
    num_clients = cfg.federation.num_clients
    size = data.samples_per_client
    seed = cfg.federation.seed

    if data.task == "classification":
        scheme = cfg.scheme
        demand = np.stack([largest_remainder(row, size) for row in scheme]).sum(axis=0)
        # balanced pool holding the most-demanded class in full
        pool = data.num_classes * int(demand.max())
        ds = generate_classification_task(
            cfg.model.vocab_size,
            data.num_classes,
            pool,
            data.keyword_strength,
            seed,
            seq_len=cfg.model.seq_len,
        )
        shards = partition_label_skew(ds, scheme, seed + 1, shard_size=size)
    else:
        ds = generate_regression_task(
            cfg.model.vocab_size, size * num_clients, seed, seq_len=cfg.model.seq_len
        )
        if data.label_scheme == "iid":
            order = np.random.default_rng(seed + 1).permutation(len(ds))
            shards = [ds.subset(np.sort(order[i * size : (i + 1) * size])) for i in range(num_clients)]
        else:
            shards = partition_sorted(ds, num_clients)
    return [
        split_train_test(shard, data.train_fraction, seed=seed + 2 + client_id)
        for client_id, shard in enumerate(shards)
    ]


def final_frame(final_metrics: Mapping, sample_counts: Mapping) -> pd.DataFrame:
    """Final local-test metrics, one row per client."""
    rows = [
        {"client_id": c, "train_samples": sample_counts[c], **final_metrics[c]}
        for c in sorted(final_metrics)
    ]
    return pd.DataFrame(rows)


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Train and write ``resolved_config.json``, ``metrics.csv``, ``ledger.csv``,
    ``summary.csv``, ``final.csv`` and ``checkpoints/client_XX.fsbc``.

    Everything written is removed again if the run fails.
    """
    out = OutputDirectory(cfg.output_dir)
    logger.info(f"writing run outputs to {out.path}")
    try:
        with precision(cfg.precision):
            out.write_text(
                "resolved_config.json",
                json.dumps(cfg.params, indent=2, sort_keys=True, default=str) + "\n",
            )
            params, model = build_model(cfg.model, cfg.federation.seed)
            shards = build_client_data(cfg)
            federation = Federation.from_params(
                model, params, cfg.split_spec, shards, cfg.federation
            )
            logger.info(
                f"{len(federation.global_part)} of {len(params)} tensors are global "
                f"(critical_layer={cfg.critical_layer})"
            )
            result = federation.run_training()

            counts = {c.client_id: c.sample_count for c in federation.clients}
            ledger = CommLedger(result.records)
            summary = summary_frame(result.records, counts)
            out.write_csv("metrics.csv", metrics_frame(result.records))
            out.write_csv("ledger.csv", ledger.frame)
            out.write_csv("summary.csv", summary)
            out.write_csv("final.csv", final_frame(result.final_metrics, counts))
            if cfg.write_checkpoints:
                if cfg.precision == 64:
                    logger.info("checkpoints hold float32 values; 64-bit weights are rounded")
                for client_id, client_params in result.client_params.items():
                    out.write_checkpoint(
                        f"checkpoints/client_{client_id:02d}.fsbc", client_params.astype(np.float32)
                    )
    except BaseException as err:
        logger.error(f"run in {out.path} failed: {err}")
        out.cleanup()
        raise

    run = RunResult(
        out.path,
        result.records,
        summary,
        ledger.totals(),
        result.final_metrics,
        counts,
        result.client_params,
    )
    uniform, weighted = run.final_averages()
    logger.info(
        f"final mean test metric {uniform:.4f} (weighted {weighted:.4f}), "
        f"{run.totals['bytes']} bytes exchanged"
    )
    if cfg.target_metric is not None:
        reached, spent = communication_to_target(summary, cfg.target_metric)
        logger.info(f"target {cfg.target_metric} reached in round {reached} after {spent} bytes")
    return run


def sweep(
    config,
    name: str,
    values: Sequence,
    **overrides,
) -> pd.DataFrame:
    """Run once per value of parameter ``name`` and write ``sweep.csv``.

    Each run goes to ``<output_dir>/<name>-<value>``; ``c`` is accepted for
    ``critical_layer``. Every value is validated before the first run starts. With a
    ``target_metric``, ``communication_gain`` compares each run's bytes to target
    against the run of the first value.
    """
    name = PARAMETER_ALIASES.get(name, name)
    base = load_config(config, **overrides)
    configs = []
    for value in values:
        run_dir = Path(base.output_dir) / f"{name}-{value}"
        configs.append(
            (value, load_config(config, **{**overrides, name: value, "output_dir": str(run_dir)}))
        )

    rows = []
    baseline = None
    for value, cfg in configs:
        run = run_experiment(cfg)
        uniform, weighted = run.final_averages()
        row = {
            "parameter": name,
            "value": value,
            "final_metric_uniform": uniform,
            "final_metric_weighted": weighted,
            "total_bytes": run.totals["bytes"],
        }
        if cfg.target_metric is not None:
            baseline = run.summary if baseline is None else baseline
            reached, spent = communication_to_target(run.summary, cfg.target_metric)
            row["rounds_to_target"] = reached
            row["bytes_to_target"] = spent
            row["communication_gain"] = communication_gain(baseline, run.summary, cfg.target_metric)
        rows.append(row)
    frame = pd.DataFrame(rows)
    OutputDirectory(base.output_dir).write_csv("sweep.csv", frame)
    return frame
