"""Contains logic for configuring federated split training runs."""

import copy
import json
import logging
import os
import pathlib

from typing import Optional, Union

import numpy as np

from .cli import is_None
from .exceptions import ConfigError, UnknownParameterError


DEFAULT_OUTPUT_DIR = "fsm-output"
OUTPUT_DIR_ENV = "FSB_OUT_DIR"

# Read FSM configuration information

loc = pathlib.Path(__file__).parent / pathlib.Path("the_manager_config.json")
with open(loc, "r") as f:
    # Load the JSON file into a Python object
    config_fsm = json.load(f)

# convert "None"s to Nones
for key in config_fsm.keys():
    if is_None(config_fsm[key]["default"]):
        config_fsm[key]["default"] = None


def check_value(name: str, value, spec: dict):
    """Validate ``value`` against one schema entry and return it in canonical type.

    Raises
    ------
    ConfigError
        Naming ``name`` and the violated constraint.
    """
    if value is None:
        return None
    kind = spec.get("type")
    if kind == "int":
        if isinstance(value, (float, np.floating)) and float(value).is_integer():
            value = int(value)
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigError(name, f"must be an integer, got {value!r}")
        value = int(value)
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
            raise ConfigError(name, f"must be a number, got {value!r}")
        value = float(value)
    elif kind == "bool":
        if not isinstance(value, (bool, np.bool_)):
            raise ConfigError(name, f"must be True or False, got {value!r}")
        value = bool(value)
    elif kind == "str":
        if not isinstance(value, (str, pathlib.Path)):
            raise ConfigError(name, f"must be a string, got {value!r}")
        value = str(value)
    elif kind == "enum":
        if value not in spec["enum"]:
            raise ConfigError(name, f"must be one of {spec['enum']}, got {value!r}")
    if "min" in spec and value < spec["min"]:
        raise ConfigError(name, f"must be >= {spec['min']}, got {value}")
    if "max" in spec and value > spec["max"]:
        raise ConfigError(name, f"must be <= {spec['max']}, got {value}")
    return value


class FederatedSplitManager:
    """Manager class that controls a federated split training run.

    Parameters
    ----------
    model : str
        Name of the model family to train. Only option currently is "transformer".
    num_clients : int, optional
        Number of clients K, by default 3.
    clients_per_round : Optional[int], optional
        Clients sampled each round. None (default) selects every client every round,
        which is the usual setting for this kind of experiment.
    rounds : int, optional
        Number of communication rounds, by default 10.
    local_epochs : int, optional
        Local passes over the shard per round, by default 3.
    batch_size : int, optional
        Local mini-batch size, by default 16.
    eta : float, optional
        Client learning rate, by default 3e-5. This is a fine-tuning rate; randomly
        initialized desk-scale models want something like 0.1.
    aggregator : str, optional
        "fedavg" (default), "fedprox" or "fedadam".
    fedprox_lambda : float, optional
        Proximal weight for "fedprox", by default 0 (identical to "fedavg").
    server_lr, server_beta1, server_beta2, server_eps : float, optional
        Server Adam hyperparameters for "fedadam": 0.1, 0.9, 0.99 and 1e-3.
    quantize : bool, optional
        Exchange the global part as 16-bit floats, by default False.
    strict_f16_accumulation : bool, optional
        Accumulate the quantized server average in 16-bit arithmetic, by default False.
    seed : int, optional
        Seed for everything random in the run, by default 0.
    workers : int, optional
        Threads for client updates, by default 1.
    precision : int, optional
        32 (default) or 64-bit training arithmetic.
    task : str, optional
        "classification" (default) or "regression".
    num_classes : int, optional
        Number of classes, by default 2. Set to 1 automatically for regression.
    samples_per_client : int, optional
        Shard size before the train/test split, by default 600.
    keyword_strength : float, optional
        Keyword planting probability of the classification task, by default 0.8.
    label_scheme : str or list, optional
        Per-client class fractions, by default "other" (80/20, 50/50, 20/80).
    train_fraction : float, optional
        Training share of each shard, by default 0.8.
    output_dir : Optional[str], optional
        Run directory. None falls back to $FSB_OUT_DIR and then "fsm-output".
    target_metric : Optional[float], optional
        Metric level at which communication cost is reported, by default None.
    write_checkpoints : bool, optional
        Write final per-client checkpoints, by default True.

    Notes
    -----
    Cross-parameter checks that involve the label scheme are made when the run is
    resolved (:meth:`experiment_config`) so parameters can be changed in any order.
    """

    logger: logging.Logger
    config_fsm: dict
    config_model: Optional[dict] = None
    num_clients: int
    clients_per_round: Optional[int]
    task: str
    num_classes: int
    label_scheme: Union[str, list]
    output_dir: Optional[str]

    def __init__(
        self,
        model: str,
        num_clients: int = config_fsm["num_clients"]["default"],
        clients_per_round: Optional[int] = config_fsm["clients_per_round"]["default"],
        rounds: int = config_fsm["rounds"]["default"],
        local_epochs: int = config_fsm["local_epochs"]["default"],
        batch_size: int = config_fsm["batch_size"]["default"],
        eta: float = config_fsm["eta"]["default"],
        aggregator: str = config_fsm["aggregator"]["default"],
        fedprox_lambda: float = config_fsm["fedprox_lambda"]["default"],
        server_lr: float = config_fsm["server_lr"]["default"],
        server_beta1: float = config_fsm["server_beta1"]["default"],
        server_beta2: float = config_fsm["server_beta2"]["default"],
        server_eps: float = config_fsm["server_eps"]["default"],
        quantize: bool = config_fsm["quantize"]["default"],
        strict_f16_accumulation: bool = config_fsm["strict_f16_accumulation"]["default"],
        seed: int = config_fsm["seed"]["default"],
        workers: int = config_fsm["workers"]["default"],
        precision: int = config_fsm["precision"]["default"],
        # data inputs
        task: str = config_fsm["task"]["default"],
        num_classes: int = config_fsm["num_classes"]["default"],
        samples_per_client: int = config_fsm["samples_per_client"]["default"],
        keyword_strength: float = config_fsm["keyword_strength"]["default"],
        label_scheme: Union[str, list] = config_fsm["label_scheme"]["default"],
        train_fraction: float = config_fsm["train_fraction"]["default"],
        # output inputs
        output_dir: Optional[str] = config_fsm["output_dir"]["default"],
        target_metric: Optional[float] = config_fsm["target_metric"]["default"],
        write_checkpoints: bool = config_fsm["write_checkpoints"]["default"],
        **kw,
    ) -> None:
        """Inputs necessary for any federated split run."""

        # get all named parameters input to FederatedSplitManager class
        from inspect import signature

        sig = signature(FederatedSplitManager)

        # each manager edits its own copy of the schema
        self.__dict__["config_fsm"] = copy.deepcopy(config_fsm)
        if "logger" not in self.__dict__:
            self.__dict__["logger"] = logging.getLogger("federated_split_manager")

        # initialize all class attributes to None without triggering the __setattr__ method
        # which does a bunch more stuff
        for key in sig.parameters.keys():
            if key != "kw":
                self.__dict__[key] = None

        # mode flags
        self.__dict__["has_run"] = False

        # Set all attributes which will trigger some checks and changes in __setattr__
        # these will also update "value" in the config dict
        for key in sig.parameters.keys():
            # no need to run through for init if value is None (already set to None)
            if key != "kw" and locals()[key] is not None:
                self.__setattr__(key, locals()[key])

        self.__dict__["kw"] = kw

    def __setattr_model__(self, name: str, value) -> None:
        """Implement this in model class to add specific __setattr__ there too."""
        pass

    def __setattr__(self, name: str, value) -> None:
        """Implement my own __setattr__ to validate and enforce subsequent actions."""

        config = self._all_config()
        if name in config:
            value = check_value(name, value, config[name])
            if name == "label_scheme" and value is not None:
                value = self._check_scheme(value)

        # create/update class attribute
        self.__dict__[name] = value

        # create/update "value" keyword in config to keep it up to date
        if name in self.config_fsm.keys():
            self.config_fsm[name]["value"] = value

        # create/update "value" keyword in model config to keep it up to date
        if self.config_model is not None:  # can't run this until init in model class
            self.__setattr_model__(name, value)

        # None of the following checks occur if value is None
        if value is not None:

            if name in ["num_clients", "clients_per_round"]:
                if (
                    self.num_clients is not None
                    and self.clients_per_round is not None
                    and self.clients_per_round > self.num_clients
                ):
                    raise ConfigError(
                        "clients_per_round",
                        f"{self.clients_per_round} exceeds num_clients={self.num_clients}",
                    )

            if name == "task" and value == "regression":
                if self.num_classes not in (None, 1):
                    self.logger.info("task is regression so setting num_classes to 1.")
                self.__dict__["num_classes"] = 1
                self.config_fsm["num_classes"]["value"] = 1

            if name == "num_classes" and self.task == "regression" and value != 1:
                self.logger.info("num_classes must be 1 because task is regression. Setting to 1.")
                self.__dict__["num_classes"] = 1
                self.config_fsm["num_classes"]["value"] = 1

            if name in ["task", "num_classes"]:
                if self.task == "classification" and self.num_classes == 1:
                    raise ConfigError(
                        "num_classes", "classification needs at least 2 classes"
                    )

    @staticmethod
    def _check_scheme(value):
        if isinstance(value, str):
            return value
        if isinstance(value, (list, tuple)) and all(isinstance(r, (list, tuple)) for r in value):
            return [[float(x) for x in row] for row in value]
        raise ConfigError("label_scheme", f"must be a scheme name or a list of rows, got {value!r}")

    @property
    def resolved_output_dir(self) -> str:
        """output_dir, else $FSB_OUT_DIR, else the default run directory."""
        if self.output_dir is not None:
            return self.output_dir
        return os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR

    def experiment_config(self):
        """Resolve and cross-check every parameter into an ExperimentConfig."""
        from .experiment import DataConfig, ExperimentConfig
        from .federation import FedConfig

        if self.clients_per_round is None:
            self.logger.info("clients_per_round is None so using all clients every round.")

        federation = FedConfig(
            num_clients=self.num_clients,
            clients_per_round=self.clients_per_round,
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            eta=self.eta,
            aggregator=self.aggregator,
            fedprox_lambda=self.fedprox_lambda,
            server_lr=self.server_lr,
            server_beta1=self.server_beta1,
            server_beta2=self.server_beta2,
            server_eps=self.server_eps,
            quantize=self.quantize,
            strict_f16_accumulation=self.strict_f16_accumulation,
            seed=self.seed,
            workers=self.workers,
        )
        data = DataConfig(
            task=self.task,
            num_classes=self.num_classes,
            samples_per_client=self.samples_per_client,
            keyword_strength=self.keyword_strength,
            label_scheme=self.label_scheme,
            train_fraction=self.train_fraction,
        )
        return ExperimentConfig(
            model=self.run_model_config(),
            federation=federation,
            data=data,
            critical_layer=self.critical_layer,
            head_global=self.head_global,
            output_dir=self.resolved_output_dir,
            precision=self.precision,
            target_metric=self.target_metric,
            write_checkpoints=self.write_checkpoints,
            params=self.resolved_config(),
        )

    def run(self):
        """Train and write every output of the run."""
        from .experiment import run_experiment

        result = run_experiment(self.experiment_config())
        self.has_run = True
        return result

    def gradcheck(self, probes: int = 200, threshold: float = 1e-5) -> float:
        """Worst finite-difference relative error of the configured model."""
        return self.run_gradcheck(probes=probes, threshold=threshold)

    def partition(self):
        """Shard summary (sizes and class histograms) without training."""
        from .data import shard_summary
        from .experiment import build_client_data

        shards = build_client_data(self.experiment_config())
        return shard_summary([train for train, _ in shards]).join(
            shard_summary([test for _, test in shards]), rsuffix="_test"
        )

    def run_model_config(self):
        """define in child class"""
        pass

    def run_gradcheck(self, **kwargs):
        """define in child class"""
        pass

    def _all_config(self) -> dict:
        config = dict(self.config_fsm)
        if self.config_model is not None:
            config.update(self.config_model)
        return config

    def resolved_config(self) -> dict:
        """Current value of every parameter, output directory resolved."""
        values = {key: getattr(self, key) for key in sorted(self._all_config())}
        values["output_dir"] = self.resolved_output_dir
        return values

    def show_config(
        self,
        key: Optional[str] = None,
        prefix: str = "",
        fsm_level=None,
        section: Optional[str] = None,
    ) -> dict:
        """Show parameter configuration across both model and manager.

        Parameters
        ----------
        key : str, optional
            If input, show configuration for just that key.
        prefix : str, optional
            Only parameters whose name starts with this.
        fsm_level : int, list, optional
            Limit search by level:

            * Surface to user = 1
            * Medium surface to user = 2
            * Surface but bury = 3

            e.g. 1, [1,2], [1,2,3].
        section : str, optional
            "federation", "data", "output" or "model".
        """
        config = self._all_config()
        if key is not None:
            if key not in config:
                raise UnknownParameterError(key, "unknown parameter")
            return config[key]

        if not isinstance(fsm_level, list) and fsm_level is not None:
            fsm_level = [fsm_level]
        return {
            k: v
            for k, v in config.items()
            if k.startswith(prefix)
            and (fsm_level is None or v.get("fsm_level") in fsm_level)
            and (section is None or v.get("section") == section)
        }
