"""Using the split transformer encoder for federated training."""
import json
import logging

from pathlib import Path
from typing import Optional

import numpy as np

from ...cli import is_None
from ...exceptions import ConfigError, UnknownParameterError
from ...tensor import finite_diff_check, precision
from ...the_manager import FederatedSplitManager
from .encoder import ModelConfig, build_model


# Read transformer configuration information
loc = Path(__file__).parent / Path("config.json")
with open(loc, "r") as f:
    # Load the JSON file into a Python object
    config_model = json.load(f)

# convert "None"s to Nones
for key in config_model.keys():
    if "default" in config_model[key] and is_None(config_model[key]["default"]):
        config_model[key]["default"] = None


class SplitTransformerModel(FederatedSplitManager):
    """Federated split training of the mini transformer encoder.

    Defaults all come from the config_model configuration file.

    Parameters
    ----------
    vocab_size : int, optional
        Token vocabulary, pad id included, by default 200.
    seq_len : int, optional
        Padded sequence length, by default 16.
    hidden : int, optional
        Hidden size, by default 32. Must be divisible by ``heads``.
    heads : int, optional
        Attention heads, by default 4.
    encoder_layers : int, optional
        Encoder depth L, by default 4.
    ff_mult : int, optional
        Feed-forward width multiplier, by default 4.
    critical_layer : int, optional
        Split depth c in [0, L], by default 2. Embeddings and layers 1..c are
        averaged by the server; 0 means no communication and L is plain FedAvg.
    head_global : Optional[bool], optional
        Share the head for 0 < c < L. None (default) keeps it local.
    log : str, optional
        Options are "low" and "high" verbosity for log, by default "low"
    """

    logger: logging.Logger
    vocab_size: int
    seq_len: int
    hidden: int
    heads: int
    encoder_layers: int
    ff_mult: int
    critical_layer: int
    head_global: Optional[bool]
    config_model: dict

    def __init__(
        self,
        vocab_size: int = config_model["vocab_size"]["default"],
        seq_len: int = config_model["seq_len"]["default"],
        hidden: int = config_model["hidden"]["default"],
        heads: int = config_model["heads"]["default"],
        encoder_layers: int = config_model["encoder_layers"]["default"],
        ff_mult: int = config_model["ff_mult"]["default"],
        critical_layer: int = config_model["critical_layer"]["default"],
        head_global: Optional[bool] = config_model["head_global"]["default"],
        log: str = "low",
        **kw,
    ) -> None:
        """Inputs for the transformer model."""

        # get all named parameters input to SplitTransformerModel class
        from inspect import signature

        sig = signature(SplitTransformerModel)

        # initialize all class attributes to None without triggering the __setattr__ method
        # which does a bunch more stuff
        for key in sig.parameters.keys():
            if key != "kw":
                self.__dict__[key] = None

        # each model edits its own copy of the schema
        self.__dict__["config_model"] = {k: dict(v) for k, v in config_model.items()}

        model = "transformer"

        if log == "low":
            self.__dict__["loglevel"] = 20
        elif log == "high":
            self.__dict__["loglevel"] = 0
        else:
            raise ConfigError("log", f"must be 'low' or 'high', got {log!r}")

        self.__dict__["logger"] = logging.getLogger(
            "federated_split_manager"
        )  # use this syntax to avoid __setattr__
        self.logger.setLevel(self.loglevel)

        kw.pop("model", None)
        super().__init__(model, **kw)

        # Extra keyword parameters are not currently allowed so they might be a typo
        if len(self.kw) > 0:
            raise UnknownParameterError(
                ", ".join(sorted(self.kw)), "unknown input parameter(s)"
            )

        # Set all attributes which will trigger some checks and changes in __setattr__
        # these will also update "value" in the config dict
        for key in sig.parameters.keys():
            # no need to run through for init if value is None (already set to None)
            if key != "kw" and locals()[key] is not None:
                self.__setattr__(key, locals()[key])

    def __setattr_model__(self, name: str, value) -> None:
        """Implement my own __setattr__ but here to enforce actions."""

        # create/update "value" keyword in config to keep it up to date
        if name in self.config_model.keys():
            self.config_model[name]["value"] = value

        if value is None:
            return

        if name in ["critical_layer", "encoder_layers"]:
            if (
                self.critical_layer is not None
                and self.encoder_layers is not None
                and self.critical_layer > self.encoder_layers
            ):
                raise ConfigError(
                    "critical_layer",
                    f"{self.critical_layer} exceeds encoder_layers={self.encoder_layers}",
                )

        if name in ["hidden", "heads"]:
            if self.hidden is not None and self.heads is not None and self.hidden % self.heads:
                raise ConfigError(
                    "hidden", f"{self.hidden} is not divisible by heads={self.heads}"
                )

        if name == "head_global" and self.critical_layer is not None:
            if self.critical_layer in (0, self.encoder_layers):
                self.logger.info(
                    f"head_global has no effect when critical_layer={self.critical_layer}."
                )

        if name == "log":
            self.__dict__["loglevel"] = 20 if value == "low" else 0
            self.logger.setLevel(self.loglevel)

    def run_model_config(self) -> ModelConfig:
        """Model shape from the current parameters."""
        return ModelConfig(
            vocab_size=self.vocab_size,
            seq_len=self.seq_len,
            hidden=self.hidden,
            heads=self.heads,
            encoder_layers=self.encoder_layers,
            ff_mult=self.ff_mult,
            num_classes=self.num_classes,
        )

    def run_gradcheck(self, probes: int = 200, threshold: float = 1e-5, batch: int = 8) -> float:
        """Check analytic gradients of the configured model in 64-bit arithmetic.

        The loss is evaluated on the first ``batch`` training samples of client 0.
        """
        from ...experiment import build_client_data

        cfg = self.experiment_config()
        train, _ = build_client_data(cfg)[0]
        tokens = train.tokens[:batch]
        targets = train.labels[:batch]
        with precision(64):
            params, model = build_model(cfg.model, self.seed)
            if model.is_regression:
                targets = targets.astype(np.float64)

            def loss_fn(graph, leaves):
                return model.loss(leaves, tokens, targets)

            worst = finite_diff_check(loss_fn, params, probes=probes, seed=self.seed)
        level = logging.INFO if worst <= threshold else logging.WARNING
        self.logger.log(level, f"gradient check: max relative error {worst:.3e} over {probes} probes")
        return worst
