"""Server loop and client update of federated split training.

Each round the server samples clients, broadcasts the global part, every selected
client merges it with its private local part and runs mini-batch SGD on its shard,
uploads the updated global part, and the server aggregates (FedAvg weighted mean,
FedProx, or FedAvg followed by a server-side Adam step). Local parts never leave the
client. With ``quantize`` the global part travels as binary16 in both directions.

Client updates inside a round are pure functions of the broadcast snapshot, the
client's state and the (seed, client, round) batch schedule, so they may run on a
thread pool; aggregation happens afterwards on one thread in ascending client id.
"""

import logging
import time

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import LabeledDataset
from .exceptions import (
    ConfigError,
    DimensionError,
    DivergenceError,
    NonFiniteError,
    PartitionError,
    SplitError,
)
from .metrics import client_averages, score
from .models.transformer.encoder import EncoderClassifier, SplitSpec, merge_params, split_params
from .quantization import (
    F16,
    F32,
    data_size,
    decode_global_payload,
    encode_global_payload,
    quantize_part,
)
from .tensor import Graph, ParameterSet, backward, get_dtype, sgd_step


logger = logging.getLogger(__name__)

AGGREGATORS = ("fedavg", "fedprox", "fedadam")


@dataclass(frozen=True)
class FedConfig:
    """Federation hyperparameters.

    ``clients_per_round`` of None means every client takes part in every round.
    """

    num_clients: int = 3
    clients_per_round: Optional[int] = None
    rounds: int = 10
    local_epochs: int = 3
    batch_size: int = 16
    eta: float = 3e-5
    aggregator: str = "fedavg"
    fedprox_lambda: float = 0.0
    server_lr: float = 0.1
    server_beta1: float = 0.9
    server_beta2: float = 0.99
    server_eps: float = 1e-3
    quantize: bool = False
    strict_f16_accumulation: bool = False
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.clients_per_round is None:
            object.__setattr__(self, "clients_per_round", self.num_clients)
        for name in ("num_clients", "rounds", "local_epochs", "batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError(
                "clients_per_round",
                f"must be in [1, {self.num_clients}], got {self.clients_per_round}",
            )
        if not self.eta > 0:
            raise ConfigError("eta", f"must be > 0, got {self.eta}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError("aggregator", f"must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.fedprox_lambda < 0:
            raise ConfigError("fedprox_lambda", f"must be >= 0, got {self.fedprox_lambda}")
        if not 0 <= self.server_beta1 < 1 or not 0 <= self.server_beta2 < 1:
            raise ConfigError("server_beta1", "server betas must be in [0, 1)")
        if self.server_eps <= 0 or self.server_lr <= 0:
            raise ConfigError("server_lr", "server_lr and server_eps must be > 0")
        if self.seed < 0:
            raise ConfigError("seed", "must be non-negative")

    @property
    def wire_dtype(self) -> str:
        return F16 if self.quantize else F32


@dataclass
class ClientState:
    """A client's private weights and data."""

    client_id: int
    local: ParameterSet
    train: LabeledDataset
    test: LabeledDataset

    @property
    def sample_count(self) -> int:
        return len(self.train)


@dataclass
class ServerOptState:
    """Adam moments of the server optimizer, one entry per global parameter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, global_part: Mapping) -> "ServerOptState":
        return cls(
            m={n: np.zeros(np.shape(w), dtype=np.float64) for n, w in global_part.items()},
            v={n: np.zeros(np.shape(w), dtype=np.float64) for n, w in global_part.items()},
        )


@dataclass
class RoundRecord:
    """What happened in one round.

    ``bytes_up`` and ``bytes_down`` are round totals over the selected clients; each
    client sends and receives ``payload_bytes`` (``payload_data_bytes`` without
    headers). ``wall_time`` is informational and excluded from written outputs.
    """

    round: int
    client_ids: Tuple[int, ...]
    train_loss: Dict[int, float]
    test_metric: Dict[int, float]
    payload_bytes: int
    payload_data_bytes: int
    wall_time: float = 0.0

    @property
    def bytes_up(self) -> int:
        return len(self.client_ids) * self.payload_bytes

    @property
    def bytes_down(self) -> int:
        return len(self.client_ids) * self.payload_bytes

    @property
    def data_bytes_up(self) -> int:
        return len(self.client_ids) * self.payload_data_bytes

    @property
    def data_bytes_down(self) -> int:
        return len(self.client_ids) * self.payload_data_bytes


@dataclass
class ClientResult:
    client_id: int
    global_part: ParameterSet
    local: ParameterSet
    losses: List[float]

    @property
    def train_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")


@dataclass
class TrainingResult:
    records: List[RoundRecord]
    final_metrics: Dict[int, Dict[str, float]]
    client_params: Dict[int, ParameterSet]


def select_clients(rng: np.random.Generator, num_clients: int, per_round: int) -> Tuple[int, ...]:
    """Uniform sample of ``per_round`` distinct client ids, ascending."""
    if not 1 <= per_round <= num_clients:
        raise ValueError(f"cannot select {per_round} of {num_clients} clients")
    chosen = rng.choice(num_clients, size=per_round, replace=False)
    return tuple(int(c) for c in np.sort(chosen))


def batch_schedule(
    seed: int, client_id: int, round_index: int, n: int, batch_size: int, epochs: int
) -> List[np.ndarray]:
    """Row indices of every mini-batch a client visits in a round.

    Each epoch is a fresh permutation from a generator keyed by
    (seed, client_id, round); the last batch of an epoch may be short.
    """
    rng = np.random.default_rng((seed, client_id, round_index))
    batches = []
    for _ in range(epochs):
        order = rng.permutation(n)
        batches.extend(order[start : start + batch_size] for start in range(0, n, batch_size))
    return batches


def proximal_penalty(
    params: Mapping, anchor: Mapping, lam: float
) -> Tuple[float, Dict[str, np.ndarray]]:
    """FedProx term ``lam/2 * sum ||w - anchor||^2`` and its gradient ``lam * (w - anchor)``.

    Only names present in ``anchor`` are penalized.
    """
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, not {lam}")
    missing = sorted(set(anchor) - set(params))
    if missing:
        raise SplitError(f"anchor names missing from the parameters: {missing}")
    penalty = 0.0
    grads = {}
    for name in sorted(anchor):
        w = np.asarray(params[name])
        a = np.asarray(anchor[name])
        if w.shape != a.shape:
            raise DimensionError(f"{name!r}: parameter {w.shape} vs anchor {a.shape}")
        diff = w - a.astype(w.dtype)
        penalty += 0.5 * lam * float(np.sum(np.square(diff, dtype=np.float64)))
        grads[name] = (lam * diff).astype(w.dtype)
    return penalty, grads


def client_update(
    model: EncoderClassifier,
    client: ClientState,
    global_part: ParameterSet,
    cfg: FedConfig,
    round_index: int,
) -> ClientResult:
    """Local training of one client on the received global part.

    Raises
    ------
    PartitionError
        If the client has no training data.
    DivergenceError
        If a loss or gradient becomes non-finite.
    """
    train = client.train
    if len(train) == 0:
        raise PartitionError(f"client {client.client_id} has an empty training shard")
    params = merge_params(global_part, client.local, names=model.names)
    targets = train.labels.astype(get_dtype()) if model.is_regression else train.labels
    proximal = cfg.aggregator == "fedprox" and cfg.fedprox_lambda > 0

    losses = []
    schedule = batch_schedule(
        cfg.seed, client.client_id, round_index, len(train), cfg.batch_size, cfg.local_epochs
    )
    for rows in schedule:
        graph = Graph()
        try:
            loss = model.loss(graph.parameters(params), train.tokens[rows], targets[rows])
            grads = backward(graph, loss)
        except NonFiniteError as err:
            raise DivergenceError(round_index, client.client_id, str(err)) from err
        value = float(loss.data)
        if proximal:
            penalty, extra = proximal_penalty(params, global_part, cfg.fedprox_lambda)
            value += penalty
            grads = {n: g + extra[n] if n in extra else g for n, g in grads.items()}
        params = sgd_step(params, grads, cfg.eta)
        losses.append(value)

    candidate = ParameterSet({n: params[n] for n in global_part})
    local = ParameterSet({n: params[n] for n in params if n not in global_part})
    for name, w in candidate.items():
        if not np.all(np.isfinite(w)):
            raise DivergenceError(round_index, client.client_id, f"{name!r} is not finite")
    return ClientResult(client.client_id, candidate, local, losses)


def aggregate_weighted(
    updates: Sequence[Tuple[Mapping, int]], accumulate_dtype=np.float64
) -> ParameterSet:
    """Sample-count-weighted mean of global parts.

    Parameters
    ----------
    updates : sequence of (parameters, sample count)
        In ascending client id; the sum is reduced in this order.
    accumulate_dtype : numpy dtype
        Accumulator type. The result has the dtype of the first update.

    Raises
    ------
    SplitError
        If name sets differ (the symmetric difference is reported).
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    reference = set(updates[0][0])
    for part, count in updates:
        if set(part) != reference:
            raise SplitError(
                f"global parts disagree on names: {sorted(reference ^ set(part))}"
            )
        if count < 1:
            raise ValueError(f"sample counts must be >= 1, got {count}")
    total = sum(int(count) for _, count in updates)

    out = {}
    for name in sorted(reference):
        first = np.asarray(updates[0][0][name])
        acc = np.zeros(first.shape, dtype=accumulate_dtype)
        lo = hi = first
        for part, count in updates:
            value = np.asarray(part[name])
            if value.shape != first.shape:
                raise DimensionError(f"{name!r}: shapes {first.shape} and {value.shape}")
            acc = acc + (int(count) / total) * value.astype(accumulate_dtype)
            lo = np.minimum(lo, value)
            hi = np.maximum(hi, value)
        # a weighted mean lies inside the clients' range; rounding can step outside it
        out[name] = np.clip(acc, lo, hi).astype(first.dtype)
    return ParameterSet(out)


def server_adam_step(
    state: ServerOptState, current: Mapping, aggregated: Mapping, cfg: FedConfig
) -> ParameterSet:
    """Adam on the pseudo-gradient ``aggregated - current`` (no bias correction).

    ``state`` is updated in place.
    """
    b1, b2 = float(cfg.server_beta1), float(cfg.server_beta2)
    out = {}
    for name in sorted(current):
        g = np.asarray(current[name])
        delta = np.asarray(aggregated[name], dtype=np.float64) - g.astype(np.float64)
        if not np.all(np.isfinite(delta)):
            raise NonFiniteError(f"server pseudo-gradient of {name!r} is not finite")
        m = state.m.get(name, np.zeros(g.shape))
        v = state.v.get(name, np.zeros(g.shape))
        if m.shape != g.shape:
            raise DimensionError(f"{name!r}: optimizer state {m.shape} vs parameter {g.shape}")
        m = b1 * m + (1.0 - b1) * delta
        v = b2 * v + (1.0 - b2) * delta * delta
        state.m[name], state.v[name] = m, v
        step = float(cfg.server_lr) * m / (np.sqrt(v) + float(cfg.server_eps))
        out[name] = (g.astype(np.float64) + step).astype(g.dtype)
    state.step += 1
    return ParameterSet(out)


def transmit(part: ParameterSet, dtype: str) -> Tuple[ParameterSet, int]:
    """Send ``part`` over the wire and return what arrives and its size in bytes.

    An empty part is not sent at all. The wire carries at most 32 bits per value, so
    64-bit weights arrive rounded to float32 (or binary16) and widened back.
    """
    if not len(part):
        return part, 0
    sent = part.astype(np.float32) if dtype == F32 else part
    payload = encode_global_payload(sent, dtype)
    received = decode_global_payload(payload)
    return ParameterSet({n: received[n].astype(part[n].dtype) for n in part}), len(payload)


def evaluate(model: EncoderClassifier, params: Mapping, ds: LabeledDataset) -> Dict[str, float]:
    """Metrics of ``params`` on ``ds``."""
    if len(ds) == 0:
        return {"test_metric": float("nan")}
    return score(ds.labels, model.predict(params, ds.tokens), model.cfg.num_classes)


class Federation:
    """State of a federated split training run.

    Parameters
    ----------
    model : EncoderClassifier
        Forward pass shared by all clients.
    clients : list of ClientState
        Client ids must be ``0..K-1``.
    global_part : ParameterSet
        Initial global weights held by the server.
    cfg : FedConfig
        Hyperparameters.
    """

    def __init__(
        self,
        model: EncoderClassifier,
        clients: Sequence[ClientState],
        global_part: ParameterSet,
        cfg: FedConfig,
    ):
        if [c.client_id for c in clients] != list(range(cfg.num_clients)):
            raise ConfigError(
                "num_clients", f"expected clients 0..{cfg.num_clients - 1}, got {len(clients)}"
            )
        self.model = model
        self.clients = list(clients)
        self.global_part = global_part
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.server_state = ServerOptState.zeros(global_part)
        self.records: List[RoundRecord] = []
        self.logger = logger

    @classmethod
    def from_params(
        cls,
        model: EncoderClassifier,
        params: ParameterSet,
        spec: SplitSpec,
        shards: Sequence[Tuple[LabeledDataset, LabeledDataset]],
        cfg: FedConfig,
    ) -> "Federation":
        """Every client starts from ``params``; the server keeps its global part."""
        global_part, local_part = split_params(params, spec)
        clients = [
            ClientState(i, local_part.copy(), train, test) for i, (train, test) in enumerate(shards)
        ]
        return cls(model, clients, global_part, cfg)

    def client_params(self, client_id: int) -> ParameterSet:
        """Model of a client: current global part plus its local part."""
        return merge_params(self.global_part, self.clients[client_id].local, names=self.model.names)

    def _updates(self, selected, snapshot, round_index) -> Dict[int, ClientResult]:
        def work(client_id):
            return client_update(self.model, self.clients[client_id], snapshot, self.cfg, round_index)

        if self.cfg.workers > 1 and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                results = list(pool.map(work, selected))
        else:
            results = [work(client_id) for client_id in selected]
        return {result.client_id: result for result in results}

    def run_round(self, round_index: int) -> RoundRecord:
        """One round: select, broadcast, train locally, upload, aggregate, evaluate."""
        start = time.perf_counter()
        cfg = self.cfg
        selected = select_clients(self.rng, cfg.num_clients, cfg.clients_per_round)
        snapshot, payload = transmit(self.global_part, cfg.wire_dtype)
        data_bytes = data_size(self.global_part, cfg.wire_dtype)

        results = self._updates(selected, snapshot, round_index)

        updates = []
        for client_id in selected:
            result = results[client_id]
            uploaded, _ = transmit(result.global_part, cfg.wire_dtype)
            updates.append((uploaded, self.clients[client_id].sample_count))
            self.clients[client_id].local = result.local
            self.logger.debug(
                f"round {round_index} client {client_id}: train loss {result.train_loss:.6g}"
            )

        if len(self.global_part):
            accumulate = np.float16 if cfg.quantize and cfg.strict_f16_accumulation else np.float64
            aggregated = aggregate_weighted(updates, accumulate)
            if cfg.aggregator == "fedadam":
                aggregated = server_adam_step(self.server_state, self.global_part, aggregated, cfg)
            self.global_part = quantize_part(aggregated) if cfg.quantize else aggregated

        test_metric = {}
        for client_id in selected:
            metrics = evaluate(self.model, self.client_params(client_id), self.clients[client_id].test)
            test_metric[client_id] = metrics["test_metric"]

        record = RoundRecord(
            round_index,
            selected,
            {c: results[c].train_loss for c in selected},
            test_metric,
            payload,
            data_bytes if payload else 0,
            time.perf_counter() - start,
        )
        uniform, _ = client_averages(test_metric, {c: self.clients[c].sample_count for c in selected})
        self.logger.info(
            f"round {round_index}: {len(selected)} clients, mean test metric {uniform:.4f}, "
            f"{record.bytes_up + record.bytes_down} bytes"
        )
        self.records.append(record)
        return record

    def run_training(self, rounds: Optional[int] = None, callback=None) -> TrainingResult:
        """Run ``rounds`` rounds (``cfg.rounds`` by default) and evaluate every client.

        ``callback(record)`` is invoked after each round.
        """
        rounds = self.cfg.rounds if rounds is None else rounds
        if rounds < 1:
            raise ConfigError("rounds", f"must be >= 1, got {rounds}")
        first = len(self.records)
        for round_index in range(first, first + rounds):
            record = self.run_round(round_index)
            if callback is not None:
                callback(record)
        final_params = {c.client_id: self.client_params(c.client_id) for c in self.clients}
        final_metrics = {
            client_id: evaluate(self.model, params, self.clients[client_id].test)
            for client_id, params in final_params.items()
        }
        return TrainingResult(self.records[first:], final_metrics, final_params)
