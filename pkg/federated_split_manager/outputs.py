"""Run outputs: metric and ledger tables, checkpoints and the output directory.

Tables are written with a fixed column order and 9 significant digits so that two
runs of the same configuration produce byte-identical files.
"""

import logging
import os
import tempfile

from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import xarray as xr

from .federation import RoundRecord
from .quantization import CHECKPOINT_MAGIC, F32, decode_global_payload, encode_global_payload
from .tensor import ParameterSet


logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.9g"
METRICS_COLUMNS = ["round", "client_id", "train_loss", "test_metric", "bytes_up", "bytes_down"]
LEDGER_COLUMNS = [
    "round",
    "client_id",
    "bytes_up",
    "bytes_down",
    "data_bytes_up",
    "data_bytes_down",
    "cumulative_bytes",
]
SUMMARY_COLUMNS = [
    "round",
    "clients",
    "mean_test_metric_uniform",
    "mean_test_metric_weighted",
    "mean_train_loss",
    "round_bytes",
    "cumulative_bytes",
]


def metrics_frame(records: Sequence[RoundRecord]) -> pd.DataFrame:
    """One row per (round, selected client)."""
    rows = [
        (
            record.round,
            client_id,
            record.train_loss[client_id],
            record.test_metric[client_id],
            record.payload_bytes,
            record.payload_bytes,
        )
        for record in records
        for client_id in record.client_ids
    ]
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


def metrics_cube(records: Sequence[RoundRecord], num_clients: int) -> xr.Dataset:
    """Round x client cube of train loss and test metric, NaN where a client sat out."""
    rounds = [record.round for record in records]
    loss = np.full((len(records), num_clients), np.nan)
    metric = np.full((len(records), num_clients), np.nan)
    for row, record in enumerate(records):
        for client_id in record.client_ids:
            loss[row, client_id] = record.train_loss[client_id]
            metric[row, client_id] = record.test_metric[client_id]
    coords = {"round": rounds, "client_id": np.arange(num_clients)}
    return xr.Dataset(
        {
            "train_loss": (("round", "client_id"), loss),
            "test_metric": (("round", "client_id"), metric),
        },
        coords=coords,
    )


class CommLedger:
    """Bytes exchanged per round and client.

    Only global-part payloads are counted; local parts never travel.
    """

    def __init__(self, records: Sequence[RoundRecord]):
        rows = []
        cumulative = 0
        for record in records:
            for client_id in record.client_ids:
                cumulative += 2 * record.payload_bytes
                rows.append(
                    (
                        record.round,
                        client_id,
                        record.payload_bytes,
                        record.payload_bytes,
                        record.payload_data_bytes,
                        record.payload_data_bytes,
                        cumulative,
                    )
                )
        self.frame = pd.DataFrame(rows, columns=LEDGER_COLUMNS)

    def totals(self) -> Dict[str, int]:
        """Column sums of the byte counts."""
        names = ["bytes_up", "bytes_down", "data_bytes_up", "data_bytes_down"]
        totals = {name: int(self.frame[name].sum()) for name in names}
        totals["bytes"] = totals["bytes_up"] + totals["bytes_down"]
        totals["data_bytes"] = totals["data_bytes_up"] + totals["data_bytes_down"]
        return totals

    def per_round(self) -> pd.Series:
        """Up plus down bytes of each round."""
        frame = self.frame.assign(total=self.frame.bytes_up + self.frame.bytes_down)
        return frame.groupby("round")["total"].sum()


def summary_frame(
    records: Sequence[RoundRecord], sample_counts: Mapping[int, int]
) -> pd.DataFrame:
    """Per-round averages over the clients that took part, plus bytes.

    Parameters
    ----------
    sample_counts : Mapping
        Training samples per client, the weights of the weighted mean.
    """
    if not records:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    num_clients = len(sample_counts)
    cube = metrics_cube(records, num_clients)
    weights = xr.DataArray(
        np.array([sample_counts[c] for c in range(num_clients)], dtype=np.float64),
        dims="client_id",
        coords={"client_id": cube.client_id},
    )
    present = cube.test_metric.notnull()
    weighted = (cube.test_metric.fillna(0.0) * weights).sum("client_id") / (
        weights.where(present, 0.0).sum("client_id")
    )
    round_bytes = [record.bytes_up + record.bytes_down for record in records]
    return pd.DataFrame(
        {
            "round": cube["round"].values,
            "clients": present.sum("client_id").values.astype(np.int64),
            "mean_test_metric_uniform": cube.test_metric.mean("client_id").values,
            "mean_test_metric_weighted": weighted.values,
            "mean_train_loss": cube.train_loss.mean("client_id").values,
            "round_bytes": round_bytes,
            "cumulative_bytes": np.cumsum(round_bytes, dtype=np.int64),
        },
        columns=SUMMARY_COLUMNS,
    )


def communication_to_target(
    summary: pd.DataFrame, target: float, column: str = "mean_test_metric_uniform"
) -> Tuple[Optional[int], Optional[int]]:
    """First round whose mean metric reaches ``target`` and the bytes spent by then.

    Returns ``(None, None)`` when the target is never reached.
    """
    reached = summary[summary[column] >= target]
    if reached.empty:
        return None, None
    first = reached.iloc[0]
    return int(first["round"]), int(first["cumulative_bytes"])


def communication_gain(
    baseline: pd.DataFrame, method: pd.DataFrame, target: float
) -> Optional[float]:
    """How many times fewer bytes ``method`` needs than ``baseline`` to reach ``target``."""
    _, baseline_bytes = communication_to_target(baseline, target)
    _, method_bytes = communication_to_target(method, target)
    if baseline_bytes is None or method_bytes is None:
        return None
    if method_bytes == 0:
        return float("inf") if baseline_bytes else 1.0
    return baseline_bytes / method_bytes


def save_checkpoint(params: Mapping, path) -> None:
    """Write ``params`` as an FSBC container of float32 entries.

    Raises
    ------
    PayloadFormatError
        If a tensor is wider than float32; cast it first.
    """
    Path(path).write_bytes(encode_global_payload(params, F32, magic=CHECKPOINT_MAGIC))


def load_checkpoint(path) -> ParameterSet:
    """Read an FSBC container."""
    return decode_global_payload(Path(path).read_bytes(), magic=CHECKPOINT_MAGIC)


class OutputDirectory:
    """Writes files atomically into a run directory and can undo them.

    Every file goes to a temporary sibling first and is renamed into place, so a
    reader never sees a half-written file. :meth:`cleanup` removes everything this
    instance wrote.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.written: List[Path] = []
        self.path.mkdir(parents=True, exist_ok=True)

    def _target(self, name) -> Path:
        target = self.path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def write_bytes(self, name, data: bytes) -> Path:
        target = self._target(name)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        self.written.append(target)
        return target

    def write_text(self, name, text: str) -> Path:
        return self.write_bytes(name, text.encode("utf-8"))

    def write_csv(self, name, frame: pd.DataFrame) -> Path:
        text = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return self.write_text(name, text)

    def write_checkpoint(self, name, params: Mapping) -> Path:
        return self.write_bytes(name, encode_global_payload(params, F32, magic=CHECKPOINT_MAGIC))

    def cleanup(self) -> None:
        """Delete the files written so far and any directories left empty."""
        for target in reversed(self.written):
            if target.exists():
                target.unlink()
        parents = sorted({t.parent for t in self.written}, key=lambda p: len(p.parts), reverse=True)
        for parent in parents:
            if parent != self.path and parent.exists() and not any(parent.iterdir()):
                parent.rmdir()
        logger.info(f"removed {len(self.written)} partial outputs from {self.path}")
        self.written = []
