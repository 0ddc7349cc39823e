"""Synthetic text tasks and the label-skew / score-sorted client partitions.

The classification generator gives every class three keyword tokens; a sample of
class ``k`` is background noise in which each class-``k`` keyword is planted
independently with probability ``p``. A sample with no planted keyword carries no
information, so the best achievable accuracy is::

    1 - (1 - p)**3 * (1 - 1 / C)

(:func:`bayes_accuracy`). The regression generator plants ten slots of "positive" or
"negative" tokens; the score is five times the positive fraction.

Token id 0 is padding. Sample lengths vary between ``seq_len / 2`` and ``seq_len``.
"""

import logging
import math

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from sklearn.model_selection import train_test_split

from .exceptions import ConfigError, PartitionError, PayloadFormatError


logger = logging.getLogger(__name__)

PAD_ID = 0
KEYWORDS_PER_CLASS = 3
MIN_BACKGROUND = 8
REGRESSION_SLOTS = 10
MAX_SCORE = 5.0
DUMP_TAG = "fsbd"
DUMP_VERSION = "v1"

# Per-client class fractions. Rows are renormalized when used.
LABEL_SCHEMES = {
    "mrpc": [[95, 5], [75, 25], [25, 75]],
    "cola": [[90.5, 9.5], [83, 17], [40, 60]],
    "qqp": [[70, 30], [37, 63], [13, 87]],
    "mnli": [[86, 5, 9], [5, 90, 5], [5, 5, 90]],
    "other": [[80, 20], [50, 50], [20, 80]],
    "binary10": [
        [90, 10], [80, 20], [70, 30], [60, 40], [50, 50],
        [40, 60], [30, 70], [20, 80], [10, 90], [2, 98],
    ],
    "mrpc10": [
        [92, 8], [86, 14], [71, 29], [66, 34], [50, 50],
        [44, 56], [35, 65], [28, 72], [12, 88], [51, 48],
    ],
}


@dataclass
class LabeledDataset:
    """Padded token sequences with class ids or real-valued scores.

    Attributes
    ----------
    tokens : np.ndarray
        (n, seq_len) int64 token ids, 0 is padding.
    labels : np.ndarray
        (n,) int64 class ids, or float64 scores when ``num_classes == 1``.
    num_classes : int
        Number of classes; 1 for a regression task.
    vocab_size : int
        Token ids are in ``[0, vocab_size)``.
    indices : np.ndarray
        Row ids in the dataset this one was cut from.
    """

    tokens: np.ndarray
    labels: np.ndarray
    num_classes: int
    vocab_size: int
    indices: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be (n, seq_len), got shape {self.tokens.shape}")
        n = len(self.tokens)
        if self.num_classes == 1:
            self.labels = np.asarray(self.labels, dtype=np.float64)
        else:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (n,):
            raise ValueError(f"{n} samples but labels of shape {self.labels.shape}")
        if n and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise IndexError(f"token id outside [0, {self.vocab_size})")
        if n and self.num_classes > 1 and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise IndexError(f"label outside [0, {self.num_classes})")
        if self.indices is None:
            self.indices = np.arange(n, dtype=np.int64)
        else:
            self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def is_regression(self) -> bool:
        return self.num_classes == 1

    def subset(self, rows) -> "LabeledDataset":
        """Samples at positions ``rows`` (source indices are carried along)."""
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(
            self.tokens[rows],
            self.labels[rows],
            self.num_classes,
            self.vocab_size,
            self.indices[rows],
        )

    def class_counts(self) -> np.ndarray:
        """Samples per class."""
        if self.is_regression:
            raise ValueError("class counts are undefined for a regression dataset")
        return np.bincount(self.labels, minlength=self.num_classes)


def bayes_accuracy(p: float, num_classes: int) -> float:
    """Best achievable accuracy of the keyword classification task."""
    return 1.0 - (1.0 - p) ** KEYWORDS_PER_CLASS * (1.0 - 1.0 / num_classes)


def _lengths(rng, samples: int, seq_len: int, shortest: int) -> np.ndarray:
    return rng.integers(shortest, seq_len + 1, size=samples)


def generate_classification_task(
    vocab_size: int,
    num_classes: int,
    samples: int,
    keyword_strength: float,
    seed: int,
    seq_len: int = 16,
) -> LabeledDataset:
    """Balanced keyword classification task.

    Parameters
    ----------
    vocab_size : int
        Must leave at least ``MIN_BACKGROUND`` background ids after the pad id and the
        ``3 * num_classes`` keywords.
    num_classes : int
        At least 2; use :func:`generate_regression_task` for scores.
    samples : int
        Number of samples; labels cycle through the classes before shuffling.
    keyword_strength : float
        Probability ``p`` in (0.5, 1] of planting each class keyword.
    seed : int
        Generator seed.
    seq_len : int
        Padded sequence length.
    """
    if num_classes < 2:
        raise ConfigError("num_classes", "classification needs at least 2 classes")
    if not 0.5 < keyword_strength <= 1.0:
        raise ConfigError("keyword_strength", f"must be in (0.5, 1], got {keyword_strength}")
    first_background = 1 + KEYWORDS_PER_CLASS * num_classes
    if vocab_size - first_background < MIN_BACKGROUND:
        raise ConfigError(
            "vocab_size",
            f"{vocab_size} leaves fewer than {MIN_BACKGROUND} background tokens "
            f"for {num_classes} classes",
        )
    shortest = max(math.ceil(seq_len / 2), KEYWORDS_PER_CLASS)
    if seq_len < shortest:
        raise ConfigError("seq_len", f"must be at least {KEYWORDS_PER_CLASS}")
    if samples < 1:
        raise ConfigError("samples", "must be positive")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(samples) % num_classes)
    lengths = _lengths(rng, samples, seq_len, shortest)
    tokens = np.full((samples, seq_len), PAD_ID, dtype=np.int64)
    for row in range(samples):
        length = lengths[row]
        tokens[row, :length] = rng.integers(first_background, vocab_size, size=length)
        slots = rng.choice(length, size=KEYWORDS_PER_CLASS, replace=False)
        planted = rng.random(KEYWORDS_PER_CLASS) < keyword_strength
        keywords = 1 + KEYWORDS_PER_CLASS * labels[row] + np.arange(KEYWORDS_PER_CLASS)
        tokens[row, slots[planted]] = keywords[planted]
    logger.debug(
        f"generated {samples} samples, {num_classes} classes, "
        f"bayes accuracy {bayes_accuracy(keyword_strength, num_classes):.4f}"
    )
    return LabeledDataset(tokens, labels, num_classes, vocab_size)


def generate_regression_task(
    vocab_size: int, samples: int, seed: int, seq_len: int = 16
) -> LabeledDataset:
    """Scored task: ``score = 5 * positives / 10`` over ten planted slots.

    Token ids 1-4 are positive, 5-8 negative, the rest background. The number of
    positive slots is uniform over 0..10.
    """
    first_background = 9
    if vocab_size - first_background < MIN_BACKGROUND:
        raise ConfigError("vocab_size", f"regression needs at least {first_background + MIN_BACKGROUND}")
    if seq_len < REGRESSION_SLOTS:
        raise ConfigError("seq_len", f"regression needs at least {REGRESSION_SLOTS} positions")
    if samples < 1:
        raise ConfigError("samples", "must be positive")

    rng = np.random.default_rng(seed)
    positives = rng.integers(0, REGRESSION_SLOTS + 1, size=samples)
    lengths = _lengths(rng, samples, seq_len, max(math.ceil(seq_len / 2), REGRESSION_SLOTS))
    tokens = np.full((samples, seq_len), PAD_ID, dtype=np.int64)
    for row in range(samples):
        length = lengths[row]
        tokens[row, :length] = rng.integers(first_background, vocab_size, size=length)
        slots = rng.choice(length, size=REGRESSION_SLOTS, replace=False)
        count = positives[row]
        tokens[row, slots[:count]] = rng.integers(1, 5, size=count)
        tokens[row, slots[count:]] = rng.integers(5, 9, size=REGRESSION_SLOTS - count)
    scores = MAX_SCORE * positives / REGRESSION_SLOTS
    return LabeledDataset(tokens, scores, 1, vocab_size)


def label_scheme(
    scheme: Union[str, Sequence[Sequence[float]]],
    num_clients: Optional[int] = None,
    num_classes: Optional[int] = None,
) -> np.ndarray:
    """Per-client class fractions as a (K, C) array whose rows sum to 1.

    Parameters
    ----------
    scheme : str or sequence of rows
        A name from ``LABEL_SCHEMES``, "iid", or explicit (unnormalized) rows.
    num_clients, num_classes : int, optional
        Expected shape; "iid" needs both.
    """
    if isinstance(scheme, str):
        if scheme == "iid":
            if num_clients is None or num_classes is None:
                raise ConfigError("label_scheme", "iid needs num_clients and num_classes")
            rows = np.ones((num_clients, num_classes))
        elif scheme in LABEL_SCHEMES:
            rows = np.array(LABEL_SCHEMES[scheme], dtype=np.float64)
        else:
            raise ConfigError(
                "label_scheme",
                f"unknown scheme {scheme!r}; choose from {['iid', *LABEL_SCHEMES]}",
            )
    else:
        try:
            rows = np.array(scheme, dtype=np.float64)
        except ValueError as err:
            raise ConfigError("label_scheme", "rows must all have the same length") from err
    if rows.ndim != 2 or rows.size == 0:
        raise ConfigError("label_scheme", f"expected a non-empty table, got shape {rows.shape}")
    if num_clients is not None and rows.shape[0] != num_clients:
        raise ConfigError(
            "label_scheme", f"has {rows.shape[0]} rows but there are {num_clients} clients"
        )
    if num_classes is not None and rows.shape[1] != num_classes:
        raise ConfigError(
            "label_scheme", f"has {rows.shape[1]} columns but there are {num_classes} classes"
        )
    if (rows < 0).any() or not np.isfinite(rows).all():
        raise ConfigError("label_scheme", "fractions must be finite and non-negative")
    totals = rows.sum(axis=1, keepdims=True)
    if (totals == 0).any():
        raise ConfigError("label_scheme", "a row sums to zero")
    return rows / totals


def largest_remainder(fractions, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` closest to ``fractions * total``.

    Leftover units go to the largest fractional parts, lower index first on ties.
    """
    exact = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(exact).astype(np.int64)
    leftover = total - int(counts.sum())
    order = np.argsort(-(exact - counts), kind="stable")
    if leftover >= 0:
        counts[order[:leftover]] += 1
    else:
        # fractions summing slightly above 1
        counts[order[::-1][:-leftover]] -= 1
    return counts


def partition_label_skew(
    ds: LabeledDataset, scheme, seed: int, shard_size: Optional[int] = None
) -> List[LabeledDataset]:
    """Sample one shard per scheme row, without replacement.

    Parameters
    ----------
    ds : LabeledDataset
        Classification dataset.
    scheme : array-like
        (K, C) class fractions, see :func:`label_scheme`.
    seed : int
        Sampling seed.
    shard_size : int, optional
        Samples per shard; ``len(ds) // K`` by default.

    Raises
    ------
    PartitionError
        If the shards ask for more samples of a class than the dataset holds.
    """
    if ds.is_regression:
        raise PartitionError("label-skew partitioning needs class labels")
    rows = label_scheme(scheme, num_classes=ds.num_classes)
    num_clients = rows.shape[0]
    if shard_size is None:
        shard_size = len(ds) // num_clients
    if shard_size < 1:
        raise PartitionError(f"{len(ds)} samples cannot fill {num_clients} shards")

    demand = np.stack([largest_remainder(row, shard_size) for row in rows])
    available = ds.class_counts()
    for label in range(ds.num_classes):
        needed = int(demand[:, label].sum())
        if needed > available[label]:
            raise PartitionError(
                f"class {label}: shards need {needed} samples, dataset has {available[label]}",
                label=label,
            )

    rng = np.random.default_rng(seed)
    pieces = [[] for _ in range(num_clients)]
    for label in range(ds.num_classes):
        pool = rng.permutation(np.flatnonzero(ds.labels == label))
        start = 0
        for client in range(num_clients):
            stop = start + demand[client, label]
            pieces[client].append(pool[start:stop])
            start = stop
    return [ds.subset(np.sort(np.concatenate(piece))) for piece in pieces]


def partition_sorted(ds: LabeledDataset, num_clients: int) -> List[LabeledDataset]:
    """Sort by label (ties by index) and cut into contiguous shards.

    Every shard gets ``len(ds) // K`` samples, the last one also takes the remainder.
    """
    if num_clients < 1:
        raise PartitionError(f"need at least one client, got {num_clients}")
    if len(ds) < num_clients:
        raise PartitionError(f"{len(ds)} samples cannot fill {num_clients} shards")
    order = np.argsort(ds.labels, kind="stable")
    size = len(ds) // num_clients
    bounds = [client * size for client in range(num_clients)] + [len(ds)]
    return [ds.subset(order[bounds[i] : bounds[i + 1]]) for i in range(num_clients)]


def split_train_test(
    shard: LabeledDataset, frac: float = 0.8, seed: int = 0
) -> Tuple[LabeledDataset, LabeledDataset]:
    """Seeded train/test split; classification shards are stratified by class.

    A class too small to appear on both sides makes stratification impossible; the
    shard is then split at random.
    """
    if len(shard) < 5:
        raise PartitionError(f"a shard needs at least 5 samples to split, got {len(shard)}")
    if not 0.0 < frac < 1.0:
        raise ConfigError("train_fraction", f"must be in (0, 1), got {frac}")
    n = len(shard)
    n_train = int(math.floor(frac * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    rows = np.arange(n)
    sizes = dict(train_size=n_train, test_size=n - n_train, random_state=seed)

    if shard.is_regression:
        train_rows, test_rows = train_test_split(rows, **sizes)
    else:
        try:
            train_rows, test_rows = train_test_split(rows, stratify=shard.labels, **sizes)
        except ValueError:
            logger.warning(f"stratified split of a {n}-sample shard failed, splitting at random")
            train_rows, test_rows = train_test_split(rows, **sizes)
    return shard.subset(np.sort(train_rows)), shard.subset(np.sort(test_rows))


def shard_summary(shards: Sequence[LabeledDataset]) -> pd.DataFrame:
    """One row per shard: size plus class histogram, or score min/mean/max."""
    records = []
    for client_id, shard in enumerate(shards):
        record = {"client_id": client_id, "size": len(shard)}
        if shard.is_regression:
            empty = len(shard) == 0
            record["score_min"] = np.nan if empty else float(shard.labels.min())
            record["score_mean"] = np.nan if empty else float(shard.labels.mean())
            record["score_max"] = np.nan if empty else float(shard.labels.max())
        else:
            for label, count in enumerate(shard.class_counts()):
                record[f"class_{label}"] = int(count)
        records.append(record)
    return pd.DataFrame.from_records(records).set_index("client_id")


def dump_dataset(ds: LabeledDataset, path) -> None:
    """Write ``ds`` in the plain-text ``fsbd`` format."""
    lines = [f"{DUMP_TAG},{DUMP_VERSION},{ds.vocab_size},{ds.num_classes},{ds.seq_len}"]
    for tokens, label in zip(ds.tokens, ds.labels):
        target = repr(float(label)) if ds.is_regression else str(int(label))
        lines.append(",".join(str(int(t)) for t in tokens) + "|" + target)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_dataset(path) -> LabeledDataset:
    """Read a dataset written by :func:`dump_dataset`."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise PayloadFormatError(f"{path}: empty dataset file")
    header = lines[0].split(",")
    if len(header) != 5 or header[0] != DUMP_TAG:
        raise PayloadFormatError(f"{path}: not an {DUMP_TAG} file")
    if header[1] != DUMP_VERSION:
        raise PayloadFormatError(f"{path}: unsupported version {header[1]!r}")
    vocab_size, num_classes, seq_len = (int(value) for value in header[2:])

    tokens = np.zeros((len(lines) - 1, seq_len), dtype=np.int64)
    labels = []
    for row, line in enumerate(lines[1:]):
        try:
            ids, target = line.split("|")
            values = [int(t) for t in ids.split(",")]
            labels.append(float(target) if num_classes == 1 else int(target))
        except ValueError as err:
            raise PayloadFormatError(f"{path}: malformed sample on line {row + 2}") from err
        if len(values) != seq_len:
            raise PayloadFormatError(
                f"{path}: line {row + 2} has {len(values)} tokens, expected {seq_len}"
            )
        tokens[row] = values
    return LabeledDataset(tokens, np.asarray(labels), num_classes, vocab_size)
