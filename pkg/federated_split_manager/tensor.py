"""Dense tensors with tape-based reverse-mode differentiation.

Values are numpy arrays. Operations on tensors that belong to a :class:`Graph`
are recorded on that graph together with a backward rule, and :func:`backward`
walks the tape in reverse creation order (which is a topological order) to
produce gradients for every named parameter leaf.

The module also holds the global 32/64-bit switch, the :class:`ParameterSet`
container used for model weights, plain SGD and a central finite-difference
gradient oracle.
"""

import contextlib
import logging
import math

from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from scipy.special import erf

from .exceptions import DimensionError, NonFiniteError


logger = logging.getLogger(__name__)

_DTYPES = {32: np.float32, 64: np.float64}
_precision = {"bits": 32}

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit floating point for newly created tensors."""
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, not {bits}")
    _precision["bits"] = bits


def get_precision() -> int:
    """Currently selected precision in bits."""
    return _precision["bits"]


def get_dtype():
    """numpy dtype matching the selected precision."""
    return _DTYPES[_precision["bits"]]


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the global precision."""
    previous = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


class ParameterSet(Mapping):
    """Ordered map from hierarchical parameter names to arrays.

    Iteration order is lexicographic by name so every traversal (aggregation,
    serialization, probing) is deterministic. Instances are treated as immutable
    snapshots: operations return new sets.

    Parameters
    ----------
    items : Mapping or iterable of (name, array) pairs
        Parameter names must be unique.
    """

    def __init__(self, items=()):
        if isinstance(items, Mapping):
            items = items.items()
        data = {}
        for name, value in items:
            if name in data:
                raise KeyError(f"duplicate parameter name {name!r}")
            data[name] = np.asarray(value)
        self._data = {name: data[name] for name in sorted(data)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {tuple(v.shape)}" for k, v in self._data.items())
        return f"ParameterSet({{{inner}}})"

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Name to shape."""
        return {name: tuple(value.shape) for name, value in self._data.items()}

    def numel(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(value.size for value in self._data.values()))

    def copy(self) -> "ParameterSet":
        """Deep copy (arrays included)."""
        return ParameterSet({name: value.copy() for name, value in self._data.items()})

    def astype(self, dtype) -> "ParameterSet":
        """Copy with every array cast to ``dtype``."""
        return ParameterSet(
            {name: value.astype(dtype) for name, value in self._data.items()}
        )

    def equals(self, other: Mapping) -> bool:
        """Bit-identical comparison: names, shapes, dtypes and raw bytes."""
        if list(self) != sorted(other):
            return False
        for name, value in self._data.items():
            theirs = np.asarray(other[name])
            if value.shape != theirs.shape or value.dtype != theirs.dtype:
                return False
            if value.tobytes() != theirs.tobytes():
                return False
        return True


class Tensor:
    """Array value, optionally attached to a node of a :class:`Graph`."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, graph=None, node_id=None):
        if isinstance(data, np.ndarray):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=get_dtype())
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    """One recorded operation."""

    op: str
    inputs: Tuple[Optional[int], ...]
    value: np.ndarray
    backward: Optional[Callable]
    name: Optional[str] = None


class Graph:
    """Tape of recorded operations.

    Nodes are appended as operations run, so the node list is itself a
    topological order: every node's inputs precede it.
    """

    def __init__(self):
        self.nodes = []
        self.param_ids = {}

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def order(self) -> range:
        """Topological order of node ids."""
        return range(len(self.nodes))

    def parameter(self, name: str, value) -> Tensor:
        """Register a named leaf that receives a gradient."""
        if name in self.param_ids:
            raise KeyError(f"parameter {name!r} already registered")
        value = np.asarray(value)
        self.param_ids[name] = len(self.nodes)
        self.nodes.append(Node("param", (), value, None, name))
        return Tensor(value, self, self.param_ids[name])

    def parameters(self, params: Mapping) -> Dict[str, Tensor]:
        """Register every entry of ``params`` as a leaf."""
        return {name: self.parameter(name, params[name]) for name in sorted(params)}

    def record(self, op, inputs, value, backward) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), value, backward))
        return Tensor(value, self, node_id)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_dtype()))


def _apply(op: str, inputs: Sequence[Tensor], value: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    graphs = {id(t.graph): t.graph for t in inputs if t.graph is not None}
    if not graphs:
        return Tensor(value)
    if len(graphs) > 1:
        raise ValueError(f"{op}: inputs belong to different graphs")
    graph = next(iter(graphs.values()))
    return graph.record(op, [t.node_id for t in inputs], value, backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    value = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply("add", (a, b), value, backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    value = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply("sub", (a, b), value, backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    value = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply("mul", (a, b), value, backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast).

    Raises
    ------
    DimensionError
        If the inner dimensions differ.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        value = np.matmul(a.data, b.data)
    except ValueError as err:
        raise DimensionError(
            f"matmul: cannot multiply shapes {a.shape} and {b.shape}"
        ) from err

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply("matmul", (a, b), value, backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    value = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _apply("reshape", (a,), value, backward)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    value = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _apply("transpose", (a,), value, backward)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    value = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _apply("sum", (a,), value, backward)


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` by integer ``ids``.

    Raises
    ------
    IndexError
        If any id is outside ``[0, rows)``.
    """
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"embedding id out of range [0, {rows}): {ids.max()}")
    value = table.data[ids]

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _apply("embedding", (table,), value, backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis: (x - mean) / sqrt(var + eps) * gamma + beta."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm: last dimension must be non-empty")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} and beta {beta.shape} must both be ({d},)"
        )
    if eps < 0:
        raise ValueError("layer_norm: eps must be non-negative")
    eps = float(eps)
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centred * centred).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centred * rstd
    value = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _apply("layer_norm", (x, gamma, beta), value, backward)


def gelu(x) -> Tensor:
    """Exact Gaussian error linear unit x * Phi(x)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    value = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _apply("gelu", (x,), value, backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (value * (g - (g * value).sum(axis=axis, keepdims=True)),)

    return _apply("softmax", (x,), value, backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax at the label.

    Parameters
    ----------
    logits : Tensor
        Shape (B, C).
    labels : array-like of int
        Shape (B,), values in ``[0, C)``.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    batch, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IndexError(f"label out of range [0, {classes}): {labels.max()}")
    rows = np.arange(batch)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    value = np.asarray((log_norm - shifted[rows, labels]).mean())

    def backward(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (g / batch),)

    return _apply("softmax_cross_entropy", (logits,), value, backward)


def mse_loss(pred, target) -> Tensor:
    """Mean squared error between a (B,) or (B, 1) prediction and (B,) targets."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    batch = target.shape[0]
    if pred.data.size != batch:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data.reshape(batch) - target
    value = np.asarray((diff * diff).mean())

    def backward(g):
        return (((2.0 / batch) * g * diff).reshape(pred.shape),)

    return _apply("mse", (pred,), value, backward)


def backward(graph: Graph, loss: Tensor) -> Dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter leaf of ``graph``.

    Parameters not reachable from ``loss`` get zero gradients.

    Raises
    ------
    DimensionError
        If ``loss`` is not a scalar.
    NonFiniteError
        If any gradient contains NaN or Inf.
    """
    if loss.graph is not graph or loss.node_id is None:
        raise ValueError("loss is not a node of this graph")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

    nodes = graph.nodes
    grads = [None] * len(nodes)
    grads[loss.node_id] = np.ones_like(loss.data)
    for node_id in range(loss.node_id, -1, -1):
        g = grads[node_id]
        node = nodes[node_id]
        if g is None or node.backward is None:
            continue
        for source, contribution in zip(node.inputs, node.backward(g)):
            if source is None or contribution is None:
                continue
            if grads[source] is None:
                grads[source] = contribution
            else:
                grads[source] = grads[source] + contribution
        grads[node_id] = None

    out = {}
    for name in sorted(graph.param_ids):
        node = nodes[graph.param_ids[name]]
        g = grads[graph.param_ids[name]]
        if g is None:
            g = np.zeros_like(node.value)
        else:
            g = np.ascontiguousarray(g, dtype=node.value.dtype).reshape(node.value.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name!r} is not finite")
        out[name] = g
    return out


def sgd_step(params: Mapping, grads: Mapping, eta: float) -> ParameterSet:
    """w <- w - eta * g for every parameter that has a gradient."""
    eta = float(eta)
    if eta < 0:
        raise ValueError(f"learning rate must be non-negative, not {eta}")
    unknown = sorted(set(grads) - set(params))
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {unknown}")
    out = {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = w
            continue
        g = np.asarray(g)
        if g.shape != w.shape:
            raise DimensionError(
                f"sgd_step: gradient for {name!r} has shape {g.shape}, parameter has {w.shape}"
            )
        out[name] = (w - eta * g).astype(w.dtype, copy=False)
    return ParameterSet(out)


def _loss_value(loss_fn, params: Mapping, widen: bool = False) -> float:
    if widen:
        with precision(64):
            graph = Graph()
            wide_params = {n: np.asarray(v, dtype=np.float64) for n, v in params.items()}
            leaves = graph.parameters(wide_params)
            return float(loss_fn(graph, leaves).data)
    graph = Graph()
    return float(loss_fn(graph, graph.parameters(params)).data)


def finite_diff_check(
    loss_fn: Callable[[Graph, Dict[str, Tensor]], Tensor],
    params: Mapping,
    probes: int = 100,
    eps: Optional[float] = None,
    seed: int = 0,
    floor: Optional[float] = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Parameters
    ----------
    loss_fn : callable
        ``loss_fn(graph, leaves)`` returning a scalar loss tensor built on ``graph``.
    params : Mapping
        Parameter values the gradient is checked at.
    probes : int
        Number of coordinates sampled uniformly over all parameters.
    eps : float, optional
        Finite-difference step; 1e-5 in 64-bit mode, 1e-3 in 32-bit mode by default.
    seed : int
        Seed for the coordinate sampler.
    floor : float, optional
        Gradients smaller than this are compared absolutely; 1e-4 in 64-bit mode,
        1e-2 in 32-bit mode by default.

    Notes
    -----
    The error per probe is ``|a - n| / max(|a|, |n|, floor)``. In 32-bit mode the
    analytic gradient stays 32-bit while the loss at the perturbed float32 weights is
    evaluated in 64-bit arithmetic, so the difference quotient is not swamped by
    float32 rounding of the loss.
    """
    wide = get_precision() == 64
    eps = (1e-5 if wide else 1e-3) if eps is None else eps
    floor = (1e-4 if wide else 1e-2) if floor is None else floor
    if eps <= 0:
        raise ValueError("eps must be positive")

    params = ParameterSet(params)
    graph = Graph()
    loss = loss_fn(graph, graph.parameters(params))
    analytic = backward(graph, loss)

    names = list(params)
    sizes = np.array([params[name].size for name in names])
    ends = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for flat in rng.integers(int(ends[-1]), size=probes):
        which = int(np.searchsorted(ends, flat, side="right"))
        name = names[which]
        index = int(flat - (ends[which] - sizes[which]))
        original = params[name]

        plus = original.copy()
        plus.flat[index] += eps
        minus = original.copy()
        minus.flat[index] -= eps
        step = float(plus.flat[index]) - float(minus.flat[index])

        f_plus = _loss_value(loss_fn, {**params, name: plus}, widen=not wide)
        f_minus = _loss_value(loss_fn, {**params, name: minus}, widen=not wide)
        numeric = (f_plus - f_minus) / step
        exact = float(analytic[name].flat[index])
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        worst = max(worst, error)

    logger.debug(f"finite difference check: {probes} probes, max relative error {worst:.3e}")
    return worst
