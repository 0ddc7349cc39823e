"""Mini transformer encoder classifier and its critical-layer split.

The model is a post-norm encoder (token + learned positional embeddings, ``L``
blocks of multi-head self-attention and a GELU feed-forward network, each followed
by a residual connection and layer norm), mean pooling over non-pad positions and a
linear head. ``num_classes == 1`` turns the head into a scalar regressor.

Parameter names follow a fixed scheme::

    emb.tok, emb.pos
    enc.<kk>.attn.{wq,wk,wv,wo,bq,bk,bv,bo}
    enc.<kk>.ln1.{g,b}
    enc.<kk>.ffn.{w1,b1,w2,b2}
    enc.<kk>.ln2.{g,b}
    head.fc.{w,b}

with ``<kk>`` the zero-padded 0-based layer index.

Parameter count, with vocabulary ``V``, sequence length ``S``, hidden size ``d``,
feed-forward width ``f = ff_mult * d``, ``L`` layers and ``C`` outputs::

    embeddings = V*d + S*d
    layer      = (4*d*d + 4*d) + 2*d + (2*d*f + f + d) + 2*d
    head       = d*C + C
    total      = embeddings + L*layer + head
"""

import math
import re

from dataclasses import dataclass, fields
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from ...exceptions import ConfigError, SplitError
from ...tensor import (
    ParameterSet,
    Tensor,
    add,
    embedding,
    gelu,
    get_dtype,
    layer_norm,
    matmul,
    mse_loss,
    mul,
    reduce_sum,
    reshape,
    softmax,
    softmax_cross_entropy,
    transpose,
)


PAD_ID = 0
MASK_BIAS = -1e9
LN_EPS = 1e-5
INIT_STD = 0.02

_NAME = re.compile(
    r"^(?:emb\.(?:tok|pos)"
    r"|enc\.(?P<layer>\d{2})\.(?:attn\.(?:wq|wk|wv|wo|bq|bk|bv|bo)|ln1\.[gb]"
    r"|ffn\.(?:w1|b1|w2|b2)|ln2\.[gb])"
    r"|head\.fc\.[wb])$"
)
_WEIGHTS = {"wq", "wk", "wv", "wo", "w1", "w2", "w"}


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the encoder classifier.

    Parameters
    ----------
    vocab_size : int
        Number of token ids, pad id 0 included.
    seq_len : int
        Maximum sequence length (rows of the positional embedding).
    hidden : int
        Hidden size ``d``; must be divisible by ``heads``.
    heads : int
        Attention heads.
    encoder_layers : int
        Number of encoder blocks ``L`` (at most 99 so names stay two-digit).
    ff_mult : int
        Feed-forward width multiplier.
    num_classes : int
        Output classes; 1 selects the regression head.
    """

    vocab_size: int = 200
    seq_len: int = 16
    hidden: int = 32
    heads: int = 4
    encoder_layers: int = 4
    ff_mult: int = 4
    num_classes: int = 2

    def __post_init__(self):
        for field in fields(self):
            value = getattr(self, field.name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(field.name, f"must be an integer, got {value!r}")
            if value < 1:
                raise ConfigError(field.name, f"must be >= 1, got {value}")
        if self.hidden % self.heads:
            raise ConfigError(
                "hidden", f"{self.hidden} is not divisible by heads={self.heads}"
            )
        if self.encoder_layers > 99:
            raise ConfigError("encoder_layers", "at most 99 layers are supported")

    @property
    def ff_width(self) -> int:
        return self.ff_mult * self.hidden

    def parameter_count(self) -> int:
        """Analytic parameter count (see module docstring)."""
        d, f, c = self.hidden, self.ff_width, self.num_classes
        layer = (4 * d * d + 4 * d) + 2 * d + (2 * d * f + f + d) + 2 * d
        return (
            self.vocab_size * d
            + self.seq_len * d
            + self.encoder_layers * layer
            + d * c
            + c
        )


def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name and shape for ``cfg``, sorted by name."""
    d, f = cfg.hidden, cfg.ff_width
    shapes = {
        "emb.tok": (cfg.vocab_size, d),
        "emb.pos": (cfg.seq_len, d),
        "head.fc.w": (d, cfg.num_classes),
        "head.fc.b": (cfg.num_classes,),
    }
    for layer in range(cfg.encoder_layers):
        p = f"enc.{layer:02d}."
        for leaf in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + leaf] = (d, d)
        for leaf in ("bq", "bk", "bv", "bo"):
            shapes[p + "attn." + leaf] = (d,)
        for norm in ("ln1", "ln2"):
            shapes[p + norm + ".g"] = (d,)
            shapes[p + norm + ".b"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    return {name: shapes[name] for name in sorted(shapes)}


def param_depth(name: str, encoder_layers: int) -> int:
    """Depth of a parameter: embeddings 0, layer ``kk`` is ``kk + 1``, head ``L + 1``.

    Raises
    ------
    SplitError
        If ``name`` does not follow the naming scheme or names a missing layer.
    """
    match = _NAME.match(name)
    if match is None:
        raise SplitError(f"unrecognized parameter name {name!r}")
    if name.startswith("emb."):
        return 0
    if name.startswith("head."):
        return encoder_layers + 1
    layer = int(match.group("layer"))
    if layer >= encoder_layers:
        raise SplitError(f"{name!r} refers to layer {layer} of a {encoder_layers}-layer model")
    return layer + 1


@dataclass(frozen=True)
class SplitSpec:
    """Critical-layer split of an ``encoder_layers``-deep model.

    ``critical_layer == 0`` keeps everything local (isolated clients);
    ``critical_layer == encoder_layers`` shares everything (plain FedAvg). In between,
    embeddings and layers ``1..c`` are global, the upper layers stay local and the head
    is local unless ``head_global`` is set.
    """

    encoder_layers: int
    critical_layer: int
    head_global: Optional[bool] = None

    def __post_init__(self):
        if not 0 <= self.critical_layer <= self.encoder_layers:
            raise SplitError(
                f"critical_layer must be in [0, {self.encoder_layers}], got {self.critical_layer}"
            )

    def is_global(self, depth: int) -> bool:
        """Whether parameters at ``depth`` belong to the global part."""
        if self.critical_layer == 0:
            return False
        if self.critical_layer == self.encoder_layers:
            return True
        if depth == self.encoder_layers + 1:
            return bool(self.head_global)
        return depth <= self.critical_layer

    def global_names(self, names) -> list:
        return [
            n for n in sorted(names) if self.is_global(param_depth(n, self.encoder_layers))
        ]


def split_params(params: Mapping, spec: SplitSpec) -> Tuple[ParameterSet, ParameterSet]:
    """Partition ``params`` into (global part, local part)."""
    shared = set(spec.global_names(params))
    global_part = ParameterSet({n: params[n] for n in params if n in shared})
    local_part = ParameterSet({n: params[n] for n in params if n not in shared})
    return global_part, local_part


def merge_params(
    global_part: Mapping, local_part: Mapping, names=None
) -> ParameterSet:
    """Recombine a global and a local part into one parameter set.

    Parameters
    ----------
    names : iterable of str, optional
        Full name set of the model; when given, missing or extra names are errors.
    """
    overlap = sorted(set(global_part) & set(local_part))
    if overlap:
        raise SplitError(f"names present in both parts: {overlap}")
    merged = ParameterSet({**global_part, **local_part})
    if names is not None:
        missing = sorted(set(names) - set(merged))
        extra = sorted(set(merged) - set(names))
        if missing or extra:
            raise SplitError(f"merged names mismatch: missing {missing}, unexpected {extra}")
    return merged


class EncoderClassifier:
    """Forward pass of the encoder classifier.

    Calling the instance with a parameter mapping (arrays, or tensors registered on a
    :class:`~federated_split_manager.tensor.Graph`) and a token batch returns logits of
    shape (B, C).
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.shapes = parameter_shapes(cfg)

    @property
    def names(self):
        return list(self.shapes)

    @property
    def is_regression(self) -> bool:
        return self.cfg.num_classes == 1

    def init_params(self, seed: int) -> ParameterSet:
        """Weights N(0, 0.02^2), biases 0, layer-norm gains 1."""
        rng = np.random.default_rng(seed)
        dtype = get_dtype()
        params = {}
        for name, shape in self.shapes.items():
            leaf = name.rsplit(".", 1)[1]
            if name.startswith("emb.") or leaf in _WEIGHTS:
                params[name] = (INIT_STD * rng.standard_normal(shape)).astype(dtype)
            elif leaf == "g":
                params[name] = np.ones(shape, dtype=dtype)
            else:
                params[name] = np.zeros(shape, dtype=dtype)
        return ParameterSet(params)

    def __call__(self, params: Mapping, tokens, pad_mask=None) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (batch, seq_len), got shape {tokens.shape}")
        batch, length = tokens.shape
        if length > self.cfg.seq_len:
            raise IndexError(f"sequence length {length} exceeds seq_len={self.cfg.seq_len}")
        if pad_mask is None:
            pad_mask = tokens == PAD_ID
        pad_mask = np.asarray(pad_mask, dtype=bool)
        dtype = get_dtype()
        P = {n: v if isinstance(v, Tensor) else Tensor(np.asarray(v)) for n, v in params.items()}

        x = add(embedding(P["emb.tok"], tokens), embedding(P["emb.pos"], np.arange(length)))
        key_bias = np.where(pad_mask, MASK_BIAS, 0.0).astype(dtype)[:, None, None, :]
        for layer in range(self.cfg.encoder_layers):
            x = self._block(x, P, f"enc.{layer:02d}.", key_bias)

        valid = (~pad_mask).astype(dtype)
        counts = np.maximum(valid.sum(axis=1, keepdims=True), 1.0)
        pooled = reduce_sum(mul(x, (valid / counts)[:, :, None]), axis=1)
        return add(matmul(pooled, P["head.fc.w"]), P["head.fc.b"])

    def _block(self, x, P, p, key_bias):
        batch, length, d = x.shape
        heads = self.cfg.heads
        width = d // heads

        def split_heads(t):
            return transpose(reshape(t, (batch, length, heads, width)), (0, 2, 1, 3))

        q = split_heads(add(matmul(x, P[p + "attn.wq"]), P[p + "attn.bq"]))
        k = split_heads(add(matmul(x, P[p + "attn.wk"]), P[p + "attn.bk"]))
        v = split_heads(add(matmul(x, P[p + "attn.wv"]), P[p + "attn.bv"]))
        scores = add(mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(width)), key_bias)
        context = matmul(softmax(scores, axis=-1), v)
        context = reshape(transpose(context, (0, 2, 1, 3)), (batch, length, d))
        attended = add(matmul(context, P[p + "attn.wo"]), P[p + "attn.bo"])
        x = layer_norm(add(x, attended), P[p + "ln1.g"], P[p + "ln1.b"], LN_EPS)

        hidden = gelu(add(matmul(x, P[p + "ffn.w1"]), P[p + "ffn.b1"]))
        ff = add(matmul(hidden, P[p + "ffn.w2"]), P[p + "ffn.b2"])
        return layer_norm(add(x, ff), P[p + "ln2.g"], P[p + "ln2.b"], LN_EPS)

    def loss(self, params: Mapping, tokens, targets, pad_mask=None) -> Tensor:
        """Cross-entropy for classification, mean squared error for regression."""
        logits = self(params, tokens, pad_mask)
        if self.is_regression:
            return mse_loss(logits, targets)
        return softmax_cross_entropy(logits, targets)

    def predict(self, params: Mapping, tokens, batch_size: int = 256) -> np.ndarray:
        """Class ids, or scores for the regression head."""
        tokens = np.asarray(tokens, dtype=np.int64)
        out = []
        for start in range(0, len(tokens), batch_size):
            logits = self(params, tokens[start : start + batch_size]).data
            if self.is_regression:
                out.append(logits[:, 0])
            else:
                out.append(np.argmax(logits, axis=1))
        if not out:
            return np.zeros(0)
        return np.concatenate(out)


def build_model(cfg: ModelConfig, seed: int) -> Tuple[ParameterSet, EncoderClassifier]:
    """Initial weights and the forward callable for ``cfg``."""
    model = EncoderClassifier(cfg)
    return model.init_params(seed), model
