"""Binary16 weight quantization, the named-tensor wire format and payload sizes.

Conversion is a software reference implementation on integer bit patterns, so it
does not depend on hardware half-precision support: round-to-nearest-even, binary16
subnormals preserved, and magnitudes above 65504 saturated to +/-65504 instead of
overflowing to infinity.

Wire layout, all integers little-endian::

    magic    4 bytes  b"FSBW" for a global payload, b"FSBC" for a checkpoint
    version  u32
    count    u64
    count entries of:
        name length u8, name (UTF-8), dtype code u8 (0 = f32, 1 = f16), rank u8,
        rank dims as u64, raw row-major element bytes

Entries are written in name order.
"""

import struct

from typing import Mapping, Tuple

import numpy as np

from .exceptions import (
    BadMagicError,
    NonFiniteError,
    PayloadFormatError,
    TrailingBytesError,
    TruncatedPayloadError,
    UnknownDTypeError,
    UnsupportedVersionError,
)
from .tensor import ParameterSet


F32 = "f32"
F16 = "f16"
DTYPE_CODES = {F32: 0, F16: 1}
ITEMSIZE = {F32: 4, F16: 2}

PAYLOAD_MAGIC = b"FSBW"
CHECKPOINT_MAGIC = b"FSBC"
FORMAT_VERSION = 1
HEADER_SIZE = 16

F16_MAX = 65504.0
_F16_MAX_PATTERN = 0x7BFF

_VERSION_COUNT = struct.Struct("<IQ")
_U8 = struct.Struct("<B")
_U64 = struct.Struct("<Q")


# (mantissa bits, exponent bias, unsigned view, bit pattern of 65504) per source format
_SOURCE_LAYOUTS = {
    np.dtype(np.float32): (23, 127, np.uint32, 0x477FE000),
    np.dtype(np.float64): (52, 1023, np.uint64, 0x40EFFC0000000000),
}


def _check_dtype(dtype: str) -> None:
    if dtype not in DTYPE_CODES:
        raise ValueError(f"dtype must be one of {sorted(DTYPE_CODES)}, not {dtype!r}")


def quantize_f16(values) -> np.ndarray:
    """Convert float32 or float64 values to binary16 bit patterns (uint16, same shape).

    float64 input is rounded to binary16 directly, without an intermediate float32
    rounding. Other dtypes are converted to float32 first.

    Raises
    ------
    NonFiniteError
        If any input is NaN.
    """
    x = np.asarray(values)
    if x.dtype not in _SOURCE_LAYOUTS:
        x = x.astype(np.float32)
    if np.isnan(x).any():
        raise NonFiniteError("cannot quantize NaN weights")
    mantissa_bits, bias, unsigned, max_pattern = _SOURCE_LAYOUTS[x.dtype]
    width = 8 * x.dtype.itemsize
    dropped = mantissa_bits - 10

    bits = np.ascontiguousarray(x).reshape(-1).view(unsigned)
    sign = ((bits >> (width - 16)) & 0x8000).astype(np.int64)
    magnitude = (bits & ((1 << (width - 1)) - 1)).astype(np.int64)
    exponent = magnitude >> mantissa_bits
    mantissa = magnitude & ((1 << mantissa_bits) - 1)

    # binary16 normal range: rebias the exponent, keep 10 mantissa bits
    half = ((exponent - (bias - 15)) << 10) | (mantissa >> dropped)
    rest = mantissa & ((1 << dropped) - 1)
    tie = 1 << (dropped - 1)
    normal = half + ((rest > tie) | ((rest == tie) & ((half & 1) == 1)))

    # binary16 subnormal range: value in units of 2**-24
    full = np.where(exponent > 0, mantissa | (1 << mantissa_bits), mantissa)
    shift = np.clip(bias + mantissa_bits - 24 - exponent, 1, 62)
    quotient = full >> shift
    remainder = full & ((1 << shift) - 1)
    halfway = 1 << (shift - 1)
    subnormal = quotient + (
        (remainder > halfway) | ((remainder == halfway) & ((quotient & 1) == 1))
    )

    result = np.where(exponent >= bias - 14, normal, subnormal)
    result = np.where(magnitude > max_pattern, _F16_MAX_PATTERN, result)
    return (sign | result).astype(np.uint16).reshape(x.shape)


def dequantize_f16(bits) -> np.ndarray:
    """Widen binary16 bit patterns to float32 (exact)."""
    h = np.asarray(bits, dtype=np.uint16).astype(np.int64)
    exponent = (h >> 10) & 0x1F
    mantissa = h & 0x3FF
    magnitude = np.where(
        exponent == 0,
        np.ldexp(mantissa.astype(np.float64), -24),
        np.ldexp((mantissa + 1024).astype(np.float64), exponent - 25),
    )
    magnitude = np.where(exponent == 31, np.where(mantissa == 0, np.inf, np.nan), magnitude)
    return np.where(h & 0x8000, -magnitude, magnitude).astype(np.float32)


def quantize_part(params: Mapping) -> ParameterSet:
    """Round every tensor through binary16 and back, keeping each array's dtype."""
    return ParameterSet(
        {
            name: dequantize_f16(quantize_f16(value)).astype(np.asarray(value).dtype)
            for name, value in params.items()
        }
    )


def entry_size(name: str, shape: Tuple[int, ...], dtype: str) -> int:
    """Encoded size of one entry."""
    numel = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
    return 3 + len(name.encode("utf-8")) + 8 * len(shape) + numel * ITEMSIZE[dtype]


def payload_size_from_shapes(shapes: Mapping, dtype: str, header: bool = True) -> int:
    """Encoded size of a payload given only names and shapes.

    Parameters
    ----------
    shapes : Mapping
        Name to shape.
    dtype : str
        "f32" or "f16".
    header : bool
        Include the container and entry headers; False counts element bytes only.
    """
    _check_dtype(dtype)
    if not header:
        return sum(
            int(np.prod(shape, dtype=np.int64)) * ITEMSIZE[dtype] for shape in shapes.values()
        )
    return HEADER_SIZE + sum(entry_size(name, tuple(shape), dtype) for name, shape in shapes.items())


def payload_size(params: Mapping, dtype: str) -> int:
    """Exact length of ``encode_global_payload(params, dtype)`` without encoding."""
    return payload_size_from_shapes(
        {name: np.shape(value) for name, value in params.items()}, dtype
    )


def data_size(params: Mapping, dtype: str) -> int:
    """Element bytes of a payload, headers excluded."""
    return payload_size_from_shapes(
        {name: np.shape(value) for name, value in params.items()}, dtype, header=False
    )


def encode_global_payload(params: Mapping, dtype: str = F32, magic: bytes = PAYLOAD_MAGIC) -> bytes:
    """Serialize a parameter set; the f16 path applies :func:`quantize_f16`.

    Raises
    ------
    PayloadFormatError
        If a name is longer than 255 bytes, a tensor has more than 255 dims, or an f32
        entry would have to narrow a wider float (cast such tensors explicitly).
    """
    _check_dtype(dtype)
    chunks = [magic, _VERSION_COUNT.pack(FORMAT_VERSION, len(params))]
    for name in sorted(params):
        encoded = name.encode("utf-8")
        if len(encoded) > 255:
            raise PayloadFormatError(f"parameter name longer than 255 bytes: {name[:40]!r}...")
        value = np.asarray(params[name])
        if value.ndim > 255:
            raise PayloadFormatError(f"{name!r} has rank {value.ndim} > 255")
        if dtype == F32 and value.dtype.kind == "f" and value.dtype.itemsize > 4:
            raise PayloadFormatError(f"{name!r} is {value.dtype}; an f32 entry would lose precision")
        chunks.append(_U8.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U8.pack(DTYPE_CODES[dtype]))
        chunks.append(_U8.pack(value.ndim))
        chunks.extend(_U64.pack(dim) for dim in value.shape)
        if dtype == F16:
            chunks.append(quantize_f16(value).astype("<u2").tobytes())
        else:
            chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, buffer):
        self.view = memoryview(buffer)
        self.offset = 0

    def take(self, size: int) -> memoryview:
        end = self.offset + size
        if end > len(self.view):
            raise TruncatedPayloadError(self.offset, end - len(self.view))
        chunk = self.view[self.offset : end]
        self.offset = end
        return chunk


def decode_global_payload(buffer, magic: bytes = PAYLOAD_MAGIC) -> ParameterSet:
    """Parse a buffer produced by :func:`encode_global_payload` into float32 arrays.

    Raises
    ------
    BadMagicError, UnsupportedVersionError, UnknownDTypeError,
    TruncatedPayloadError, TrailingBytesError
    """
    reader = _Reader(buffer)
    found = bytes(reader.take(4))
    if found != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {found!r}")
    version, count = _VERSION_COUNT.unpack(reader.take(_VERSION_COUNT.size))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} is not supported")

    codes = {code: name for name, code in DTYPE_CODES.items()}
    params = {}
    for _ in range(count):
        (name_length,) = _U8.unpack(reader.take(1))
        try:
            name = bytes(reader.take(name_length)).decode("utf-8")
        except UnicodeDecodeError as err:
            raise PayloadFormatError(f"entry name at offset {reader.offset} is not UTF-8") from err
        (code,) = _U8.unpack(reader.take(1))
        if code not in codes:
            raise UnknownDTypeError(f"{name!r}: unknown dtype code {code}")
        (rank,) = _U8.unpack(reader.take(1))
        shape = tuple(_U64.unpack(reader.take(8))[0] for _ in range(rank))
        numel = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = reader.take(numel * ITEMSIZE[codes[code]])
        if codes[code] == F16:
            value = dequantize_f16(np.frombuffer(raw, dtype="<u2"))
        else:
            value = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        if name in params:
            raise PayloadFormatError(f"duplicate entry {name!r}")
        params[name] = value.reshape(shape)
    if reader.offset != len(reader.view):
        raise TrailingBytesError(
            f"{len(reader.view) - reader.offset} trailing bytes after offset {reader.offset}"
        )
    return ParameterSet(params)
