"""Binary16 conversion, the wire format and payload sizes."""

import struct

import numpy as np
import pytest

from numpy.testing import assert_array_equal

from federated_split_manager import quantization as q
from federated_split_manager.exceptions import (
    BadMagicError,
    NonFiniteError,
    PayloadFormatError,
    TrailingBytesError,
    TruncatedPayloadError,
    UnknownDTypeError,
    UnsupportedVersionError,
)
from federated_split_manager.models.transformer.encoder import (
    ModelConfig,
    SplitSpec,
    param_depth,
    parameter_shapes,
)
from federated_split_manager.tensor import ParameterSet


def test_one_tenth():
    bits = q.quantize_f16(np.float32(0.1))
    assert int(bits) == 0x2E66
    assert float(q.dequantize_f16(bits)) == 0.0999755859375


def test_every_finite_pattern_roundtrips():
    patterns = np.arange(1 << 16, dtype=np.int64).astype(np.uint16)
    finite = ((patterns >> 10) & 0x1F) != 31
    patterns = patterns[finite]
    assert_array_equal(q.quantize_f16(q.dequantize_f16(patterns)), patterns)


def test_relative_error_bound():
    rng = np.random.default_rng(0)
    exponents = rng.uniform(-14, np.log2(65504.0), size=100_000)
    x = (np.sign(rng.uniform(-1, 1, size=exponents.size)) * 2.0**exponents).astype(np.float32)
    back = q.dequantize_f16(q.quantize_f16(x)).astype(np.float64)
    rel = np.abs(back - x) / np.abs(x.astype(np.float64))
    assert rel.max() <= 2.0**-11


def test_rounding_ties_to_even():
    values = np.array([1 + 2**-11, 1 + 3 * 2**-11, 2**-24, 2**-25, 3 * 2**-25], dtype=np.float32)
    assert_array_equal(q.quantize_f16(values), [0x3C00, 0x3C02, 0x0001, 0x0000, 0x0002])


def test_saturation_and_signs():
    values = np.array([1e5, -1e6, np.inf, -np.inf, 65504.0, -0.0], dtype=np.float32)
    assert_array_equal(q.quantize_f16(values), [0x7BFF, 0xFBFF, 0x7BFF, 0xFBFF, 0x7BFF, 0x8000])
    assert q.dequantize_f16(np.uint16(0x7BFF)) == 65504.0

    with pytest.raises(NonFiniteError):
        q.quantize_f16([1.0, np.nan])


def test_float64_rounds_once():
    # just above the halfway point between 1 and the next binary16 value; a float32
    # detour lands exactly on the tie and rounds down to even
    x = 1 + 2.0**-11 + 2.0**-40
    assert int(q.quantize_f16(np.float64(x))) == 0x3C01
    assert int(q.quantize_f16(np.float32(x))) == 0x3C00

    patterns = np.arange(1 << 16, dtype=np.int64).astype(np.uint16)
    patterns = patterns[((patterns >> 10) & 0x1F) != 31]
    wide = q.dequantize_f16(patterns).astype(np.float64)
    assert_array_equal(q.quantize_f16(wide), patterns)

    values = np.array([1e5, 65519.0, -np.inf, 2.0**-25, 3 * 2.0**-25, -0.0])
    assert_array_equal(q.quantize_f16(values), [0x7BFF, 0x7BFF, 0xFBFF, 0x0000, 0x0002, 0x8000])


def test_f32_entry_refuses_float64():
    wide = {"w": np.array([0.1, 1 / 3])}
    with pytest.raises(PayloadFormatError):
        q.encode_global_payload(wide)
    encoded = q.encode_global_payload(wide, q.F16)
    assert q.decode_global_payload(encoded).equals(q.quantize_part(wide).astype(np.float32))


def test_quantize_part_keeps_dtype():
    part = ParameterSet({"w": np.array([0.1, 0.2], dtype=np.float64)})
    out = q.quantize_part(part)
    assert out["w"].dtype == np.float64
    assert out["w"][0] == 0.0999755859375


@pytest.fixture
def params():
    rng = np.random.default_rng(1)
    return ParameterSet(
        {
            "emb.tok": rng.standard_normal((5, 4)).astype(np.float32),
            "head.fc.b": np.zeros(2, dtype=np.float32),
            "scalar": np.float32(1.5),
        }
    )


def test_encode_decode(params):
    decoded = q.decode_global_payload(q.encode_global_payload(params))
    assert decoded.equals(params)

    decoded = q.decode_global_payload(q.encode_global_payload(params, q.F16))
    assert decoded.equals(q.quantize_part(params))


def test_sizes(params):
    for dtype in (q.F32, q.F16):
        assert q.payload_size(params, dtype) == len(q.encode_global_payload(params, dtype))
    assert q.data_size(params, q.F16) * 2 == q.data_size(params, q.F32)
    assert q.data_size(params, q.F32) == 4 * params.numel()

    empty = q.encode_global_payload({})
    assert len(empty) == q.HEADER_SIZE == q.payload_size({}, q.F32)
    assert len(q.decode_global_payload(empty)) == 0


def test_malformed_payloads(params):
    payload = q.encode_global_payload(params)

    with pytest.raises(BadMagicError):
        q.decode_global_payload(b"XXXX" + payload[4:])
    with pytest.raises(BadMagicError):
        q.decode_global_payload(payload, magic=q.CHECKPOINT_MAGIC)

    with pytest.raises(TruncatedPayloadError) as info:
        q.decode_global_payload(payload[:-1])
    assert info.value.offset < len(payload)
    with pytest.raises(TruncatedPayloadError):
        q.decode_global_payload(payload[:3])

    with pytest.raises(TrailingBytesError):
        q.decode_global_payload(payload + b"\x00")

    with pytest.raises(UnsupportedVersionError):
        q.decode_global_payload(payload[:4] + struct.pack("<I", 2) + payload[8:])

    # dtype code of the first entry ("emb.tok") sits after its length byte and name
    offset = q.HEADER_SIZE + 1 + len("emb.tok")
    bad = bytearray(payload)
    bad[offset] = 7
    with pytest.raises(UnknownDTypeError):
        q.decode_global_payload(bytes(bad))

    # every format error is also a PayloadFormatError and a ValueError
    assert issubclass(TrailingBytesError, PayloadFormatError)
    assert issubclass(PayloadFormatError, ValueError)


def test_long_name_rejected():
    with pytest.raises(PayloadFormatError):
        q.encode_global_payload({"x" * 256: np.zeros(1, dtype=np.float32)})


def _layer_shapes(shapes, encoder_layers, keep):
    return {n: s for n, s in shapes.items() if keep(param_depth(n, encoder_layers))}


def test_payload_ratios_base_sized_model():
    """12 layers of width 768 split at 6, sizes from shapes alone."""
    cfg = ModelConfig(
        vocab_size=30522, seq_len=512, hidden=768, heads=12, encoder_layers=12, ff_mult=4
    )
    shapes = parameter_shapes(cfg)
    spec = SplitSpec(12, 6)
    stack = _layer_shapes(shapes, 12, lambda depth: 1 <= depth <= 12)
    shared_stack = _layer_shapes(shapes, 12, lambda depth: 1 <= depth <= 12 and spec.is_global(depth))

    full = q.payload_size_from_shapes(stack, q.F32, header=False)
    half = q.payload_size_from_shapes(shared_stack, q.F32, header=False)
    # about 0.51 against 1.03
    assert half / full == pytest.approx(0.51 / 1.03, rel=0.1)

    # header-free f16 data is exactly half of f32 for any global part
    global_shapes = {n: s for n, s in shapes.items() if spec.is_global(param_depth(n, 12))}
    assert 2 * q.payload_size_from_shapes(global_shapes, q.F16, header=False) == (
        q.payload_size_from_shapes(global_shapes, q.F32, header=False)
    )

    # the shared embeddings of a 30522-token vocabulary keep the quantized c=6 payload
    # near 0.30 of the full f32 model instead of 0.25
    whole = q.payload_size_from_shapes(shapes, q.F32)
    assert q.payload_size_from_shapes(global_shapes, q.F16) / whole == pytest.approx(0.305, abs=0.005)


def test_quantized_split_payload_quarter_of_full_model():
    """Width-768 stack with a small vocabulary, so the encoder layers dominate."""
    cfg = ModelConfig(vocab_size=1000, seq_len=512, hidden=768, heads=12, encoder_layers=12, ff_mult=4)
    shapes = parameter_shapes(cfg)
    spec = SplitSpec(12, 6)
    global_shapes = {n: s for n, s in shapes.items() if spec.is_global(param_depth(n, 12))}
    ratio = q.payload_size_from_shapes(global_shapes, q.F16) / q.payload_size_from_shapes(shapes, q.F32)
    assert ratio == pytest.approx(0.25, rel=0.15)
