"""Bit-exact weight codecs: IEEE-754 binary16 and symmetric per-tensor INT8/INT4.

Encoded tensors are held as one unsigned *word* per weight (uint16 for FP16,
uint8 for INT8 and for INT4, where only the low nibble is used). Packing INT4
two-per-byte happens only when serializing a payload; low nibble = even index.

Bit 0 is the least significant bit. FP16 layout: bit 15 sign, bits 14-10
exponent, bits 9-0 mantissa. Quantized words are two's complement integers and
dequantize as ``scale * int``.
"""

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .errors import AddressError, EncodingError, FormatError


class Kind(str, enum.Enum):
    FP16 = "fp16"
    INT8 = "int8"
    INT4 = "int4"

    @property
    def width(self):
        return {"fp16": 16, "int8": 8, "int4": 4}[self.value]

    @property
    def quantized(self):
        return self is not Kind.FP16


@dataclass(frozen=True)
class StorageFormat:
    kind: Kind
    scale: float = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind.quantized and not (self.scale is not None and self.scale > 0 and np.isfinite(self.scale)):
            raise EncodingError(f"{self.kind.value} format needs a positive finite scale, got {self.scale!r}")

    @property
    def width(self):
        return self.kind.width

    @property
    def qmax(self):
        return 2 ** (self.width - 1) - 1


_WORD_DTYPE = {Kind.FP16: np.uint16, Kind.INT8: np.uint8, Kind.INT4: np.uint8}


def msb_position(fmt):
    """Default attack bit: exponent MSB for FP16, sign bit for integer formats."""
    kind = fmt.kind if isinstance(fmt, StorageFormat) else Kind(fmt)
    return {Kind.FP16: 14, Kind.INT8: 7, Kind.INT4: 3}[kind]


def encode(values, kind):
    """Encode real values; returns ``(words, StorageFormat)``.

    FP16 rounds to nearest-even. Quantized kinds pick ``scale = max|w| / qmax``
    (1.0 for an all-zero tensor) and round to nearest-even on the integer grid.
    """
    kind = Kind(kind)
    values = np.asarray(values, dtype=np.float64)
    if kind is Kind.FP16:
        with np.errstate(over="ignore"):
            return values.astype(np.float16).view(np.uint16), StorageFormat(kind)
    if not np.all(np.isfinite(values)):
        raise EncodingError("cannot quantize non-finite values")
    qmax = 2 ** (kind.width - 1) - 1
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    scale = peak / qmax if peak > 0 else 1.0
    q = np.clip(np.rint(values / scale), -qmax, qmax).astype(np.int64)
    words = (q & (2 ** kind.width - 1)).astype(np.uint8)
    return words, StorageFormat(kind, scale)


def signed_ints(words, fmt):
    """Two's complement integer value of quantized words."""
    w = np.asarray(words).astype(np.int64)
    half = 1 << (fmt.width - 1)
    return np.where(w >= half, w - (1 << fmt.width), w)


def decode(words, fmt):
    """Real values (float64) of encoded words."""
    words = np.asarray(words)
    if fmt.kind is Kind.FP16:
        return words.astype(np.uint16).view(np.float16).astype(np.float64)
    return signed_ints(words, fmt) * fmt.scale


def flip_bit_in_word(word, bit, fmt):
    """Toggle one bit of a word (scalar or array); involutive."""
    width = fmt.width if isinstance(fmt, StorageFormat) else Kind(fmt).width
    if not 0 <= int(bit) < width:
        raise AddressError(f"bit {bit} outside [0, {width})")
    dtype = _WORD_DTYPE[fmt.kind if isinstance(fmt, StorageFormat) else Kind(fmt)]
    return np.bitwise_xor(np.asarray(word, dtype=dtype), dtype(1 << int(bit)))


# ---------------------------------------------------------------------------
# payload serialization
# ---------------------------------------------------------------------------

def pack_int4(words):
    words = np.asarray(words, dtype=np.uint8).reshape(-1) & 0x0F
    if words.size % 2:
        words = np.concatenate([words, np.zeros(1, dtype=np.uint8)])
    return (words[0::2] | (words[1::2] << 4)).astype(np.uint8)


def unpack_int4(packed, count):
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:count]


def payload_nbytes(kind, count):
    kind = Kind(kind)
    if kind is Kind.FP16:
        return 2 * count
    body = count if kind is Kind.INT8 else (count + 1) // 2
    return 8 + body


def to_bytes(words, fmt):
    """Raw payload: LE u16 stream for FP16; LE f64 scale + bytes for INT8/INT4."""
    words = np.asarray(words).reshape(-1)
    if fmt.kind is Kind.FP16:
        return words.astype("<u2").tobytes()
    head = struct.pack("<d", fmt.scale)
    if fmt.kind is Kind.INT8:
        return head + words.astype(np.uint8).tobytes()
    return head + pack_int4(words).tobytes()


def from_bytes(buf, kind, count):
    """Inverse of :func:`to_bytes`; returns ``(words, fmt)``."""
    kind = Kind(kind)
    need = payload_nbytes(kind, count)
    if len(buf) < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {len(buf)}")
    if kind is Kind.FP16:
        return np.frombuffer(buf, dtype="<u2", count=count).astype(np.uint16), StorageFormat(kind)
    (scale,) = struct.unpack_from("<d", buf, 0)
    fmt = StorageFormat(kind, scale)
    body = np.frombuffer(buf, dtype=np.uint8, offset=8, count=need - 8)
    if kind is Kind.INT8:
        return body.copy(), fmt
    return unpack_int4(body, count), fmt


def decode_bytes(buf, kind, count):
    words, fmt = from_bytes(buf, kind, count)
    return decode(words, fmt)
