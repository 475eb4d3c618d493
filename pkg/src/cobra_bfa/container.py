"""Encoded model storage and the on-disk container format.

Layout (all integers little-endian)::

    b"COBR"                magic
    u32                    format version (1)
    u32                    manifest length in bytes
    manifest               UTF-8 JSON: model config + per-tensor
                           {name, layer_type, shape, format, offset, nbytes}
    u64                    payload length in bytes
    payload                concatenated raw tensor payloads (see numeric_formats)
    u64                    CRC-64/XZ of the payload
"""

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from . import numeric_formats as nf
from .errors import FormatError
from .ssm_model import ModelConfig, ModelParams, layer_type

MAGIC = b"COBR"
VERSION = 1

# CRC-64/XZ (ECMA-182 polynomial, reflected, init/xorout all ones)
_CRC64_POLY = 0xC96C5795D7870F42
_CRC64_TABLE = []
for _i in range(256):
    _c = _i
    for _ in range(8):
        _c = (_c >> 1) ^ _CRC64_POLY if _c & 1 else _c >> 1
    _CRC64_TABLE.append(_c)


def crc64(data, crc=0):
    crc ^= 0xFFFFFFFFFFFFFFFF
    table = _CRC64_TABLE
    for byte in bytes(data):
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


@dataclass
class EncodedTensor:
    name: str
    shape: tuple
    words: np.ndarray
    fmt: nf.StorageFormat

    @property
    def layer_type(self):
        return layer_type(self.name)

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nbits(self):
        return self.size * self.fmt.width


class EncodedModel:
    """All tensors of a model in one storage format, plus a cached decoded view.

    Word arrays are kept read-only; mutation goes through
    :func:`cobra_bfa.fault_injector.apply_flips_destructive`, which swaps in new
    arrays and drops the decode cache.
    """

    def __init__(self, config, tensors, kind):
        self.config = config
        self.kind = nf.Kind(kind)
        self.tensors = dict(tensors)
        for t in self.tensors.values():
            t.words.flags.writeable = False
        self._decoded = None

    @classmethod
    def from_params(cls, params, kind):
        kind = nf.Kind(kind)
        tensors = {}
        for name, arr in params.named_tensors().items():
            words, fmt = nf.encode(np.asarray(arr).reshape(-1), kind)
            tensors[name] = EncodedTensor(name, tuple(np.shape(arr)), words, fmt)
        return cls(params.config, tensors, kind)

    def decode_tensor(self, name, words=None):
        t = self.tensors[name]
        w = t.words if words is None else words
        return nf.decode(w, t.fmt).reshape(t.shape)

    def decoded(self):
        """Dequantized float64 parameters (cached, read-only)."""
        if self._decoded is None:
            out = {}
            for name in self.tensors:
                arr = self.decode_tensor(name)
                arr.flags.writeable = False
                out[name] = arr
            self._decoded = ModelParams.from_named(self.config, out)
        return self._decoded

    def replace_words(self, name, words):
        t = self.tensors[name]
        words = np.asarray(words, dtype=t.words.dtype).reshape(-1)
        words.flags.writeable = False
        self.tensors[name] = EncodedTensor(t.name, t.shape, words, t.fmt)
        self._decoded = None

    def copy(self):
        tensors = {k: EncodedTensor(t.name, t.shape, t.words.copy(), t.fmt) for k, t in self.tensors.items()}
        return EncodedModel(self.config, tensors, self.kind)

    @property
    def num_parameters(self):
        return sum(t.size for t in self.tensors.values())

    @property
    def total_bits(self):
        return sum(t.nbits for t in self.tensors.values())

    def payload(self):
        return b"".join(nf.to_bytes(t.words, t.fmt) for t in self.tensors.values())

    def checksum(self):
        return crc64(self.payload())

    def to_bytes(self):
        entries = []
        chunks = []
        offset = 0
        for t in self.tensors.values():
            raw = nf.to_bytes(t.words, t.fmt)
            entries.append({
                "name": t.name,
                "layer_type": t.layer_type,
                "shape": list(t.shape),
                "format": t.fmt.kind.value,
                "offset": offset,
                "nbytes": len(raw),
            })
            chunks.append(raw)
            offset += len(raw)
        payload = b"".join(chunks)
        manifest = json.dumps({"config": asdict(self.config), "format": self.kind.value, "tensors": entries},
                              sort_keys=True).encode("utf-8")
        return b"".join([
            MAGIC,
            struct.pack("<II", VERSION, len(manifest)),
            manifest,
            struct.pack("<Q", len(payload)),
            payload,
            struct.pack("<Q", crc64(payload)),
        ])

    @classmethod
    def from_bytes(cls, blob):
        blob = bytes(blob)
        if len(blob) < 12 or blob[:4] != MAGIC:
            raise FormatError("not a model container (bad magic)")
        version, mlen = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        pos = 12
        try:
            manifest = json.loads(blob[pos:pos + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt manifest: {exc}") from None
        pos += mlen
        if len(blob) < pos + 8:
            raise FormatError("container truncated before payload")
        (plen,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        payload = blob[pos:pos + plen]
        if len(payload) != plen or len(blob) < pos + plen + 8:
            raise FormatError("container payload truncated")
        (crc,) = struct.unpack_from("<Q", blob, pos + plen)
        if crc != crc64(payload):
            raise FormatError("payload checksum mismatch")
        config = ModelConfig(**manifest["config"])
        tensors = {}
        for e in manifest["tensors"]:
            shape = tuple(e["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
            words, fmt = nf.from_bytes(raw, e["format"], count)
            tensors[e["name"]] = EncodedTensor(e["name"], shape, words.copy(), fmt)
        return cls(config, tensors, manifest["format"])


def atomic_write(path, data):
    """Write bytes or text via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model, path):
    atomic_write(path, model.to_bytes())


def load_model(path):
    with open(path, "rb") as fh:
        return EncodedModel.from_bytes(fh.read())
