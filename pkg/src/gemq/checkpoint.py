"""Binary checkpoint container for :class:`MoeModel`.

Layout (all integers little-endian)::

    b"GEMQ"  u16 version
    u32 header_len  header JSON (canonical, UTF-8)
    u32 n_sections
    n_sections x { u16 name_len  name  u32 rows  u32 cols  rows*cols f64 }
    u32 crc32 of every preceding byte

The header holds the model config, its SHA-256 digest, the activation name,
the tokenizer alphabet and the optional per-expert bit annotation.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .corpus import Alphabet
from .errors import ConfigMismatchError, FormatError
from .model import ACTIVATION, MoeConfig, MoeModel, _assemble

MAGIC = b"GEMQ"
VERSION = 1


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def write_sections(buf: bytearray, sections) -> None:
    buf += struct.pack("<I", len(sections))
    for name, arr in sections:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<II", *arr.shape)
        buf += arr.tobytes()


class Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError("truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, rows: int, cols: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * rows * cols), dtype="<f8").astype(np.float64).reshape(rows, cols)


def check_crc(data: bytes) -> bytes:
    if len(data) < 4:
        raise FormatError("truncated file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch (corrupted or truncated file)")
    return body


def model_header(model: MoeModel) -> dict:
    return {
        "config": json.loads(model.config.to_json()),
        "config_hash": model.config.digest(),
        "activation": ACTIVATION,
        "alphabet": list(model.alphabet.symbols),
        "expert_bits": None if model.expert_bits is None else list(model.expert_bits),
    }


def parse_header(header: dict, expected: MoeConfig | None) -> tuple[MoeConfig, Alphabet, tuple | None]:
    try:
        config = MoeConfig.from_dict(header["config"])
        alphabet = Alphabet(tuple(header["alphabet"]))
        bits = header["expert_bits"]
        activation = header["activation"]
        digest = header["config_hash"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid header: {exc}") from exc
    if activation != ACTIVATION:
        raise FormatError(f"unsupported activation {activation!r}")
    if digest != config.digest():
        raise FormatError("config hash does not match header config")
    if expected is not None and expected.digest() != digest:
        raise ConfigMismatchError(f"checkpoint config {digest[:12]} != expected {expected.digest()[:12]}")
    return config, alphabet, None if bits is None else tuple(bits)


def dumps(model: MoeModel) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<H", VERSION)
    header = canonical_json(model_header(model))
    buf += struct.pack("<I", len(header)) + header
    write_sections(buf, list(model.params().items()))
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


def loads(data: bytes, expected_config: MoeConfig | None = None) -> MoeModel:
    r = Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    r = Reader(check_crc(data))
    r.take(6)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
    except ValueError as exc:
        raise FormatError("header is not valid JSON") from exc
    config, alphabet, bits = parse_header(header, expected_config)
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        rows, cols = r.unpack("<II")
        arrays[name] = r.f64(rows, cols)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last section")
    template = {
        name: arr.shape
        for name, arr in _empty_params(config).items()
    }
    if set(arrays) != set(template):
        raise FormatError("tensor sections do not match the model layout")
    for name, shape in template.items():
        if arrays[name].shape != shape:
            raise FormatError(f"section {name} has shape {arrays[name].shape}, expected {shape}")
    return MoeModel(config, alphabet, **_assemble(config, arrays), expert_bits=bits)


def _empty_params(config: MoeConfig) -> dict[str, np.ndarray]:
    d, h, v, n = config.d_model, config.d_hidden, config.vocab_size, config.n_experts
    out = {"embedding": np.empty((v, d))}
    for l in range(config.n_layers):
        out[f"blocks.{l}.router_w"] = np.empty((n, d))
        for e in range(n):
            out[f"blocks.{l}.experts.{e}.w_up"] = np.empty((h, d))
            out[f"blocks.{l}.experts.{e}.w_down"] = np.empty((d, h))
    out["head"] = np.empty((v, d))
    return out


def save_checkpoint(model: MoeModel, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(model))
    return path


def load_checkpoint(path, expected_config: MoeConfig | None = None) -> MoeModel:
    return loads(Path(path).read_bytes(), expected_config)
