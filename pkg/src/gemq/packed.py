"""Bit-packed storage of quantized expert weights.

Codes are flattened row-major and packed LSB-first into little-endian 32-bit
words: 32, 16 and 8 codes per word at 1, 2 and 4 bits, and 10 codes per word
at 3 bits (the top two bits stay zero).  Unused trailing slots are zero.

File layout (integers little-endian)::

    b"GEMQP"  u16 version  u16 flags (bit 0: float32 scales)
    u32 header_len  header JSON
    u32 n_sections
    per section:
        u16 name_len  name  u8 tag  u32 rows  u32 cols
        tag 0 (dense):     rows*cols f64
        tag b in 1..4:     u32 group_size  u32 n_groups
                           rows*n_groups scales (f64, or f32 with flag bit 0)
                           rows*n_groups u8 zeros
                           u32 n_words  n_words u32 code words
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Reader, canonical_json, check_crc, model_header, parse_header
from .errors import FormatError
from .model import MoeModel, _assemble, expert_names, forward
from .quantizer import QuantizationReport, QuantizedMatrix

MAGIC = b"GEMQP"
VERSION = 1
FLAG_F32_SCALES = 1
DENSE = 0


def codes_per_word(bits: int) -> int:
    if bits not in (1, 2, 3, 4):
        raise ValueError(f"unsupported code width {bits}")
    return 10 if bits == 3 else 32 // bits


def n_words(n_codes: int, bits: int) -> int:
    return -(-n_codes // codes_per_word(bits))


def pack_codes(codes, bits: int) -> np.ndarray:
    """Pack a flat code array into uint32 words."""
    codes = np.asarray(codes).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() > 2**bits - 1):
        raise ValueError(f"codes outside [0, {2**bits - 1}] for {bits}-bit packing")
    cpw = codes_per_word(bits)
    padded = np.zeros(n_words(codes.size, bits) * cpw, dtype=np.uint64)
    padded[: codes.size] = codes
    shifts = (np.arange(cpw, dtype=np.uint64) * np.uint64(bits))
    words = (padded.reshape(-1, cpw) << shifts).sum(axis=1, dtype=np.uint64)
    return words.astype(np.uint32)


def unpack_codes(words, bits: int, n_codes: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint32)
    cpw = codes_per_word(bits)
    if words.size != n_words(n_codes, bits):
        raise FormatError(f"{words.size} words cannot hold exactly {n_codes} {bits}-bit codes")
    shifts = np.arange(cpw, dtype=np.uint32) * np.uint32(bits)
    codes = (words[:, None] >> shifts) & np.uint32(2**bits - 1)
    return codes.reshape(-1)[:n_codes].astype(np.uint8)


@dataclass(frozen=True)
class PackedMatrix:
    bits: int
    shape: tuple[int, int]
    group_size: int
    words: np.ndarray   # uint32
    scales: np.ndarray  # (rows, n_groups)
    zeros: np.ndarray   # (rows, n_groups) uint8

    def unpack(self) -> QuantizedMatrix:
        q = unpack_codes(self.words, self.bits, self.shape[0] * self.shape[1]).reshape(self.shape)
        return QuantizedMatrix(q, np.asarray(self.scales, dtype=np.float64), self.zeros,
                               self.bits, self.group_size)


def pack(q: QuantizedMatrix) -> PackedMatrix:
    return PackedMatrix(q.bits, tuple(q.shape), q.group_size, pack_codes(q.q, q.bits),
                        q.scales.copy(), q.zeros.copy())


def unpack(p: PackedMatrix) -> QuantizedMatrix:
    return p.unpack()


@dataclass(frozen=True)
class PackedModel:
    """Experts as packed codes; everything else dense."""

    template: MoeModel                    # supplies config, alphabet and dense tensors
    experts: dict[int, tuple[PackedMatrix, PackedMatrix]]
    _dense: list = field(default_factory=list, repr=False, compare=False)

    @property
    def config(self):
        return self.template.config

    @property
    def expert_bits(self):
        return tuple(self.experts[i][0].bits for i in range(self.config.total_experts))

    def to_model(self) -> MoeModel:
        """Dense model with every expert dequantized (computed once)."""
        if not self._dense:
            updates = {}
            for i, (up, down) in self.experts.items():
                n_up, n_down = expert_names(self.config, i)
                updates[n_up] = up.unpack().dequantize()
                updates[n_down] = down.unpack().dequantize()
            self._dense.append(self.template.with_params(updates, expert_bits=self.expert_bits))
        return self._dense[0]


def pack_model(model: MoeModel, report: QuantizationReport) -> PackedModel:
    """Pack ``report``'s expert codes; routers, embedding and head come from ``model``."""
    cfg = model.config
    if set(report.experts) != set(range(cfg.total_experts)):
        raise ValueError("report must cover every expert")
    experts = {i: (pack(qe.up), pack(qe.down)) for i, qe in sorted(report.experts.items())}
    bits = tuple(experts[i][0].bits for i in range(cfg.total_experts))
    return PackedModel(model.with_params({}, expert_bits=bits), experts)


def packed_forward(pm: PackedModel, tokens) -> np.ndarray:
    return forward(pm.to_model(), tokens).logits


# --------------------------------------------------------------------------- file format


def _scale_dtype(f32: bool) -> str:
    return "<f4" if f32 else "<f8"


def dumps(pm: PackedModel, f32_scales: bool = False) -> bytes:
    cfg = pm.config
    header = model_header(pm.template.with_params({}, expert_bits=pm.expert_bits))
    header["codes_per_word"] = {str(b): codes_per_word(b) for b in (1, 2, 3, 4)}
    raw_header = canonical_json(header)
    buf = bytearray(MAGIC)
    buf += struct.pack("<HH", VERSION, FLAG_F32_SCALES if f32_scales else 0)
    buf += struct.pack("<I", len(raw_header)) + raw_header
    packed_names = {}
    for i, pair in pm.experts.items():
        for name, pmat in zip(expert_names(cfg, i), pair):
            packed_names[name] = pmat
    sections = list(pm.template.params().items())
    buf += struct.pack("<I", len(sections))
    for name, arr in sections:
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw
        if name in packed_names:
            p = packed_names[name]
            buf += struct.pack("<BII", p.bits, *p.shape)
            buf += struct.pack("<II", p.group_size, p.scales.shape[1])
            buf += np.ascontiguousarray(p.scales, dtype=_scale_dtype(f32_scales)).tobytes()
            buf += np.ascontiguousarray(p.zeros, dtype=np.uint8).tobytes()
            buf += struct.pack("<I", p.words.size)
            buf += np.ascontiguousarray(p.words, dtype="<u4").tobytes()
        else:
            buf += struct.pack("<BII", DENSE, *arr.shape)
            buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


def loads(data: bytes, expected_config=None) -> PackedModel:
    r = Reader(data)
    if r.take(5) != MAGIC:
        raise FormatError("bad magic")
    version, flags = r.unpack("<HH")
    if version != VERSION:
        raise FormatError(f"unsupported packed version {version}")
    r = Reader(check_crc(data))
    r.take(9)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
    except ValueError as exc:
        raise FormatError("header is not valid JSON") from exc
    config, alphabet, bits = parse_header(header, expected_config)
    sdt = _scale_dtype(bool(flags & FLAG_F32_SCALES))
    (count,) = r.unpack("<I")
    dense, packed = {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        tag, rows, cols = r.unpack("<BII")
        if tag == DENSE:
            dense[name] = r.f64(rows, cols)
            continue
        if tag not in (1, 2, 3, 4):
            raise FormatError(f"unknown section tag {tag}")
        gs, ng = r.unpack("<II")
        scales = np.frombuffer(r.take(np.dtype(sdt).itemsize * rows * ng), dtype=sdt)
        zeros = np.frombuffer(r.take(rows * ng), dtype=np.uint8).reshape(rows, ng)
        (nw,) = r.unpack("<I")
        words = np.frombuffer(r.take(4 * nw), dtype="<u4").astype(np.uint32)
        packed[name] = PackedMatrix(tag, (rows, cols), gs, words,
                                    scales.astype(np.float64).reshape(rows, ng), zeros.copy())
        dense[name] = packed[name].unpack().dequantize()
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last section")
    try:
        template = MoeModel(config, alphabet, **_assemble(config, dense), expert_bits=bits)
        experts = {i: tuple(packed[n] for n in expert_names(config, i))
                   for i in range(config.total_experts)}
    except KeyError as exc:
        raise FormatError(f"missing section {exc}") from exc
    return PackedModel(template, experts)


def save_packed(pm: PackedModel, path, f32_scales: bool = False) -> Path:
    path = Path(path)
    path.write_bytes(dumps(pm, f32_scales))
    return path


def load_packed(path, expected_config=None) -> PackedModel:
    return loads(Path(path).read_bytes(), expected_config)


# --------------------------------------------------------------------------- size accounting


def expected_file_size(pm: PackedModel, f32_scales: bool = False) -> int:
    """Exact byte length of :func:`dumps` output, computed from shapes alone."""
    header = model_header(pm.template.with_params({}, expert_bits=pm.expert_bits))
    header["codes_per_word"] = {str(b): codes_per_word(b) for b in (1, 2, 3, 4)}
    size = len(MAGIC) + 2 + 2 + 4 + len(canonical_json(header)) + 4 + 4
    packed = {n: p for i, pair in pm.experts.items() for n, p in zip(expert_names(pm.config, i), pair)}
    sbytes = 4 if f32_scales else 8
    for name, arr in pm.template.params().items():
        size += 2 + len(name.encode()) + 1 + 8
        if name in packed:
            p = packed[name]
            rows, cols = p.shape
            ng = -(-cols // p.group_size)
            size += 8 + rows * ng * (sbytes + 1) + 4 + 4 * n_words(rows * cols, p.bits)
        else:
            size += 8 * arr.size
    return size


def size_report(pm: PackedModel, f32_scales: bool = False) -> dict:
    """Byte counts split into packed expert payload and dense tensors."""
    cfg = pm.config
    code_bits, param_bytes, word_bytes = 0, 0, 0
    for up, down in pm.experts.values():
        for p in (up, down):
            code_bits += p.shape[0] * p.shape[1] * p.bits
            param_bytes += p.scales.size * ((4 if f32_scales else 8) + 1)
            word_bytes += 4 * p.words.size
    expert_names_all = {n for i in range(cfg.total_experts) for n in expert_names(cfg, i)}
    dense_bytes = sum(8 * a.size for n, a in pm.template.params().items() if n not in expert_names_all)
    return {
        "file_bytes": expected_file_size(pm, f32_scales),
        "expert_code_bits": code_bits,
        "expert_word_bytes": word_bytes,
        "expert_group_param_bytes": param_bytes,
        "dense_bytes": dense_bytes,
        "fp_expert_bytes": 8 * sum(pm.template.params()[n].size for n in expert_names_all),
    }
