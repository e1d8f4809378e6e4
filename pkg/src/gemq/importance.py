"""Per-expert, per-bit loss-increase estimates.

For expert ``i`` quantized to ``j`` bits the estimate is

    dL[i, j] = mean over calibration tokens t of  sum_k g_t[k]^2 * dz_t[k]^2

where ``g_t`` is the gradient of the CE loss with respect to the MoE output of
the expert's block and ``dz_t`` is the change of that output when only expert
``i`` is swapped for its quantized version, with block inputs and routing held
at the estimation model's values.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import Expert, MoeModel, forward
from .quantizer import Calibration, capture_calibration, quantized_expert


@dataclass
class ImportanceTable:
    entries: np.ndarray       # (n_total_experts, n_bits), all >= 0
    bits: tuple[int, ...]
    observed: np.ndarray      # (n_total_experts,) bool
    n_experts: int            # experts per layer
    estimation_model_tag: str = "fp"
    calib_hash: str = ""

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.entries.shape != (len(self.observed), len(self.bits)):
            raise ValueError("entries must have one row per expert and one column per bit")
        if not np.isfinite(self.entries).all() or (self.entries < 0).any():
            raise ValueError("importance entries must be finite and non-negative")

    def layer_of(self, i: int) -> int:
        return i // self.n_experts

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["expert", "layer", "bit", "delta_loss", "observed"])
            for i in range(len(self.observed)):
                for j, b in enumerate(self.bits):
                    w.writerow([i, self.layer_of(i), b, repr(float(self.entries[i, j])),
                                int(self.observed[i])])

    @classmethod
    def from_csv(cls, path, estimation_model_tag="", calib_hash="") -> "ImportanceTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty importance table")
        bits = tuple(sorted({int(r["bit"]) for r in rows}))
        n = max(int(r["expert"]) for r in rows) + 1
        entries = np.full((n, len(bits)), np.nan)
        observed = np.zeros(n, dtype=bool)
        layers = {}
        for r in rows:
            i = int(r["expert"])
            entries[i, bits.index(int(r["bit"]))] = float(r["delta_loss"])
            observed[i] = bool(int(r["observed"]))
            layers[i] = int(r["layer"])
        if np.isnan(entries).any():
            raise ValueError(f"{path}: missing (expert, bit) cells")
        n_layers = max(layers.values()) + 1
        if n % n_layers:
            raise ValueError(f"{path}: {n} experts do not split evenly into {n_layers} layers")
        return cls(entries, bits, observed, n // n_layers, estimation_model_tag, calib_hash)


def calib_digest(windows) -> str:
    arr = np.ascontiguousarray(np.atleast_2d(windows), dtype="<i8")
    return hashlib.sha256(arr.tobytes() + str(arr.shape).encode()).hexdigest()


def collect_output_gradients(model: MoeModel, windows) -> list[np.ndarray]:
    """Per layer, the gradient of each sequence's mean CE w.r.t. the block's MoE output.

    One tape and backward pass per calibration sequence; rows are ordered
    sequence-major, matching a batched forward over the same windows.
    """
    windows = np.atleast_2d(windows)
    cfg = model.config
    seq = windows.shape[1] - 1
    per_layer = [[] for _ in range(cfg.n_layers)]
    for window in windows:
        tape = ad.Tape()
        probes = {l: tape.var(np.zeros((seq, cfg.d_model)), f"z_probe.{l}") for l in range(cfg.n_layers)}
        out = forward(model, window[None, :-1], z_offsets=probes)
        loss = ad.cross_entropy(out.logits, window[1:])
        grads = tape.backward(loss)
        for l, node in probes.items():
            per_layer[l].append(grads[node])
    return [np.concatenate(g, axis=0) for g in per_layer]


@dataclass
class Perturbation:
    rows: np.ndarray   # calibration rows routed to the expert
    delta: np.ndarray  # (len(rows), d_model)

    @property
    def observed(self) -> bool:
        return self.rows.size > 0


def expert_perturbation(model: MoeModel, i: int, quantized: Expert, calib: Calibration,
                        reference: Expert | None = None) -> Perturbation:
    """Change of the block output when expert ``i`` is replaced by ``quantized``.

    ``calib`` is the capture of ``model``; its inputs and routing stay frozen.
    The change is measured against ``reference`` (default: ``model``'s own
    expert ``i``).
    """
    h, rows, slots = calib.expert_inputs(model.config, i)
    if rows.size == 0:
        return Perturbation(rows, np.zeros((0, model.config.d_model)))
    layer = i // model.config.n_experts
    gate = calib.routing[layer].gates[rows, slots][:, None]
    diff = quantized(h) - (reference or model.expert(i))(h)
    return Perturbation(rows, gate * diff)


def importance_entry(g: np.ndarray, dz: np.ndarray, n_tokens: int | None = None) -> float:
    """Mean over tokens of ``sum_k g_k^2 dz_k^2``.

    ``g`` and ``dz`` are row-aligned; rows missing from ``dz`` (tokens the
    expert did not see) count as zero when ``n_tokens`` exceeds ``len(dz)``.
    """
    g = np.asarray(g, dtype=np.float64)
    dz = np.asarray(dz, dtype=np.float64)
    if g.shape != dz.shape:
        raise ValueError(f"gradient {g.shape} and perturbation {dz.shape} are not aligned")
    n = len(dz) if n_tokens is None else n_tokens
    if n == 0:
        return 0.0
    return float(((g * dz) ** 2).sum() / n)


def build_table(model: MoeModel, windows, bit_candidates=(1, 2, 3), *, source: MoeModel | None = None,
                source_calib: Calibration | None = None, tag: str = "fp", group_size=None,
                damp_ratio=0.01, cache: dict | None = None, reference: str = "estimation") -> ImportanceTable:
    """Importance of every (expert, bit) pair, estimated at ``model``.

    Candidate quantized weights are GPTQ results on ``source`` (the FP model;
    defaults to ``model``) calibrated with ``source_calib``.  The perturbation
    is taken on ``model``'s capture, against ``model``'s own experts
    (``reference="estimation"``) or against ``source``'s (``"source"``).
    """
    windows = np.atleast_2d(windows)
    bits = tuple(sorted(int(b) for b in bit_candidates))
    if not bits:
        raise ValueError("need at least one candidate bit-width")
    if len(windows) == 0:
        raise ValueError("calibration set is empty")
    if reference not in ("estimation", "source"):
        raise ValueError(f"unknown perturbation reference {reference!r}")
    source = source or model
    calib = capture_calibration(model, windows)
    if source_calib is None:
        source_calib = calib if source is model else capture_calibration(source, windows)
    grads = collect_output_gradients(model, windows)
    cfg = model.config
    entries = np.zeros((cfg.total_experts, len(bits)))
    observed = np.zeros(cfg.total_experts, dtype=bool)
    for i in range(cfg.total_experts):
        layer = i // cfg.n_experts
        for j, b in enumerate(bits):
            qe = quantized_expert(source, source_calib, i, b, group_size=group_size,
                                  damp_ratio=damp_ratio, cache=cache)
            ref = source.expert(i) if reference == "source" else None
            pert = expert_perturbation(model, i, Expert(qe.up.dequantize(), qe.down.dequantize()), calib, ref)
            observed[i] = pert.observed
            if pert.observed:
                entries[i, j] = importance_entry(grads[layer][pert.rows], pert.delta, calib.n_tokens)
    return ImportanceTable(entries, bits, observed, cfg.n_experts, tag, calib_digest(windows))
