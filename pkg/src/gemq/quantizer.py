"""Group-wise asymmetric weight quantization and GPTQ.

Weights are ``(out, in)`` matrices; groups are contiguous runs of input
columns sharing one ``(scale, zero)`` pair per row.  Calibration inputs are
``(n_samples, in)`` matrices, one token per row, so the layer computes
``X @ W.T`` and the GPTQ Hessian is ``2 X.T X``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConditioningError
from .model import MoeModel, expert_names

log = logging.getLogger(__name__)

MAX_GROUP = 128


@dataclass(frozen=True)
class QuantConfig:
    bits: int
    group_size: int | None = None  # None: min(128, in_dim)
    damp_ratio: float = 0.01
    act_order: bool = False

    def __post_init__(self):
        if not 1 <= self.bits <= 4:
            raise ValueError(f"bits must be in [1, 4], got {self.bits}")
        if self.group_size is not None and self.group_size < 1:
            raise ValueError("group_size must be positive")
        if self.act_order:
            raise NotImplementedError("activation-order column permutation is not implemented")

    def group_for(self, in_dim: int) -> int:
        return self.group_size or min(MAX_GROUP, in_dim)


@dataclass(frozen=True)
class QuantizedMatrix:
    q: np.ndarray       # (rows, cols) uint8 codes in [0, 2^bits - 1]
    scales: np.ndarray  # (rows, n_groups) float64
    zeros: np.ndarray   # (rows, n_groups) uint8
    bits: int
    group_size: int

    @property
    def shape(self):
        return self.q.shape

    def dequantize(self) -> np.ndarray:
        reps = np.repeat(np.arange(self.scales.shape[1]), self.group_size)[: self.q.shape[1]]
        return self.scales[:, reps] * (self.q.astype(np.float64) - self.zeros[:, reps])


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def group_params(wg: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``(scale, zero)`` for a block of columns.

    The range is widened to contain 0 so that the integer zero point never
    clamps.  A constant row ``c`` is represented exactly: ``scale = |c|`` with
    code/zero ``1/0`` (``c > 0``) or ``0/1`` (``c < 0``); ``c == 0`` uses scale 1.
    """
    maxq = 2**bits - 1
    wmin, wmax = wg.min(axis=1), wg.max(axis=1)
    lo, hi = np.minimum(wmin, 0.0), np.maximum(wmax, 0.0)
    const = wmin == wmax
    span = np.where(const, 1.0, hi - lo)
    scale = span / maxq
    zero = np.clip(round_half_away(-lo / scale), 0, maxq)
    c = wmin
    scale = np.where(const, np.where(c == 0, 1.0, np.abs(c)), scale)
    zero = np.where(const, (c < 0).astype(np.float64), zero)
    return scale, zero


def quantize_column(w, scale, zero, bits):
    """Codes and dequantized values for ``w`` under fixed group parameters."""
    q = np.clip(round_half_away(w / scale) + zero, 0, 2**bits - 1)
    return q, scale * (q - zero)


def affine_quantize(w: np.ndarray, cfg: QuantConfig) -> QuantizedMatrix:
    """Round-to-nearest quantization, one affine grid per (row, group)."""
    w = np.asarray(w, dtype=np.float64)
    rows, cols = w.shape
    gs = cfg.group_for(cols)
    n_groups = -(-cols // gs)
    q = np.empty((rows, cols))
    scales = np.empty((rows, n_groups))
    zeros = np.empty((rows, n_groups))
    for g in range(n_groups):
        sl = slice(g * gs, min(cols, (g + 1) * gs))
        s, z = group_params(w[:, sl], cfg.bits)
        scales[:, g], zeros[:, g] = s, z
        q[:, sl], _ = quantize_column(w[:, sl], s[:, None], z[:, None], cfg.bits)
    return QuantizedMatrix(q.astype(np.uint8), scales, zeros.astype(np.uint8), cfg.bits, gs)


def inverse_hessian_factor(x: np.ndarray, damp_ratio: float) -> np.ndarray:
    """Upper Cholesky factor of ``(2 X.T X + lambda I)^-1``."""
    h = 2.0 * (x.T @ x)
    damp = damp_ratio * float(np.mean(np.diag(h)))
    h[np.diag_indices_from(h)] += damp
    try:
        np.linalg.cholesky(h)
        hinv = np.linalg.inv(h)
        return np.linalg.cholesky(hinv).T
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"Hessian not positive definite after damping {damp:.3g}") from exc


def gptq_quantize(w: np.ndarray, x: np.ndarray, cfg: QuantConfig) -> QuantizedMatrix:
    """GPTQ: quantize columns left to right, pushing each column's rounding
    error onto the not-yet-quantized columns through the inverse Hessian.

    Group parameters are fitted when the first column of a group is reached,
    on the error-compensated weights at that point.
    """
    w = np.array(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    rows, cols = w.shape
    if x.ndim != 2 or x.shape[1] != cols:
        raise ValueError(f"calibration inputs {x.shape} do not match weight input dim {cols}")
    if x.shape[0] < 1:
        raise ValueError("gptq needs at least one calibration sample")
    u = inverse_hessian_factor(x, cfg.damp_ratio)
    gs = cfg.group_for(cols)
    n_groups = -(-cols // gs)
    q = np.empty((rows, cols))
    scales = np.empty((rows, n_groups))
    zeros = np.empty((rows, n_groups))
    for c in range(cols):
        g = c // gs
        if c % gs == 0:
            scales[:, g], zeros[:, g] = group_params(w[:, c : min(cols, c + gs)], cfg.bits)
        q[:, c], deq = quantize_column(w[:, c], scales[:, g], zeros[:, g], cfg.bits)
        err = (w[:, c] - deq) / u[c, c]
        w[:, c + 1 :] -= np.outer(err, u[c, c + 1 :])
    return QuantizedMatrix(q.astype(np.uint8), scales, zeros.astype(np.uint8), cfg.bits, gs)


def reconstruction_error(w, w_hat, x) -> float:
    """``||X W.T - X W_hat.T||^2`` over the calibration rows."""
    d = x @ (np.asarray(w) - np.asarray(w_hat)).T
    return float((d * d).sum())


# --------------------------------------------------------------------------- model level


@dataclass
class Calibration:
    """Router/expert inputs and routing of a model on the calibration windows."""

    mixed: list[np.ndarray]  # per layer, (n_tokens, d_model)
    routing: list            # per layer LayerRouting
    n_tokens: int

    def expert_inputs(self, model_cfg, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        layer, e = divmod(i, model_cfg.n_experts)
        rows, slots = self.routing[layer].tokens_for(e)
        return self.mixed[layer][rows], rows, slots


def capture_calibration(model: MoeModel, windows) -> Calibration:
    from .model import forward

    windows = np.atleast_2d(windows)
    out = forward(model, windows[:, :-1])
    return Calibration([c.mixed for c in out.capture], out.routing, out.capture[0].mixed.shape[0])


@dataclass(frozen=True)
class QuantizedExpert:
    up: QuantizedMatrix
    down: QuantizedMatrix
    method: str  # "gptq" or "rtn"


def quantize_expert(w_up, w_down, x: np.ndarray, cfg: QuantConfig) -> QuantizedExpert:
    """Quantize both projections of one expert on its routed inputs ``x``.

    ``w_down`` is calibrated on the full-precision hidden activations of the
    same tokens.  Without routed tokens both fall back to round-to-nearest.
    """
    if x.shape[0] == 0:
        return QuantizedExpert(affine_quantize(w_up, cfg), affine_quantize(w_down, cfg), "rtn")
    hidden = ad.silu(x @ w_up.T)
    return QuantizedExpert(gptq_quantize(w_up, x, cfg), gptq_quantize(w_down, hidden, cfg), "gptq")


@dataclass
class QuantizationReport:
    model: MoeModel
    experts: dict[int, QuantizedExpert]
    warnings: list[str] = field(default_factory=list)


def apply_allocation(model: MoeModel, bits, calib: Calibration, *, group_size=None,
                     damp_ratio=0.01, cache: dict | None = None) -> QuantizationReport:
    """Pseudo-quantize every expert of ``model`` at its planned bit-width.

    ``calib`` must be captured from ``model`` itself.  Routers, embeddings
    and head are left untouched.  ``cache`` (keyed by ``(expert, bits)``) lets
    callers share GPTQ results between importance estimation and allocation.
    """
    cfg = model.config
    bits = [int(b) for b in bits]
    if len(bits) != cfg.total_experts:
        raise ValueError(f"plan has {len(bits)} entries, model has {cfg.total_experts} experts")
    updates, experts, warnings = {}, {}, []
    for i, b in enumerate(bits):
        qe = quantized_expert(model, calib, i, b, group_size=group_size, damp_ratio=damp_ratio, cache=cache)
        if qe.method == "rtn":
            warnings.append(f"expert {i}: no routed calibration tokens, used round-to-nearest")
        up_name, down_name = expert_names(cfg, i)
        updates[up_name] = qe.up.dequantize()
        updates[down_name] = qe.down.dequantize()
        experts[i] = qe
    for w in warnings:
        log.warning(w)
    return QuantizationReport(model.with_params(updates, expert_bits=tuple(bits)), experts, warnings)


def quantized_expert(model: MoeModel, calib: Calibration, i: int, bits: int, *, group_size=None,
                     damp_ratio=0.01, cache: dict | None = None) -> QuantizedExpert:
    key = (i, bits)
    if cache is not None and key in cache:
        return cache[key]
    x, _, _ = calib.expert_inputs(model.config, i)
    ex = model.expert(i)
    qe = quantize_expert(ex.w_up, ex.w_down, x, QuantConfig(bits, group_size, damp_ratio))
    if cache is not None:
        cache[key] = qe
    return qe
