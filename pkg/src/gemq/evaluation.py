"""Perplexity, router change ratio and the FP-routing comparison."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import log_softmax_rows
from .corpus import tiled_windows
from .model import MoeModel, forward

CHUNK = 256


def _dense(model) -> MoeModel:
    return model.to_model() if hasattr(model, "to_model") else model


def as_windows(model, data) -> np.ndarray:
    """Accept raw text or pre-built ``(B, T+1)`` token windows."""
    if isinstance(data, str):
        if not data:
            raise ValueError("empty text")
        return tiled_windows(_dense(model).alphabet.encode(data), _dense(model).config.seq_len)
    windows = np.atleast_2d(np.asarray(data, dtype=np.int64))
    if windows.size == 0 or windows.shape[1] < 2:
        raise ValueError("need at least one window of two tokens")
    return windows


def total_nll(model, windows, routing_from=None) -> tuple[float, int]:
    """Summed next-token negative log-likelihood and token count."""
    model = _dense(model)
    ref = _dense(routing_from) if routing_from is not None else None
    nll, count = 0.0, 0
    for start in range(0, len(windows), CHUNK):
        chunk = windows[start : start + CHUNK]
        forced = None
        if ref is not None:
            forced = [(r.selected, r.gates) for r in forward(ref, chunk[:, :-1]).routing]
        logits = forward(model, chunk[:, :-1], routing=forced).logits
        targets = chunk[:, 1:].reshape(-1)
        logp = log_softmax_rows(logits)
        nll -= float(logp[np.arange(len(targets)), targets].sum())
        count += len(targets)
    return nll, count


def cross_entropy_of(model, data) -> float:
    nll, count = total_nll(model, as_windows(model, data))
    return nll / count


def perplexity(model, data) -> float:
    """``exp`` of the mean teacher-forced next-token CE."""
    return float(np.exp(cross_entropy_of(model, data)))


def _check_compatible(a, b):
    # the init seed is bookkeeping, not architecture
    ca, cb = (replace(_dense(m).config, seed=0) for m in (a, b))
    if ca != cb:
        raise ValueError("models have different architectures")


@dataclass(frozen=True)
class ChangeRatio:
    slot: float       # mean over (token, layer) of (K - |A & B|) / K
    any_change: float  # fraction of (token, layer) whose top-K sets differ at all


def router_change_ratio(model_a, model_b, data) -> ChangeRatio:
    """How differently two models route the same token stream."""
    _check_compatible(model_a, model_b)
    a, b = _dense(model_a), _dense(model_b)
    windows = as_windows(a, data)
    k = a.config.top_k
    slot_sum, any_sum, count = 0.0, 0, 0
    for start in range(0, len(windows), CHUNK):
        chunk = windows[start : start + CHUNK, :-1]
        ra, rb = forward(a, chunk).routing, forward(b, chunk).routing
        for la, lb in zip(ra, rb):
            sa, sb = np.sort(la.selected, axis=1), np.sort(lb.selected, axis=1)
            overlap = (sa[:, :, None] == sb[:, None, :]).any(axis=2).sum(axis=1)
            slot_sum += float((k - overlap).sum()) / k
            any_sum += int((overlap < k).sum())
            count += len(overlap)
    return ChangeRatio(slot_sum / count, any_sum / count)


def fp_logit_replacement_eval(quantized, fp, data) -> float:
    """Perplexity of ``quantized`` when every block uses the FP model's routing."""
    _check_compatible(quantized, fp)
    windows = as_windows(quantized, data)
    nll, count = total_nll(quantized, windows, routing_from=fp)
    return float(np.exp(nll / count))


def bit_histogram(bits, n_experts: int) -> list[dict[int, int]]:
    """Per-layer count of experts at each bit-width."""
    bits = list(bits)
    out = []
    for l in range(len(bits) // n_experts):
        layer = bits[l * n_experts : (l + 1) * n_experts]
        out.append({b: layer.count(b) for b in sorted(set(layer))})
    return out


@dataclass
class EvalReport:
    perplexity: dict[str, float]
    calib_ce: float | None = None
    router_change_ratio: float | None = None
    router_change_any: float | None = None
    bit_histogram: list = field(default_factory=list)
    model_size_bytes: int | None = None
    manifest: str | None = None

    def __post_init__(self):
        if any(p < 1 for p in self.perplexity.values()):
            raise ValueError("perplexity below 1")
        if self.router_change_ratio is not None and not 0 <= self.router_change_ratio <= 1:
            raise ValueError("change ratio outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bit_histogram"] = [{str(k): v for k, v in h.items()} for h in self.bit_histogram]
        return d
