"""Post-quantization router fine-tuning.

Only the router matrices are trained, on the calibration CE, one sequence per
step.  The discrete top-K selection is treated as a constant of each forward
pass; gradients flow through the softmax scores and the renormalised gates.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import MoeModel, forward, loss_and_grads, router_names
from .optim import AdamState, adamw_step
from .quantizer import QuantConfig, affine_quantize, gptq_quantize

log = logging.getLogger(__name__)

__all__ = ["TuneConfig", "TuneResult", "adamw_step", "finetune_routers", "quantize_routers",
           "router_fraction"]


@dataclass(frozen=True)
class TuneConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive and weight decay non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class TuneResult:
    model: MoeModel
    losses: list[float] = field(default_factory=list)
    diagnostic: str | None = None

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for step, loss in enumerate(self.losses, 1):
                w.writerow([step, repr(loss)])


def finetune_routers(model: MoeModel, windows, cfg: TuneConfig = TuneConfig()) -> TuneResult:
    """AdamW on the router weights of a quantized model, batch size one sequence."""
    if model.expert_bits is None:
        raise ValueError("router fine-tuning expects a quantized model (expert_bits unset)")
    windows = np.atleast_2d(windows)
    if len(windows) == 0:
        raise ValueError("calibration set is empty")
    names = router_names(model.config)
    state = AdamState()
    tuned = model
    losses = []
    for _ in range(cfg.epochs):
        for window in windows:
            try:
                loss, grads = loss_and_grads(tuned, window, names)
            except FloatingPointError as exc:
                loss, grads = float("nan"), None
                log.debug("non-finite forward: %s", exc)
            if not np.isfinite(loss) or any(not np.isfinite(g).all() for g in (grads or {}).values()):
                msg = f"non-finite loss at step {len(losses) + 1}; returning the untuned model"
                log.warning(msg)
                return TuneResult(model, losses, msg)
            losses.append(loss)
            state.step += 1
            p = tuned.params()
            tuned = tuned.with_params({
                k: adamw_step(p[k], grads[k], state, k, lr=cfg.learning_rate,
                              weight_decay=cfg.weight_decay, beta1=cfg.beta1,
                              beta2=cfg.beta2, eps=cfg.eps)
                for k in names
            })
    return TuneResult(tuned, losses)


def quantize_routers(model: MoeModel, bits: int = 4, windows=None, damp_ratio: float = 0.01) -> MoeModel:
    """Replace every router by a dequantized low-bit version.

    With calibration ``windows`` each router is GPTQ-quantized on the mixed
    inputs it sees in ``model``'s own forward; without them, round-to-nearest.
    Widths of 16 bits or more are treated as unquantized storage.
    """
    if bits >= 16:
        return model
    cfg = QuantConfig(bits, damp_ratio=damp_ratio)
    names = router_names(model.config)
    p = model.params()
    if windows is None:
        return model.with_params({k: affine_quantize(p[k], cfg).dequantize() for k in names})
    captures = forward(model, np.atleast_2d(windows)[:, :-1]).capture
    return model.with_params({k: gptq_quantize(p[k], captures[l].mixed, cfg).dequantize()
                              for l, k in enumerate(names)})


def router_fraction(model: MoeModel) -> float:
    p = model.params()
    return sum(p[k].size for k in router_names(model.config)) / model.n_params()
