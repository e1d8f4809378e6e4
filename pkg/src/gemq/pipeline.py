"""Progressive quantization over a descending sequence of bit budgets.

Each stage estimates expert importance on the previous stage's tuned model,
allocates bits globally, quantizes the full-precision experts with GPTQ and
fine-tunes the routers.  Stage outputs are written to disk as they complete.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .allocator import MODES, AllocationPlan, plan_for_budget
from .checkpoint import save_checkpoint
from .evaluation import perplexity, router_change_ratio
from .importance import ImportanceTable, build_table, calib_digest
from .model import MoeModel, sequence_loss
from .packed import pack_model, save_packed
from .quantizer import QuantizationReport, apply_allocation, capture_calibration
from .router_tune import TuneConfig, TuneResult, finetune_routers, quantize_routers

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class PipelinePlan:
    budgets: tuple[float, ...] = (2.5, 2.0, 1.5)
    bit_candidates: tuple[int, ...] = (1, 2, 3)
    constraint_mode: str = "highest_and_second"
    tune_cfg: TuneConfig = TuneConfig()
    single_stage: bool = False          # estimate every budget on the FP model
    router_quant_bits: int | None = None
    calib_from: str = "fp"              # GPTQ layer inputs from Q0 ("fp") or Q' ("estimation")
    group_size: int | None = None
    damp_ratio: float = 0.01
    tune: bool = True
    perturbation_ref: str = "estimation"  # dz against Q' experts ("estimation") or FP experts ("source")

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(float(b) for b in self.budgets))
        object.__setattr__(self, "bit_candidates", tuple(sorted(int(b) for b in self.bit_candidates)))
        if not self.budgets:
            raise ValueError("need at least one budget")
        if any(b >= a for a, b in zip(self.budgets, self.budgets[1:])):
            raise ValueError(f"budgets must be strictly descending, got {list(self.budgets)}")
        lo, hi = self.bit_candidates[0], self.bit_candidates[-1]
        for b in self.budgets:
            if not lo <= b <= hi:
                raise ValueError(f"budget {b} outside the candidate range [{lo}, {hi}]")
        if self.constraint_mode not in MODES:
            raise ValueError(f"unknown constraint mode {self.constraint_mode!r}")
        if self.calib_from not in ("fp", "estimation"):
            raise ValueError("calib_from must be 'fp' or 'estimation'")
        if self.perturbation_ref not in ("source", "estimation"):
            raise ValueError("perturbation_ref must be 'source' or 'estimation'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["budgets"], d["bit_candidates"] = list(self.budgets), list(self.bit_candidates)
        return d


@dataclass
class StageArtifact:
    budget: float
    estimation_tag: str
    table: ImportanceTable
    plan: AllocationPlan
    report: QuantizationReport
    tune: TuneResult
    model: MoeModel                  # Q_k: tuned (and optionally router-quantized)
    metrics: dict = field(default_factory=dict)
    path: Path | None = None

    @property
    def pseudo_model(self) -> MoeModel:
        return self.report.model


def stage_dirname(budget: float) -> str:
    return f"stage_{budget:g}"


def _tag(budget: float) -> str:
    return f"q{budget:g}+rft"


def run(fp_model: MoeModel, calib, plan: PipelinePlan = PipelinePlan(), out_dir=None, *,
        heldout=None, cache: dict | None = None) -> list[StageArtifact]:
    """Quantize ``fp_model`` at every budget of ``plan`` in order.

    ``calib`` are ``(n, T+1)`` calibration windows, ``heldout`` optional
    evaluation windows or text for the stage metrics.  With ``out_dir`` each
    finished stage is persisted before the next one starts.
    """
    calib = np.atleast_2d(calib)
    if fp_model.expert_bits is not None:
        raise ValueError("the pipeline starts from a full-precision model")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    fp_calib = capture_calibration(fp_model, calib)
    fp_cache = {} if cache is None else cache
    manifest = {
        "config": json.loads(fp_model.config.to_json()),
        "seeds": {"model": fp_model.config.seed},
        "calib_hash": calib_digest(calib),
        "plan": plan.to_dict(),
        "stages": [],
    }

    estimation, est_tag = fp_model, "fp"
    stages = []
    for budget in plan.budgets:
        if plan.calib_from == "fp":
            q_calib, q_cache = fp_calib, fp_cache
        else:
            q_calib = fp_calib if estimation is fp_model else capture_calibration(estimation, calib)
            q_cache = fp_cache if estimation is fp_model else {}
        table = build_table(estimation, calib, plan.bit_candidates, source=fp_model, source_calib=q_calib,
                            tag=est_tag, group_size=plan.group_size, damp_ratio=plan.damp_ratio,
                            cache=q_cache, reference=plan.perturbation_ref)
        alloc = plan_for_budget(table, budget, plan.constraint_mode)
        report = apply_allocation(fp_model, alloc.bits, q_calib, group_size=plan.group_size,
                                  damp_ratio=plan.damp_ratio, cache=q_cache)
        pseudo = report.model
        tuned = finetune_routers(pseudo, calib, plan.tune_cfg) if plan.tune else TuneResult(pseudo)
        model = tuned.model
        if plan.router_quant_bits is not None:
            model = quantize_routers(model, plan.router_quant_bits, calib, plan.damp_ratio)

        metrics = _stage_metrics(budget, alloc, est_tag, pseudo, model, estimation, fp_model,
                                 calib, heldout, tuned, report)
        stage = StageArtifact(budget, est_tag, table, alloc, report, tuned, model, metrics)
        if out is not None:
            stage.path = _persist(stage, out)
            manifest["stages"].append({
                "budget": budget,
                "dir": stage.path.name,
                "files": sorted(p.name for p in stage.path.iterdir()),
                "metrics": metrics,
            })
            (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        stages.append(stage)
        log.info("stage %g: bpe %s, calib CE %.4f -> %.4f", budget, metrics["achieved_bpe"],
                 metrics["calib_ce_before_tune"], metrics["calib_ce_after_tune"])
        if not plan.single_stage:
            estimation, est_tag = model, _tag(budget)
    return stages


def _stage_metrics(budget, alloc, est_tag, pseudo, model, estimation, fp_model, calib, heldout,
                   tuned, report) -> dict:
    achieved = alloc.bpe
    if achieved > Fraction(str(budget)):
        raise AssertionError(f"plan spends {achieved} bpe over budget {budget}")
    m = {
        "budget_bpe": budget,
        "achieved_bpe": float(achieved),
        "objective": alloc.objective,
        "estimation_model": est_tag,
        "calib_ce_before_tune": sequence_loss(pseudo, calib),
        "calib_ce_after_tune": sequence_loss(model, calib),
        "tune_steps": len(tuned.losses),
        "tune_diagnostic": tuned.diagnostic,
        "warnings": list(report.warnings),
    }
    if heldout is not None:
        vs_est = router_change_ratio(model, estimation, heldout)
        vs_fp = router_change_ratio(model, fp_model, heldout)
        m.update({
            "heldout_ppl": perplexity(model, heldout),
            "heldout_ppl_untuned": perplexity(pseudo, heldout),
            "change_ratio_vs_estimation": vs_est.slot,
            "change_ratio_vs_estimation_any": vs_est.any_change,
            "change_ratio_vs_fp": vs_fp.slot,
            "change_ratio_vs_fp_any": vs_fp.any_change,
        })
    return m


def _persist(stage: StageArtifact, out: Path) -> Path:
    """Write one stage into a scratch directory, then move it into place."""
    final = out / stage_dirname(stage.budget)
    tmp = out / (final.name + ".partial")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir()
    save_checkpoint(stage.model, tmp / "model.gemq")
    (tmp / "plan.json").write_text(stage.plan.to_json())
    stage.table.to_csv(tmp / "importance.csv")
    (tmp / "metrics.json").write_text(json.dumps(stage.metrics, indent=2, sort_keys=True))
    stage.tune.write_trace(tmp / "losstrace.csv")
    save_packed(pack_model(stage.model, stage.report), tmp / "packed.gemqp")
    shutil.rmtree(final, ignore_errors=True)
    tmp.rename(final)
    return final
