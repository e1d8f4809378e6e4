"""Command-line entry point: ``gemq <command> [options]``.

Every command accepts ``--config FILE`` (JSON, see :data:`DEFAULTS` for the
schema) plus flag overrides.  Failures exit nonzero with a one-line JSON
error object on stderr.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import packed as packed_mod
from .allocator import MODES, AllocationPlan, plan_for_budget
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Alphabet, builtin_corpus, calibration_windows, split_corpus, tiled_windows
from .errors import GemqError
from .evaluation import EvalReport, bit_histogram, cross_entropy_of, perplexity, router_change_ratio
from .importance import ImportanceTable, build_table
from .model import MoeConfig, TrainConfig, train
from .pipeline import MANIFEST, PipelinePlan, run
from .quantizer import apply_allocation, capture_calibration
from .router_tune import TuneConfig, finetune_routers, quantize_routers

log = logging.getLogger("gemq")

DEFAULTS = {
    "corpus": {"path": None, "n_chars": 110_000, "heldout_fraction": 0.1},
    "model": {"d_model": 32, "d_hidden": 64, "n_layers": 4, "n_experts": 8, "top_k": 2,
              "seq_len": 64, "seed": 0},
    "train": {"max_steps": 2000, "batch_size": 16, "lr": 3e-3},
    "calib": {"n_sequences": 128, "seed": 0, "path": None},
    "quant": {"bits": [1, 2, 3], "constraint_mode": "highest_and_second", "budget": 2.0,
              "group_size": None, "damp_ratio": 0.01},
    "tune": {"learning_rate": 1e-4, "weight_decay": 1e-4, "epochs": 1},
    "pipeline": {"budgets": [2.5, 2.0, 1.5], "single_stage": False, "router_quant_bits": None,
                 "calib_from": "fp", "perturbation_ref": "estimation"},
    "run_dir": "run",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------- config


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise UsageError(f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


def _csv_list(text: str, cast):
    try:
        return [cast(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse list {text!r}") from exc


def load_config(args) -> dict:
    cfg = DEFAULTS
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = _merge(DEFAULTS, user)
    cfg = copy.deepcopy(cfg)
    if args.seed is not None:
        cfg["model"]["seed"] = cfg["calib"]["seed"] = args.seed
    if args.budget is not None:
        cfg["quant"]["budget"] = args.budget
    if args.budgets is not None:
        cfg["pipeline"]["budgets"] = _csv_list(args.budgets, float)
    if args.bits is not None:
        cfg["quant"]["bits"] = _csv_list(args.bits, int)
    if args.constraint_mode is not None:
        cfg["quant"]["constraint_mode"] = args.constraint_mode
    if args.calib is not None:
        cfg["calib"]["path"] = args.calib
    if args.single_stage:
        cfg["pipeline"]["single_stage"] = True
    return cfg


def _corpus(cfg) -> tuple[str, str]:
    c = cfg["corpus"]
    text = Path(c["path"]).read_text() if c["path"] else builtin_corpus(c["n_chars"])
    return split_corpus(text, c["heldout_fraction"])


def _calib_windows(cfg, model) -> np.ndarray:
    c = cfg["calib"]
    text = Path(c["path"]).read_text() if c["path"] else _corpus(cfg)[0]
    return calibration_windows(model.alphabet.encode(text), c["n_sequences"], model.config.seq_len, c["seed"])


def _heldout(cfg, model) -> np.ndarray:
    return tiled_windows(model.alphabet.encode(_corpus(cfg)[1]), model.config.seq_len)


def _tune_cfg(cfg) -> TuneConfig:
    return TuneConfig(**cfg["tune"])


def _train_model(cfg):
    train_text, heldout = _corpus(cfg)
    alphabet = Alphabet.from_text(train_text + heldout)
    mcfg = MoeConfig(vocab_size=alphabet.size, **cfg["model"])
    return train(mcfg, train_text, TrainConfig(**cfg["train"]), alphabet)


def _load_any(path):
    """Dense checkpoint or packed file, chosen by magic."""
    data = Path(path).read_bytes()
    if data.startswith(packed_mod.MAGIC):
        return packed_mod.loads(data)
    return load_checkpoint(path)


def _emit(obj, out=None):
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text)
    else:
        print(text)


# --------------------------------------------------------------------------- commands


def cmd_train(args, cfg):
    model = _train_model(cfg)
    save_checkpoint(model, args.out)
    _emit({"model": str(args.out), "heldout_ppl": perplexity(model, _heldout(cfg, model))})


def cmd_importance(args, cfg):
    fp = load_checkpoint(args.model)
    est = load_checkpoint(args.estimation, fp.config) if args.estimation else fp
    calib = _calib_windows(cfg, fp)
    q = cfg["quant"]
    table = build_table(est, calib, q["bits"], source=fp, source_calib=capture_calibration(fp, calib),
                        tag=args.tag or ("fp" if est is fp else Path(args.estimation).stem),
                        group_size=q["group_size"], damp_ratio=q["damp_ratio"],
                        reference=cfg["pipeline"]["perturbation_ref"])
    table.to_csv(args.out)
    _emit({"importance": str(args.out), "unobserved": int((~table.observed).sum())})


def cmd_allocate(args, cfg):
    table = ImportanceTable.from_csv(args.importance)
    q = cfg["quant"]
    if tuple(q["bits"]) != table.bits and args.bits is not None:
        raise UsageError(f"--bits {q['bits']} does not match the table's bits {list(table.bits)}")
    plan = plan_for_budget(table, q["budget"], q["constraint_mode"])
    _emit(plan.to_json(), args.out)


def _quantize(cfg, fp, plan):
    q = cfg["quant"]
    calib = _calib_windows(cfg, fp)
    return apply_allocation(fp, plan.bits, capture_calibration(fp, calib),
                            group_size=q["group_size"], damp_ratio=q["damp_ratio"])


def cmd_quantize(args, cfg):
    fp = load_checkpoint(args.model)
    plan = AllocationPlan.from_json(Path(args.plan).read_text())
    report = _quantize(cfg, fp, plan)
    save_checkpoint(report.model, args.out)
    _emit({"model": str(args.out), "bpe": float(plan.bpe), "warnings": report.warnings})


def cmd_tune(args, cfg):
    model = load_checkpoint(args.model)
    calib = _calib_windows(cfg, model)
    result = finetune_routers(model, calib, _tune_cfg(cfg))
    tuned = result.model
    if cfg["pipeline"]["router_quant_bits"] is not None:
        tuned = quantize_routers(tuned, cfg["pipeline"]["router_quant_bits"], calib, cfg["quant"]["damp_ratio"])
    save_checkpoint(tuned, args.out)
    if args.trace:
        result.write_trace(args.trace)
    _emit({"model": str(args.out), "steps": len(result.losses), "diagnostic": result.diagnostic,
           "first_loss": result.losses[0] if result.losses else None,
           "last_loss": result.losses[-1] if result.losses else None})


def cmd_pipeline(args, cfg):
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    run_dir = Path(args.run_dir) if args.run_dir else Path(cfg["run_dir"]) / stamp
    run_dir.mkdir(parents=True, exist_ok=True)
    if args.model:
        fp = load_checkpoint(args.model)
    else:
        fp = _train_model(cfg)
    save_checkpoint(fp, run_dir / "fp.gemq")
    p, q = cfg["pipeline"], cfg["quant"]
    plan = PipelinePlan(budgets=tuple(p["budgets"]), bit_candidates=tuple(q["bits"]),
                        constraint_mode=q["constraint_mode"], tune_cfg=_tune_cfg(cfg),
                        single_stage=p["single_stage"], router_quant_bits=p["router_quant_bits"],
                        calib_from=p["calib_from"], perturbation_ref=p["perturbation_ref"],
                        group_size=q["group_size"], damp_ratio=q["damp_ratio"])
    stages = run(fp, _calib_windows(cfg, fp), plan, run_dir, heldout=_heldout(cfg, fp))
    _emit({"run_dir": str(run_dir), "manifest": str(run_dir / MANIFEST),
           "stages": [s.path.name for s in stages]})


def cmd_pack(args, cfg):
    fp = load_checkpoint(args.model)
    plan = AllocationPlan.from_json(Path(args.plan).read_text())
    report = _quantize(cfg, fp, plan)
    base = report.model
    if args.routers_from:
        tuned = load_checkpoint(args.routers_from, fp.config)
        base = base.with_params({k: v for k, v in tuned.params().items() if k.endswith("router_w")})
    pm = packed_mod.pack_model(base, report)
    packed_mod.save_packed(pm, args.out, args.f32_scales)
    _emit({"packed": str(args.out), **packed_mod.size_report(pm, args.f32_scales)})


def cmd_eval(args, cfg):
    model = _load_any(args.model)
    dense = model.to_model() if hasattr(model, "to_model") else model
    heldout = _heldout(cfg, dense)
    calib = _calib_windows(cfg, dense)
    report = EvalReport(
        perplexity={"heldout": perplexity(model, heldout)},
        calib_ce=cross_entropy_of(model, calib),
        bit_histogram=bit_histogram(dense.expert_bits, dense.config.n_experts) if dense.expert_bits else [],
        model_size_bytes=Path(args.model).stat().st_size,
    )
    if args.reference:
        ratio = router_change_ratio(model, _load_any(args.reference), heldout)
        report.router_change_ratio, report.router_change_any = ratio.slot, ratio.any_change
    _emit(report.to_dict(), args.out)


def cmd_report(args, cfg):
    run_dir = Path(args.run_dir)
    manifest = json.loads((run_dir / MANIFEST).read_text())
    rows_ppl, rows_hist, rows_cr = [], [], []
    for stage in manifest["stages"]:
        d = run_dir / stage["dir"]
        m = json.loads((d / "metrics.json").read_text())
        plan = AllocationPlan.from_json((d / "plan.json").read_text())
        rows_ppl.append([m["budget_bpe"], m["achieved_bpe"], m.get("heldout_ppl"),
                         m.get("heldout_ppl_untuned"), m["calib_ce_before_tune"], m["calib_ce_after_tune"]])
        for layer, hist in enumerate(plan.histogram()):
            for bit, count in hist.items():
                rows_hist.append([m["budget_bpe"], layer, bit, count])
        rows_cr.append([m["budget_bpe"], m["estimation_model"], m.get("change_ratio_vs_estimation"),
                        m.get("change_ratio_vs_estimation_any"), m.get("change_ratio_vs_fp"),
                        m.get("change_ratio_vs_fp_any")])
    tables = {
        "ppl_vs_bpe.csv": (["budget_bpe", "achieved_bpe", "heldout_ppl", "heldout_ppl_untuned",
                            "calib_ce_before_tune", "calib_ce_after_tune"], rows_ppl),
        "bit_histogram.csv": (["budget_bpe", "layer", "bit", "count"], rows_hist),
        "change_ratio.csv": (["budget_bpe", "estimation_model", "vs_estimation", "vs_estimation_any",
                              "vs_fp", "vs_fp_any"], rows_cr),
    }
    for name, (header, rows) in tables.items():
        with open(run_dir / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    _emit({"reports": sorted(str(run_dir / n) for n in tables)})


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--budget", type=float, help="target bits per expert")
    common.add_argument("--budgets", help="comma-separated descending budgets, e.g. 2.5,2.0,1.5")
    common.add_argument("--bits", help="comma-separated candidate bit-widths")
    common.add_argument("--constraint-mode", choices=MODES)
    common.add_argument("--calib", help="text file to draw calibration sequences from")
    common.add_argument("--single-stage", action="store_true", help="estimate every budget on the FP model")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="gemq", description="Expert-level mixed-precision quantization of toy MoE models")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train a full-precision toy model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("importance", parents=[common], help="build the importance table")
    p.add_argument("--model", required=True, help="full-precision checkpoint")
    p.add_argument("--estimation", help="checkpoint to estimate at (default: the FP model)")
    p.add_argument("--tag")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("allocate", parents=[common], help="solve the bit allocation")
    p.add_argument("importance")
    p.add_argument("--out")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("quantize", parents=[common], help="apply a plan with GPTQ")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("tune-routers", parents=[common], help="fine-tune routers of a quantized model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("pipeline", parents=[common], help="progressive quantization over all budgets")
    p.add_argument("--model", help="FP checkpoint (default: train one from the config)")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("pack", parents=[common], help="write the packed low-bit file")
    p.add_argument("--model", required=True, help="full-precision checkpoint")
    p.add_argument("--plan", required=True)
    p.add_argument("--routers-from", help="checkpoint whose routers replace the FP ones")
    p.add_argument("--f32-scales", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("eval", parents=[common], help="perplexity and routing metrics")
    p.add_argument("--model", required=True, help=".gemq or .gemqp file")
    p.add_argument("--reference", help="model to compare routing against")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="CSV reports of a pipeline run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args)
        args.func(args, cfg)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except (TypeError, KeyError) as exc:
        return _fail("config", str(exc), 2)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc), 2)
    except (GemqError, ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
