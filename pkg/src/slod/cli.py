"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (one-line diagnostic on stderr),
2 usage error. On success the report path is printed to stdout.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

from . import data as D
from .config import load_config, parse_override
from .errors import SlodError, UsageError
from .experiments import (ExperimentPlan, ReportTable, emit_report, run_distillation_study, run_ls_sweep,
                          run_od_pipeline, run_single, table_from_json, write_reports)
from .metrics import evaluate_checkpoint
from .soft_targets import OEConfig
from .train import LossSpec, finetune_oe, load_checkpoint, save_checkpoint, train_model

SUBCOMMANDS = {
    "train": "train one model (hard or label-smoothing loss)",
    "eval": "evaluate a checkpoint on the configured ID test and OOD sets",
    "sweep-ls": "label-smoothing alpha sweep",
    "oe": "outlier-exposure fine-tune of a baseline",
    "distill": "teacher/student distillation study",
    "od": "baseline -> OE -> outlier distillation pipeline",
    "report": "re-emit a report.json as CSV and JSON",
}


@dataclass
class CommandSpec:
    subcommand: str
    config: Optional[str] = None
    overrides: list = field(default_factory=list)
    out: Optional[str] = None
    ckpt: Optional[str] = None
    input: Optional[str] = None
    verbose: bool = False


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slod", description="Soft-label OOD detection experiments.")
    sub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", required=True)
    for name, help_text in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "report":
            sp.add_argument("--input", required=True, help="report.json to re-emit")
            sp.add_argument("--out", help="output directory (default: alongside the input's parent)")
            continue
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.epochs=1 (repeatable)")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        if name == "eval":
            sp.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
        elif name in ("oe", "distill"):
            sp.add_argument("--ckpt", help="existing baseline/teacher checkpoint (trained if omitted)")
    return p


def parse_args(argv: Optional[Sequence[str]] = None) -> CommandSpec:
    parser = _parser()
    ns = parser.parse_args(argv)
    overrides = []
    for item in getattr(ns, "overrides", []):
        try:
            overrides.append(parse_override(item))
        except UsageError as exc:
            parser.error(str(exc))
    return CommandSpec(subcommand=ns.subcommand, config=getattr(ns, "config", None), overrides=overrides,
                       out=ns.out, ckpt=getattr(ns, "ckpt", None), input=getattr(ns, "input", None),
                       verbose=ns.verbose)


def _config(spec: CommandSpec) -> dict:
    cfg = load_config(spec.config, spec.overrides)
    if spec.out:
        cfg["output"]["dir"] = spec.out
    return cfg


def _finish(table: ReportTable, cfg: dict) -> Path:
    return write_reports(table, cfg["output"]["dir"])


def _cmd_train(spec: CommandSpec) -> Path:
    cfg = _config(spec)
    table, _ = run_single(ExperimentPlan.from_config(cfg, "single"))
    return _finish(table, cfg)


def _cmd_eval(spec: CommandSpec) -> Path:
    ckpt = load_checkpoint(spec.ckpt)
    cfg = _config(spec)
    bundle = D.build_data(cfg["data"])
    if tuple(bundle.id_test.sample_shape) != (ckpt.spec.input_channels, ckpt.spec.input_side, ckpt.spec.input_side):
        raise UsageError(f"{spec.ckpt} expects inputs {ckpt.spec}, data has {bundle.id_test.sample_shape}")
    table = ReportTable()
    table.add(evaluate_checkpoint(ckpt, bundle.id_test, bundle.ood_tests, cfg["experiment"]["ece_bins"], "eval",
                                  "single"))
    return _finish(table, cfg)


def _cmd_sweep(spec: CommandSpec) -> Path:
    cfg = _config(spec)
    return _finish(run_ls_sweep(ExperimentPlan.from_config(cfg, "ls_sweep")), cfg)


def _cmd_oe(spec: CommandSpec) -> Path:
    cfg = _config(spec)
    plan = ExperimentPlan.from_config(cfg, "single")
    bundle = D.build_data(plan.data)
    if bundle.oe_train is None:
        raise UsageError("oe needs data.oe_outliers")
    train_cfg = replace(plan.train, loss=LossSpec("hard"))
    base = load_checkpoint(spec.ckpt) if spec.ckpt else train_model(plan.model_spec(bundle), train_cfg,
                                                                     bundle.id_train)
    oe = finetune_oe(base, bundle.id_train, bundle.oe_train, OEConfig(plan.lam), plan.oe_epochs, train_cfg)
    out = Path(plan.out_dir)
    table = ReportTable()
    for exp, ckpt in (("baseline", base), ("oe", oe)):
        save_checkpoint(ckpt, out / "checkpoints" / f"{exp}_s{train_cfg.seed}.slod")
        table.add(evaluate_checkpoint(ckpt, bundle.id_test, bundle.ood_tests, plan.ece_bins, exp, "single"))
    return _finish(table, cfg)


def _cmd_distill(spec: CommandSpec) -> Path:
    cfg = _config(spec)
    plan = ExperimentPlan.from_config(cfg, "distill_study")
    teacher = load_checkpoint(spec.ckpt) if spec.ckpt else None
    return _finish(run_distillation_study(plan, teacher=teacher), cfg)


def _cmd_od(spec: CommandSpec) -> Path:
    cfg = _config(spec)
    return _finish(run_od_pipeline(ExperimentPlan.from_config(cfg, "od_pipeline")), cfg)


def _cmd_report(spec: CommandSpec) -> Path:
    src = Path(spec.input)
    if not src.exists():
        raise FileNotFoundError(f"report not found: {src}")
    table = table_from_json(src)
    out = Path(spec.out) / "reports" if spec.out else src.parent
    emit_report(table, "json", out / "report.json")
    return emit_report(table, "csv", out / "report.csv")


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "sweep-ls": _cmd_sweep, "oe": _cmd_oe,
            "distill": _cmd_distill, "od": _cmd_od, "report": _cmd_report}


def run(spec: CommandSpec) -> Path:
    return COMMANDS[spec.subcommand](spec)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        spec = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if spec.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        path = run(spec)
    except UsageError as exc:
        print(f"slod: usage error: {exc}", file=sys.stderr)
        return 2
    except (SlodError, OSError, KeyError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"slod: error: {msg}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
