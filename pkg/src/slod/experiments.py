"""End-to-end studies: label-smoothing sweep, teacher/student distillation,
and the baseline -> outlier exposure -> outlier distillation pipeline.

Pipelines only measure and report. Trend judgements live in the acceptance
tests, which read the per-cell medians emitted here.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as D
from .errors import UsageError
from .metrics import MetricsRow, evaluate_checkpoint
from .nn import ModelSpec
from .soft_targets import OEConfig
from .train import Checkpoint, LossSpec, TrainConfig, distill, finetune_oe, save_checkpoint, train_model

log = logging.getLogger(__name__)

CSV_COLUMNS = ["experiment", "study", "checkpoint_hash", "id_dataset", "ood_dataset", "alpha", "lambda",
               "temperature", "seed", "epoch_budget", "accuracy", "ece", "auroc"]
CELL_KEYS = ["experiment", "study", "id_dataset", "ood_dataset", "alpha", "lambda", "temperature"]
METRICS = ["accuracy", "ece", "auroc"]
STUDIES = ("ls_sweep", "distill_study", "od_pipeline", "single")
LOSS_WINDOW = 50


@dataclass
class ExperimentPlan:
    study: str
    data: dict
    train: TrainConfig
    model: dict = field(default_factory=lambda: {"conv_widths": [16, 32], "fc_width": 128})
    alpha_grid: tuple = (0.0,)
    seeds: tuple = (0,)
    name: str = "default"
    temperature: float = 1.0
    lam: float = 0.5
    distill_alpha: float = 0.9
    oe_epochs: int = 2
    distill_epochs: int = 5
    ece_bins: int = 15
    out_dir: Optional[str] = "out"

    def __post_init__(self):
        if self.study not in STUDIES:
            raise UsageError(f"unknown study {self.study!r}")
        if not self.seeds:
            raise UsageError("an experiment plan needs at least one seed")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha_grid):
            raise UsageError(f"alpha grid values must lie in [0, 1]: {list(self.alpha_grid)}")

    @classmethod
    def from_config(cls, cfg: dict, study: str) -> "ExperimentPlan":
        t, lo, ex = cfg["train"], cfg["loss"], cfg["experiment"]
        grid = ex["distill_alpha_grid"] if study == "distill_study" else ex["alpha_grid"]
        if study == "single":
            grid = [lo["alpha"]]
        train = TrainConfig(
            epochs=int(t["epochs"]), batch_size=int(t["batch_size"]), lr0=float(t["lr0"]),
            momentum=float(t["momentum"]), weight_decay=float(t["weight_decay"]), seed=int(t["seed"]),
            flip=bool(t["flip"]),
            loss=LossSpec(lo["kind"] if lo["kind"] in ("hard", "label_smoothing") else "hard", alpha=float(lo["alpha"])),
        )
        return cls(
            study=study, data=dict(cfg["data"]), train=train, model=dict(cfg["model"]),
            alpha_grid=tuple(float(a) for a in grid), seeds=tuple(int(s) for s in ex["seeds"]),
            name=ex["name"], temperature=float(lo["temperature"]), lam=float(lo["lambda"]),
            distill_alpha=float(lo["distill_alpha"]), oe_epochs=int(t["oe_epochs"]),
            distill_epochs=int(t["distill_epochs"]), ece_bins=int(ex["ece_bins"]), out_dir=cfg["output"]["dir"],
        )

    def model_spec(self, bundle: D.DataBundle) -> ModelSpec:
        c, side, _ = bundle.id_train.sample_shape
        return ModelSpec(input_channels=c, input_side=side, num_classes=bundle.num_classes,
                         conv_widths=tuple(self.model["conv_widths"]), fc_width=int(self.model["fc_width"]))


def _cell(row: dict) -> tuple:
    return tuple(row[k] for k in CELL_KEYS)


def _sort_key(row: dict) -> tuple:
    return tuple((0, "") if row[k] is None else (1, row[k]) for k in CELL_KEYS + ["seed"])


@dataclass
class ReportTable:
    rows: list = field(default_factory=list)  # MetricsRow
    extras: dict = field(default_factory=dict)

    def add(self, rows) -> None:
        seen = {(_cell(r.to_dict()), r.seed) for r in self.rows}
        for r in rows:
            key = (_cell(r.to_dict()), r.seed)
            if key in seen:
                raise UsageError(f"duplicate report row for cell {key}")
            seen.add(key)
            self.rows.append(r)

    def dict_rows(self) -> list[dict]:
        out = [{c: r.to_dict()[c] for c in CSV_COLUMNS} for r in self.rows]
        return sorted(out, key=_sort_key)

    def select(self, **match) -> list[dict]:
        return [r for r in self.dict_rows() if all(r[k] == v for k, v in match.items())]

    def median(self, metric: str, **match) -> float:
        vals = [r[metric] for r in self.select(**match) if r[metric] is not None]
        if not vals:
            raise KeyError(f"no {metric} values for {match}")
        return float(statistics.median(vals))

    def aggregates(self) -> dict:
        cells: dict = {}
        for r in self.dict_rows():
            cells.setdefault(_cell(r), []).append(r)
        out = []
        for key in sorted(cells, key=lambda k: _sort_key(dict(zip(CELL_KEYS + ["seed"], k + (None,))))):
            rows = cells[key]
            entry = dict(zip(CELL_KEYS, key))
            entry["n_seeds"] = len(rows)
            for m in METRICS:
                vals = [r[m] for r in rows if r[m] is not None]
                entry[f"median_{m}"] = float(statistics.median(vals)) if vals else None
            out.append(entry)
        agg = {"cells": out}
        agg.update(self.extras)
        return agg


# -- helpers ---------------------------------------------------------------


class _LossTrace:
    def __init__(self):
        self.values: list[float] = []

    def __call__(self, step: int, value: float) -> None:
        self.values.append(value)

    def trend(self) -> dict:
        v = np.asarray(self.values, dtype=np.float64)
        if v.size == 0:
            return {"steps": 0, "start": None, "end": None}
        w = max(1, min(LOSS_WINDOW, v.size // 2 or 1))
        return {"steps": int(v.size), "start": float(v[:w].mean()), "end": float(v[-w:].mean())}


def _persist(plan: ExperimentPlan, ckpt: Checkpoint, name: str) -> None:
    if plan.out_dir is None:
        return
    save_checkpoint(ckpt, Path(plan.out_dir) / "checkpoints" / f"{name}.slod")


def _fmt_alpha(a: float) -> str:
    return f"{a:g}"


def _load(plan: ExperimentPlan, bundle: Optional[D.DataBundle]) -> D.DataBundle:
    return bundle if bundle is not None else D.build_data(plan.data)


# -- studies ---------------------------------------------------------------


def run_single(plan: ExperimentPlan, bundle: Optional[D.DataBundle] = None) -> tuple[ReportTable, Checkpoint]:
    bundle = _load(plan, bundle)
    spec = plan.model_spec(bundle)
    trace = _LossTrace()
    ckpt = train_model(spec, plan.train, bundle.id_train, on_step=trace)
    name = f"train_s{plan.train.seed}"
    _persist(plan, ckpt, name)
    table = ReportTable(extras={"loss_trend": {name: trace.trend()}})
    table.add(evaluate_checkpoint(ckpt, bundle.id_test, bundle.ood_tests, plan.ece_bins, "train", "single"))
    return table, ckpt


def run_ls_sweep(plan: ExperimentPlan, bundle: Optional[D.DataBundle] = None) -> ReportTable:
    """Train one label-smoothed model per (alpha, seed) and evaluate each."""
    if plan.study != "ls_sweep":
        raise UsageError(f"run_ls_sweep needs an ls_sweep plan, got {plan.study!r}")
    bundle = _load(plan, bundle)
    spec = plan.model_spec(bundle)
    table = ReportTable(extras={"loss_trend": {}})
    for alpha in plan.alpha_grid:
        for seed in plan.seeds:
            cfg = replace(plan.train, seed=seed, loss=LossSpec("label_smoothing", alpha=alpha))
            trace = _LossTrace()
            ckpt = train_model(spec, cfg, bundle.id_train, on_step=trace)
            name = f"ls_a{_fmt_alpha(alpha)}_s{seed}"
            _persist(plan, ckpt, name)
            table.extras["loss_trend"][name] = trace.trend()
            table.add(evaluate_checkpoint(ckpt, bundle.id_test, bundle.ood_tests, plan.ece_bins, "ls", "ls_sweep"))
            log.info("ls sweep alpha=%s seed=%s done", alpha, seed)
    # alpha minimizing median ECE over the configured grid
    by_alpha = {a: table.median("ece", alpha=a, ood_dataset=None) for a in plan.alpha_grid}
    table.extras["ece_argmin_alpha"] = min(by_alpha, key=lambda a: (by_alpha[a], a))
    return table


def _pairs(table: ReportTable, teacher_exp: str, student_exp: str, seeds, alphas, oods) -> list[dict]:
    out = []
    for seed in seeds:
        t = {r["ood_dataset"]: r["auroc"] for r in table.select(experiment=teacher_exp, seed=seed) if r["ood_dataset"]}
        for a in alphas:
            s = {r["ood_dataset"]: r["auroc"] for r in table.select(experiment=student_exp, seed=seed, alpha=a)
                 if r["ood_dataset"]}
            for ood in oods:
                out.append({"seed": seed, "alpha": a, "ood_dataset": ood, "teacher_auroc": t[ood],
                            "student_auroc": s[ood], "difference": s[ood] - t[ood]})
    return out


def run_distillation_study(plan: ExperimentPlan, bundle: Optional[D.DataBundle] = None,
                           teacher: Optional[Checkpoint] = None) -> ReportTable:
    """Hard-label teacher per seed, then one distilled student per alpha in the grid.

    A supplied ``teacher`` is reused for every seed instead of training one.
    """
    if plan.study != "distill_study":
        raise UsageError(f"run_distillation_study needs a distill_study plan, got {plan.study!r}")
    bundle = _load(plan, bundle)
    spec = plan.model_spec(bundle)
    table = ReportTable(extras={"loss_trend": {}})
    for seed in plan.seeds:
        cfg = replace(plan.train, seed=seed, loss=LossSpec("hard"))
        if teacher is None:
            trace = _LossTrace()
            t_ckpt = train_model(spec, cfg, bundle.id_train, on_step=trace)
            table.extras["loss_trend"][f"teacher_s{seed}"] = trace.trend()
        else:
            t_ckpt = teacher
        _persist(plan, t_ckpt, f"teacher_s{seed}")
        table.add(evaluate_checkpoint(t_ckpt, bundle.id_test, bundle.ood_tests, plan.ece_bins, "teacher",
                                      "distill_study"))
        for alpha in plan.alpha_grid:
            trace = _LossTrace()
            s_ckpt = distill(t_ckpt, bundle.id_train, alpha, plan.temperature,
                             replace(cfg, epochs=plan.distill_epochs), on_step=trace)
            name = f"student_a{_fmt_alpha(alpha)}_s{seed}"
            _persist(plan, s_ckpt, name)
            table.extras["loss_trend"][name] = trace.trend()
            table.add(evaluate_checkpoint(s_ckpt, bundle.id_test, bundle.ood_tests, plan.ece_bins, "student",
                                          "distill_study"))
    table.extras["paired_differences"] = _pairs(table, "teacher", "student", plan.seeds, plan.alpha_grid,
                                                list(bundle.ood_tests))
    return table


def run_od_pipeline(plan: ExperimentPlan, bundle: Optional[D.DataBundle] = None) -> ReportTable:
    """Baseline -> outlier-exposure teacher -> student distilled on ID data only."""
    if plan.study != "od_pipeline":
        raise UsageError(f"run_od_pipeline needs an od_pipeline plan, got {plan.study!r}")
    bundle = _load(plan, bundle)
    if bundle.oe_train is None:
        raise UsageError("od pipeline needs OE outliers (data.oe_outliers)")
    spec = plan.model_spec(bundle)
    table = ReportTable(extras={"loss_trend": {}, "od_ood_draws": {}, "chain": {}})
    for seed in plan.seeds:
        cfg = replace(plan.train, seed=seed, loss=LossSpec("hard"))
        trace = _LossTrace()
        base = train_model(spec, cfg, bundle.id_train, on_step=trace)
        table.extras["loss_trend"][f"baseline_s{seed}"] = trace.trend()

        trace = _LossTrace()
        oe = finetune_oe(base, bundle.id_train, bundle.oe_train, OEConfig(plan.lam), plan.oe_epochs, cfg,
                         on_step=trace)
        table.extras["loss_trend"][f"oe_s{seed}"] = trace.trend()

        trace = _LossTrace()
        draws_before = D.BATCH_DRAWS[D.OUT_OF_DISTRIBUTION]
        od = distill(oe, bundle.id_train, plan.distill_alpha, plan.temperature,
                     replace(cfg, epochs=plan.distill_epochs), on_step=trace)
        table.extras["od_ood_draws"][str(seed)] = D.BATCH_DRAWS[D.OUT_OF_DISTRIBUTION] - draws_before
        table.extras["loss_trend"][f"od_s{seed}"] = trace.trend()

        for exp, ckpt in (("baseline", base), ("oe", oe), ("od", od)):
            _persist(plan, ckpt, f"{exp}_s{seed}")
            table.add(evaluate_checkpoint(ckpt, bundle.id_test, bundle.ood_tests, plan.ece_bins, exp,
                                          "od_pipeline"))
        table.extras["chain"][str(seed)] = {"od": od.hash, "od_parent": od.provenance["parent"],
                                            "oe": oe.hash, "oe_parent": oe.provenance["parent"],
                                            "baseline": base.hash}
    acc = {e: table.median("accuracy", experiment=e, ood_dataset=None) for e in ("baseline", "oe", "od")}
    table.extras["accuracy_delta"] = {"oe_minus_baseline": acc["oe"] - acc["baseline"],
                                      "od_minus_oe": acc["od"] - acc["oe"],
                                      "od_minus_baseline": acc["od"] - acc["baseline"]}
    table.extras["paired_differences"] = _pairs(table, "oe", "od", plan.seeds, [plan.distill_alpha],
                                                list(bundle.ood_tests))
    return table


# -- reports ---------------------------------------------------------------


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_csv(table: ReportTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in table.dict_rows():
        w.writerow([_csv_value(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def render_json(table: ReportTable) -> str:
    doc = {"schema_version": 1, "rows": table.dict_rows(), "aggregates": table.aggregates()}
    return json.dumps(doc, indent=2) + "\n"


def emit_report(table: ReportTable, fmt: str, path) -> Path:
    if not table.rows:
        raise UsageError("refusing to emit an empty report")
    if fmt == "csv":
        text = render_csv(table)
    elif fmt == "json":
        text = render_json(table)
    else:
        raise UsageError(f"unknown report format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def write_reports(table: ReportTable, out_dir) -> Path:
    """``<out>/reports/report.csv`` and ``report.json``; returns the CSV path."""
    reports = Path(out_dir) / "reports"
    emit_report(table, "json", reports / "report.json")
    return emit_report(table, "csv", reports / "report.csv")


def table_from_json(path) -> ReportTable:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema_version") != 1:
        raise UsageError(f"{path}: unsupported report schema {doc.get('schema_version')!r}")
    table = ReportTable(extras={k: v for k, v in doc.get("aggregates", {}).items() if k != "cells"})
    for r in doc["rows"]:
        d = dict(r)
        d["lam"] = d.pop("lambda")
        table.rows.append(MetricsRow(**d))
    return table
