import csv
import io
import json
import random

import pytest

from slod import data as D
from slod.config import load_config
from slod.errors import UsageError
from slod.experiments import (
    CSV_COLUMNS,
    ExperimentPlan,
    ReportTable,
    emit_report,
    render_csv,
    run_distillation_study,
    run_ls_sweep,
    run_od_pipeline,
    run_single,
    table_from_json,
    write_reports,
)
from slod.metrics import MetricsRow
from slod.train import load_checkpoint

MICRO = [
    ("data.id_dataset", "digits"),
    ("data.ood_test", ["uniform", "gaussian"]),
    ("data.oe_outliers", ["uniform"]),
    ("data.train_limit", 200),
    ("data.test_limit", 100),
    ("data.ood_limit", 100),
    ("data.oe_limit", 200),
    ("model.conv_widths", [4, 8]),
    ("model.fc_width", 16),
    ("train.epochs", 1),
    ("train.oe_epochs", 1),
    ("train.distill_epochs", 1),
    ("train.batch_size", 64),
    ("experiment.seeds", [0, 1]),
]


def micro_cfg(out, *extra):
    return load_config(None, MICRO + [("output.dir", str(out))] + list(extra))


@pytest.fixture(scope="module")
def bundle():
    return D.build_data(load_config(None, MICRO)["data"])


@pytest.fixture(scope="module")
def od_table(tmp_path_factory, bundle):
    out = tmp_path_factory.mktemp("od")
    table = run_od_pipeline(ExperimentPlan.from_config(micro_cfg(out), "od_pipeline"), bundle)
    return table, out


def test_plan_validation():
    cfg = load_config(None, MICRO)
    with pytest.raises(UsageError):
        ExperimentPlan.from_config(cfg, "grid_search")
    with pytest.raises(UsageError):
        ExperimentPlan.from_config(load_config(None, [("experiment.seeds", [])]), "ls_sweep")
    with pytest.raises(UsageError):
        ExperimentPlan.from_config(load_config(None, [("experiment.alpha_grid", [0.5, 1.2])]), "ls_sweep")


def test_plan_picks_distill_grid():
    cfg = load_config(None, MICRO)
    assert ExperimentPlan.from_config(cfg, "distill_study").alpha_grid == (0.5, 0.9, 1.0)
    assert ExperimentPlan.from_config(cfg, "ls_sweep").alpha_grid == (0.0, 0.001, 0.01, 0.05, 0.1, 0.2, 0.3)


def test_ls_sweep_cardinality_and_alpha_column(tmp_path, bundle):
    cfg = micro_cfg(tmp_path, ("experiment.seeds", [0, 1, 2]))
    plan = ExperimentPlan.from_config(cfg, "ls_sweep")
    table = run_ls_sweep(plan, bundle)
    n_runs = len(plan.alpha_grid) * 3
    assert n_runs == 21
    assert len(table.rows) == n_runs * (1 + len(bundle.ood_tests))
    assert sorted({r["alpha"] for r in table.dict_rows()}) == sorted(plan.alpha_grid)
    assert len(list((tmp_path / "checkpoints").glob("*.slod"))) == n_runs
    assert table.extras["ece_argmin_alpha"] in plan.alpha_grid
    for row in table.dict_rows():
        assert load_checkpoint(tmp_path / "checkpoints" / f"ls_a{row['alpha']:g}_s{row['seed']}.slod").hash \
            == row["checkpoint_hash"]


def test_ls_sweep_alpha_zero_is_baseline(tmp_path, bundle):
    plan = ExperimentPlan.from_config(micro_cfg(tmp_path, ("experiment.alpha_grid", [0.0]),
                                                ("experiment.seeds", [0])), "ls_sweep")
    sweep = run_ls_sweep(plan, bundle)
    single, ckpt = run_single(ExperimentPlan.from_config(micro_cfg(tmp_path / "single"), "single"), bundle)
    base_rows = single.dict_rows()
    sweep_rows = sweep.dict_rows()
    assert [r["auroc"] for r in sweep_rows] == [r["auroc"] for r in base_rows]
    assert sweep_rows[0]["accuracy"] == base_rows[0]["accuracy"]


def test_distillation_study_schema(tmp_path, bundle):
    plan = ExperimentPlan.from_config(micro_cfg(tmp_path, ("experiment.seeds", [0])), "distill_study")
    table = run_distillation_study(plan, bundle)
    teacher = table.select(experiment="teacher")
    students = table.select(experiment="student")
    assert len(students) == 3 * len(teacher)
    assert len([r for r in students if r["ood_dataset"] is None]) == 3
    pairs = table.extras["paired_differences"]
    assert len(pairs) == 3 * len(bundle.ood_tests)
    for p in pairs:
        assert p["difference"] == pytest.approx(p["student_auroc"] - p["teacher_auroc"], abs=0)
        assert p["student_auroc"] == table.select(experiment="student", alpha=p["alpha"],
                                                  ood_dataset=p["ood_dataset"])[0]["auroc"]


def test_od_pipeline_rows_and_chain(od_table, bundle):
    table, _ = od_table
    per_seed = 3 * (1 + len(bundle.ood_tests))
    assert len(table.rows) == 2 * per_seed
    for seed, chain in table.extras["chain"].items():
        assert chain["od_parent"] == chain["oe"]
        assert chain["oe_parent"] == chain["baseline"]
        hashes = {r["experiment"]: r["checkpoint_hash"] for r in table.select(seed=int(seed))}
        assert hashes == {"baseline": chain["baseline"], "oe": chain["oe"], "od": chain["od"]}


def test_od_pipeline_student_sees_no_ood(od_table):
    table, _ = od_table
    assert table.extras["od_ood_draws"] == {"0": 0, "1": 0}


def test_od_pipeline_reports_trends(od_table):
    table, _ = od_table
    assert set(table.extras["accuracy_delta"]) == {"oe_minus_baseline", "od_minus_oe", "od_minus_baseline"}
    assert set(table.extras["loss_trend"]) == {f"{e}_s{s}" for e in ("baseline", "oe", "od") for s in (0, 1)}


def test_od_pipeline_needs_outliers(tmp_path):
    cfg = micro_cfg(tmp_path, ("data.oe_outliers", []))
    bundle = D.build_data(cfg["data"])
    with pytest.raises(UsageError, match="oe_outliers"):
        run_od_pipeline(ExperimentPlan.from_config(cfg, "od_pipeline"), bundle)


def test_study_kind_checked(tmp_path, bundle):
    with pytest.raises(UsageError):
        run_ls_sweep(ExperimentPlan.from_config(micro_cfg(tmp_path), "od_pipeline"), bundle)


# -- reports ---------------------------------------------------------------


def test_emit_byte_stable(tmp_path, od_table):
    table, _ = od_table
    for fmt in ("csv", "json"):
        a = emit_report(table, fmt, tmp_path / f"a.{fmt}").read_bytes()
        b = emit_report(table, fmt, tmp_path / f"b.{fmt}").read_bytes()
        assert a == b


def test_csv_header_and_rows(od_table):
    table, _ = od_table
    text = render_csv(table)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert text.splitlines()[0] == ("experiment,study,checkpoint_hash,id_dataset,ood_dataset,alpha,lambda,"
                                    "temperature,seed,epoch_budget,accuracy,ece,auroc")
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == len(table.rows)
    oe_row = next(r for r in rows if r["experiment"] == "oe")
    assert float(oe_row["lambda"]) == 0.5 and oe_row["alpha"] == ""


def test_json_round_trip(tmp_path, od_table):
    table, _ = od_table
    path = emit_report(table, "json", tmp_path / "r.json")
    doc = json.loads(path.read_text())
    assert doc["schema_version"] == 1
    assert doc["rows"] == table.dict_rows()
    assert all(list(r) == CSV_COLUMNS for r in doc["rows"])
    back = table_from_json(path)
    assert back.dict_rows() == table.dict_rows()
    assert render_csv(back) == render_csv(table)


def test_write_reports_layout(tmp_path, od_table):
    table, _ = od_table
    csv_path = write_reports(table, tmp_path)
    assert csv_path == tmp_path / "reports" / "report.csv"
    assert (tmp_path / "reports" / "report.json").exists()


def test_empty_report_rejected(tmp_path):
    with pytest.raises(UsageError):
        emit_report(ReportTable(), "csv", tmp_path / "x.csv")
    with pytest.raises(UsageError):
        emit_report(ReportTable([MetricsRow(experiment="x")]), "xml", tmp_path / "x.xml")


def test_aggregates_invariant_to_seed_order(od_table):
    table, _ = od_table
    shuffled = list(table.rows)
    random.Random(0).shuffle(shuffled)
    other = ReportTable(extras=dict(table.extras))
    other.add(shuffled)
    assert other.aggregates() == table.aggregates()
    assert render_csv(other) == render_csv(table)


def test_duplicate_cell_seed_rejected():
    table = ReportTable()
    table.add([MetricsRow(experiment="x", seed=0, accuracy=0.5)])
    with pytest.raises(UsageError, match="duplicate"):
        table.add([MetricsRow(experiment="x", seed=0, accuracy=0.6)])
    table.add([MetricsRow(experiment="x", seed=1, accuracy=0.7)])
    assert table.median("accuracy", experiment="x") == pytest.approx(0.6)
