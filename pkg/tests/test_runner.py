import dataclasses
import json

import numpy as np
import pytest

from protopatch import (
    ExperimentConfig,
    GridSpec,
    ResultRow,
    aggregate,
    apply_budget,
    export_results_csv,
    load_results,
    render_table,
    run_cell,
    run_grid,
    summarize_rows,
)
from protopatch.runner import append_result

from conftest import RandomPatchSource, flat_manifest
from reference_grids import GRID_ACCURACIES


def _manifest_store(per_class_train=30, per_class_test=10):
    manifest = flat_manifest(per_class_train, per_class_test, n_classes=6)
    source = RandomPatchSource(size=64, class_shift=2.0)
    return {"SUR": (manifest, source)}


def _grid(**overrides):
    defaults = dict(
        views=("SUR",), backbones=("tiny_test_cnn",), shots=(1, 2, 3, 4),
        budgets=(1.0, 0.75, 0.5, 0.25), seed=5, n_way=6, n_query=1,
        train_iterations=1, eval_episodes=2, learning_rate=1e-4,
    )
    defaults.update(overrides)
    return GridSpec(**defaults)


# ---------------------------------------------------------------------------
# grid execution


def test_grid_sixteen_cells(tmp_path):
    out = tmp_path / "results.jsonl"
    rows = run_grid(_grid(), _manifest_store(), out_path=out)
    assert len(rows) == 16
    assert all(r.status == "ok" for r in rows)
    assert len({r.config_hash for r in rows}) == 16
    persisted = load_results(out)
    assert len(persisted) == 16


def test_grid_resume_skips_completed_cells(tmp_path):
    out = tmp_path / "results.jsonl"
    rows = run_grid(_grid(), _manifest_store(), out_path=out)
    # simulate an interruption after cell 7
    lines = out.read_text().splitlines()
    out.write_text("\n".join(lines[:7]) + "\n")
    new_rows = run_grid(_grid(), _manifest_store(), out_path=out, resume=True)
    assert len(new_rows) == 9
    assert len(load_results(out)) == 16
    done = {r.config_hash for r in rows}
    assert {r.config_hash for r in load_results(out)} == done


def test_grid_empty_axis_is_validation_error():
    with pytest.raises(ValueError, match="shots"):
        _grid(shots=())


def test_grid_missing_manifest_is_error(tmp_path):
    grid = _grid(views=("SUR", "SEC"))
    with pytest.raises(ValueError, match="SEC"):
        run_grid(grid, _manifest_store(), out_path=tmp_path / "r.jsonl")


def test_failed_cells_are_recorded_and_grid_continues(tmp_path):
    out = tmp_path / "results.jsonl"
    grid = _grid(shots=(2, 50))  # 50-shot episodes cannot be sampled
    rows = run_grid(grid, _manifest_store(), out_path=out)
    assert len(rows) == 8
    failed = [r for r in rows if r.status == "failed"]
    ok = [r for r in rows if r.status == "ok"]
    assert len(failed) == 4 and len(ok) == 4
    assert all("patches" in r.reason for r in failed)
    # failed cells are retried on resume
    retried = run_grid(grid, _manifest_store(), out_path=out, resume=True)
    assert len(retried) == 4


def test_cell_determinism():
    (manifest, source), = _manifest_store().values()
    config = ExperimentConfig(view="SUR", backbone="tiny_test_cnn", n_way=6,
                              k_shot=2, n_query=2, budget_fraction=0.5, seed=3,
                              train_iterations=2, eval_episodes=3)
    a = run_cell(config, manifest, source)
    b = run_cell(config, manifest, source)
    assert a.status == b.status == "ok"
    assert a.metrics == b.metrics
    assert a.run_id != b.run_id  # re-runs stay distinguishable


def test_prototypical_and_baseline_share_budget_selection():
    (manifest, source), = _manifest_store().values()
    proto = ExperimentConfig(view="SUR", backbone="tiny_test_cnn", k_shot=2,
                             budget_fraction=0.5, seed=7, mode="prototypical")
    base = ExperimentConfig(view="SUR", backbone="tiny_test_cnn", k_shot=0,
                            budget_fraction=0.5, seed=7, mode="baseline")
    assert proto.config_hash() != base.config_hash()
    assert proto.budget_seed() == base.budget_seed()
    ids_a = apply_budget(manifest, 0.5, proto.budget_seed()).selected_patch_ids
    ids_b = apply_budget(manifest, 0.5, base.budget_seed()).selected_patch_ids
    assert hash(ids_a) == hash(ids_b) and ids_a == ids_b


def test_baseline_cell_runs_and_reports_steps():
    (manifest, source), = _manifest_store().values()
    config = ExperimentConfig(view="SUR", backbone="tiny_test_cnn", k_shot=0,
                              budget_fraction=1.0, seed=1, mode="baseline",
                              train_iterations=6)
    row = run_cell(config, manifest, source)
    assert row.status == "ok", row.reason
    assert row.extra["optimizer_steps"] > 0
    assert row.extra["n_test"] == 60
    assert row.metrics["accuracy"]["std"] is None


def test_view_mismatch_is_error():
    (manifest, source), = _manifest_store().values()
    config = ExperimentConfig(view="SEC", backbone="tiny_test_cnn")
    with pytest.raises(ValueError, match="view"):
        run_cell(config, manifest, source)


# ---------------------------------------------------------------------------
# persistence


def test_result_row_round_trip(tmp_path):
    config = ExperimentConfig(view="MIX", backbone="resnet34", k_shot=15,
                              budget_fraction=0.75, seed=11)
    row = ResultRow(
        config=config, config_hash=config.config_hash(), status="ok",
        metrics={"accuracy": {"mean": 0.8875, "std": 0.0123}},
        wall_time=1.25, run_id="abc", extra={"note": 1},
    )
    path = tmp_path / "rows.jsonl"
    append_result(path, row)
    loaded = load_results(path)[0]
    assert loaded == row


def test_csv_export(tmp_path):
    config = ExperimentConfig(view="SUR", backbone="tiny_test_cnn")
    row = ResultRow(config=config, config_hash=config.config_hash(), status="ok",
                    metrics={"accuracy": {"mean": 0.5, "std": 0.01}})
    path = tmp_path / "rows.csv"
    export_results_csv([row], path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    header = lines[0].split(",")
    values = lines[1].split(",")
    assert dict(zip(header, values))["accuracy_mean"] == "0.5"
    assert dict(zip(header, values))["status"] == "ok"


# ---------------------------------------------------------------------------
# table rendering


def _synthetic_rows(view="SUR", backbone="resnet34", grid=None, mode="prototypical"):
    """ResultRows carrying the given accuracy grid (percent values)."""
    grid = GRID_ACCURACIES[view] if grid is None else grid
    shots = (5, 10, 15, 20)
    budgets = (1.0, 0.75, 0.5, 0.25)
    rows = []
    i = 0
    for shot in shots:
        for budget in budgets:
            config = ExperimentConfig(view=view, backbone=backbone, k_shot=shot,
                                      budget_fraction=budget, mode=mode)
            rows.append(ResultRow(
                config=config, config_hash=config.config_hash(), status="ok",
                metrics={name: {"mean": grid[i] / 100.0, "std": 0.0}
                         for name in ("accuracy", "precision_macro",
                                      "recall_macro", "f1_macro")},
            ))
            i += 1
    return rows


def test_summary_reproduces_aggregate_per_group():
    rows = _synthetic_rows("SUR") + _synthetic_rows("SEC") + _synthetic_rows("MIX")
    summaries = summarize_rows(rows)
    for view in ("SUR", "SEC", "MIX"):
        expected = aggregate(GRID_ACCURACIES[view])
        got = summaries[(view, "resnet34")]["accuracy"]
        assert abs(got.mean - expected.mean) < 1e-9
        assert abs(got.std - expected.std) < 1e-9
    text = render_table(rows, layout="backbone_summary")
    assert "86.65±2.22" in text
    assert "92.86±1.93" in text
    assert "87.98±1.76" in text


def test_detailed_marks_best_cell_per_budget_column():
    rows = _synthetic_rows("SUR")
    text = render_table(rows, layout="detailed")
    # 25% budget column: {84.85, 88.77, 88.08, 87.88} -> 88.77 marked
    assert "*88.77*" in text
    assert "*84.85*" not in text
    # 100% column best is 89.92
    assert "*89.92*" in text


def test_detailed_single_row_table():
    config = ExperimentConfig(view="SUR", backbone="tiny_test_cnn", k_shot=5,
                              budget_fraction=1.0)
    row = ResultRow(config=config, config_hash=config.config_hash(), status="ok",
                    metrics={"accuracy": {"mean": 0.5, "std": 0.0}})
    text = render_table([row], layout="detailed")
    lines = text.splitlines()
    assert len(lines) == 3  # header, rule, one body row
    assert "*50.00*" in lines[2]


def test_detailed_missing_cells_render_placeholders(caplog):
    rows = _synthetic_rows("SUR")[:-1]  # drop one cell
    with caplog.at_level("WARNING"):
        text = render_table(rows, layout="detailed")
    assert "--" in text
    assert "missing cell" in caplog.text


def test_render_skips_failed_rows_and_validates_layout():
    config = ExperimentConfig(view="SUR", backbone="tiny_test_cnn")
    failed = ResultRow(config=config, config_hash=config.config_hash(),
                       status="failed", reason="boom")
    with pytest.raises(ValueError, match="no successful"):
        render_table([failed], layout="detailed")
    with pytest.raises(ValueError, match="layout"):
        render_table([failed], layout="sideways")


def test_baseline_rows_render_without_marking():
    proto = _synthetic_rows("SUR")
    base_grid = [85.17, 86.00, 81.50, 77.00]
    base_rows = []
    for budget, value in zip((1.0, 0.75, 0.5, 0.25), base_grid):
        config = ExperimentConfig(view="SUR", backbone="resnet34", k_shot=0,
                                  budget_fraction=budget, mode="baseline")
        base_rows.append(ResultRow(
            config=config, config_hash=config.config_hash(), status="ok",
            metrics={"accuracy": {"mean": value / 100.0, "std": None}},
        ))
    text = render_table(proto + base_rows, layout="detailed")
    assert "baseline" in text
    assert "77.00" in text and "*77.00*" not in text
