"""Config-driven experiment grid: per-cell runs, persistence, table rendering.

A grid cell is one (view, backbone, ways-shots, budget) combination run
either episodically or as the conventional baseline. Rows are appended to a
line-delimited results file as soon as each cell finishes, so interrupted
grids resume by skipping already-completed config hashes.
"""

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

from . import __version__
from ._util import config_digest, stable_u64
from .baseline import (
    ClassifierConfig,
    epochs_for_step_parity,
    evaluate_baseline,
    split_items,
    train_baseline,
)
from .episodes import EpisodeSpec, apply_budget, episode_stream
from .metrics import aggregate
from .protonet import evaluate, init_train_state, make_encoder, train_episodic

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision_macro", "recall_macro", "f1_macro")
BASELINE_BATCH_SIZE = 32


@dataclass
class ExperimentConfig:
    """One grid cell: data view, backbone, episode shape, budget, seeds."""

    view: str
    backbone: str
    n_way: int = 6
    k_shot: int = 10
    n_query: int = 10
    budget_fraction: float = 1.0
    seed: int = 0
    train_iterations: int = 1000
    eval_episodes: int = 100
    learning_rate: float = 1e-4
    mode: str = "prototypical"
    pretrained: bool = False

    def config_hash(self) -> str:
        return config_digest(dataclasses.asdict(self))

    def cell_seed(self) -> int:
        # combining the base seed with the config hash keeps cell seeds
        # stable when grid axes are added or reordered
        return stable_u64(f"{self.seed}:{self.config_hash()}") % (2**31)

    def budget_seed(self) -> int:
        # depends only on (seed, view, fraction) so the prototypical and
        # baseline runs of a cell select the identical patch subset
        return stable_u64(f"{self.seed}:{self.view}:{self.budget_fraction}:budget") % (2**31)


@dataclass
class GridSpec:
    """Cartesian axes over views, backbones, shots and budgets."""

    views: tuple
    backbones: tuple
    shots: tuple
    budgets: tuple
    seed: int = 0
    n_way: int = 6
    n_query: int = 10
    train_iterations: int = 1000
    eval_episodes: int = 100
    learning_rate: float = 1e-4
    include_baseline: bool = False
    pretrained: bool = False

    def __post_init__(self):
        for name in ("views", "backbones", "shots", "budgets"):
            axis = tuple(getattr(self, name))
            if not axis:
                raise ValueError(f"grid axis {name} is empty")
            setattr(self, name, axis)

    def cells(self) -> list:
        configs = []
        for view, backbone, shot, budget in product(
            self.views, self.backbones, self.shots, self.budgets
        ):
            configs.append(
                ExperimentConfig(
                    view=view, backbone=backbone, n_way=self.n_way, k_shot=shot,
                    n_query=self.n_query, budget_fraction=budget, seed=self.seed,
                    train_iterations=self.train_iterations,
                    eval_episodes=self.eval_episodes,
                    learning_rate=self.learning_rate, mode="prototypical",
                    pretrained=self.pretrained,
                )
            )
        if self.include_baseline:
            for view, backbone, budget in product(
                self.views, self.backbones, self.budgets
            ):
                configs.append(
                    ExperimentConfig(
                        view=view, backbone=backbone, n_way=self.n_way, k_shot=0,
                        n_query=self.n_query, budget_fraction=budget, seed=self.seed,
                        train_iterations=self.train_iterations,
                        eval_episodes=self.eval_episodes,
                        learning_rate=self.learning_rate, mode="baseline",
                        pretrained=self.pretrained,
                    )
                )
        return configs


@dataclass
class ResultRow:
    """Echo of one cell's config plus its metrics and run metadata."""

    config: ExperimentConfig
    config_hash: str
    status: str  # "ok" | "failed"
    metrics: dict = field(default_factory=dict)  # name -> {"mean":..., "std":...}
    reason: str | None = None
    wall_time: float = 0.0
    version: str = __version__
    run_id: str = ""
    extra: dict = field(default_factory=dict)


def run_cell(config: ExperimentConfig, manifest, patch_source) -> ResultRow:
    """Budget, train and evaluate one grid cell; failures become failed rows."""
    if manifest.view != config.view:
        raise ValueError(
            f"manifest view {manifest.view} does not match config view {config.view}"
        )
    started = time.time()
    row = ResultRow(
        config=config, config_hash=config.config_hash(), status="ok",
        run_id=f"{time.time_ns():x}",
    )
    try:
        seed = config.cell_seed()
        budget = apply_budget(manifest, config.budget_fraction, config.budget_seed())
        if config.mode == "prototypical":
            row.metrics = _run_prototypical(config, budget, patch_source, seed)
        elif config.mode == "baseline":
            row.metrics, row.extra = _run_baseline(config, budget, patch_source, seed)
        else:
            raise ValueError(f"unknown mode {config.mode!r}")
    except Exception as exc:  # noqa: BLE001 - failed cells are recorded, not fatal
        row.status = "failed"
        row.reason = f"{type(exc).__name__}: {exc}"
        logger.warning("cell %s failed: %s", row.config_hash, row.reason)
    row.wall_time = time.time() - started
    return row


def _run_prototypical(config, budget, patch_source, seed) -> dict:
    encoder = make_encoder(config.backbone, config.pretrained, seed)
    state = init_train_state(encoder, config.learning_rate)
    train_spec = EpisodeSpec(config.n_way, config.k_shot, config.n_query, seed=seed)
    train_episodic(
        state,
        episode_stream(budget, train_spec, config.train_iterations, split="train"),
        patch_source,
        config.train_iterations,
    )
    eval_spec = EpisodeSpec(
        config.n_way, config.k_shot, config.n_query,
        seed=stable_u64(f"eval:{seed}") % (2**31),
    )
    results = evaluate(
        encoder,
        episode_stream(budget, eval_spec, config.eval_episodes, split="test"),
        patch_source,
    )
    metrics = {}
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in results]
        if len(values) >= 2:
            summary = aggregate(values)
            metrics[name] = {"mean": summary.mean, "std": summary.std}
        else:
            metrics[name] = {"mean": float(values[0]), "std": None}
    return metrics


def _run_baseline(config, budget, patch_source, seed):
    n_train = sum(budget.selection_counts().values())
    epochs = epochs_for_step_parity(n_train, BASELINE_BATCH_SIZE, config.train_iterations)
    classifier_config = ClassifierConfig(
        backbone=config.backbone,
        n_classes=len(budget.populations("train")),
        learning_rate=config.learning_rate,
        epochs=epochs,
        batch_size=BASELINE_BATCH_SIZE,
        seed=seed,
        pretrained=config.pretrained,
    )
    model, step_losses = train_baseline(classifier_config, budget, patch_source)
    test_ids, test_labels = split_items(budget)
    result = evaluate_baseline(model, test_ids, test_labels, patch_source)
    metrics = {name: {"mean": float(getattr(result, name)), "std": None}
               for name in METRIC_NAMES}
    extra = {
        "epochs": epochs,
        "optimizer_steps": len(step_losses),
        "batch_size": BASELINE_BATCH_SIZE,
        "n_test": len(test_ids),
    }
    return metrics, extra


def run_grid(grid: GridSpec, manifest_store: dict, out_path=None, resume: bool = True) -> list:
    """Run every cell, appending each row to out_path as it completes.

    manifest_store maps view -> (manifest, patch_source). With resume, cells
    whose config hash already has an ok row in out_path are skipped; failed
    cells are retried.
    """
    cells = grid.cells()
    for view in grid.views:
        if view not in manifest_store:
            raise ValueError(f"no manifest for view {view}")
    done = set()
    if resume and out_path is not None and Path(out_path).exists():
        done = {r.config_hash for r in load_results(out_path) if r.status == "ok"}

    rows = []
    for config in cells:
        if config.config_hash() in done:
            continue
        manifest, source = manifest_store[config.view]
        row = run_cell(config, manifest, source)
        rows.append(row)
        if out_path is not None:
            append_result(out_path, row)
    return rows


# ---------------------------------------------------------------------------
# persistence


def _row_to_record(row: ResultRow) -> dict:
    return {
        "config": dataclasses.asdict(row.config),
        "config_hash": row.config_hash,
        "status": row.status,
        "metrics": row.metrics,
        "reason": row.reason,
        "wall_time": row.wall_time,
        "version": row.version,
        "run_id": row.run_id,
        "extra": row.extra,
    }


def _row_from_record(record: dict) -> ResultRow:
    return ResultRow(
        config=ExperimentConfig(**record["config"]),
        config_hash=record["config_hash"],
        status=record["status"],
        metrics=record["metrics"],
        reason=record.get("reason"),
        wall_time=record.get("wall_time", 0.0),
        version=record.get("version", ""),
        run_id=record.get("run_id", ""),
        extra=record.get("extra", {}),
    )


def append_result(path, row: ResultRow) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(_row_to_record(row), sort_keys=True) + "\n")


def load_results(path) -> list:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append(_row_from_record(json.loads(line)))
    return rows


def export_results_csv(rows, path) -> None:
    """Flat comma-separated summary, one line per row."""
    config_fields = [f.name for f in dataclasses.fields(ExperimentConfig)]
    header = config_fields + ["config_hash", "status"]
    for name in METRIC_NAMES:
        header += [f"{name}_mean", f"{name}_std"]
    header += ["wall_time", "version", "run_id"]
    lines = [",".join(header)]
    for row in rows:
        cells = [str(getattr(row.config, f)) for f in config_fields]
        cells += [row.config_hash, row.status]
        for name in METRIC_NAMES:
            entry = row.metrics.get(name, {})
            mean, std = entry.get("mean"), entry.get("std")
            cells += ["" if mean is None else repr(mean),
                      "" if std is None else repr(std)]
        cells += [repr(row.wall_time), row.version, row.run_id]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# table rendering


def summarize_rows(rows) -> dict:
    """Per (view, backbone): mean/std of each metric over the cell means.

    Covers prototypical rows only; cell means enter as percentages.
    """
    groups: dict = {}
    for row in rows:
        if row.status != "ok" or row.config.mode != "prototypical":
            continue
        groups.setdefault((row.config.view, row.config.backbone), []).append(row)
    summaries = {}
    for key, group in sorted(groups.items()):
        summaries[key] = {
            name: aggregate([100.0 * r.metrics[name]["mean"] for r in group])
            for name in METRIC_NAMES
        }
    return summaries


def _fmt_table(header, body) -> str:
    widths = [max(len(str(line[i])) for line in [header] + body)
              for i in range(len(header))]
    def fmt(line):
        return "  ".join(str(v).ljust(w) for v, w in zip(line, widths)).rstrip()
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([fmt(header), rule] + [fmt(line) for line in body])


def render_table(rows, layout: str = "detailed") -> str:
    """Render results as text; layout is "detailed" or "backbone_summary"."""
    ok_rows = [r for r in rows if r.status == "ok"]
    if layout == "backbone_summary":
        return _render_summary(ok_rows)
    if layout == "detailed":
        return _render_detailed(ok_rows)
    raise ValueError(f"unknown layout {layout!r}")


def _render_summary(rows) -> str:
    summaries = summarize_rows(rows)
    if not summaries:
        raise ValueError("no successful prototypical rows to summarize")
    best_by_view = {}
    for (view, backbone), metrics in summaries.items():
        acc = metrics["accuracy"].mean
        if view not in best_by_view or acc > best_by_view[view][1]:
            best_by_view[view] = (backbone, acc)
    header = ["Mode", "View", "Model", "Accuracy", "Precision", "Recall", "F1-Score"]
    body = []
    for (view, backbone), metrics in summaries.items():
        marked = best_by_view[view][0] == backbone
        cells = ["prototypical", view, backbone]
        for name in METRIC_NAMES:
            s = metrics[name]
            text = f"{s.mean:.2f}±{s.std:.2f}"
            cells.append(f"*{text}*" if marked else text)
        body.append(cells)
    return _fmt_table(header, body)


def _render_detailed(rows) -> str:
    if not rows:
        raise ValueError("no successful rows to render")
    budgets = sorted({r.config.budget_fraction for r in rows}, reverse=True)
    budget_labels = [f"{round(100 * b)}%" for b in budgets]
    groups: dict = {}
    for row in rows:
        groups.setdefault((row.config.view, row.config.backbone), []).append(row)

    header = ["Mode", "View", "Backbone", "Ways-Shots"] + budget_labels
    body = []
    for (view, backbone), group in sorted(groups.items()):
        cells: dict = {}
        for row in group:
            key = (row.config.mode, row.config.k_shot, row.config.budget_fraction)
            cells[key] = 100.0 * row.metrics["accuracy"]["mean"]
        # best prototypical accuracy per budget column gets the bold marker
        best = {}
        for (mode, shot, budget), value in cells.items():
            if mode == "prototypical" and (
                budget not in best or value > cells[("prototypical", best[budget], budget)]
            ):
                best[budget] = shot
        shots = sorted({s for (m, s, _) in cells if m == "prototypical"})
        for shot in shots:
            line = ["prototypical", view, backbone, f"{group[0].config.n_way}-{shot}"]
            for budget in budgets:
                value = cells.get(("prototypical", shot, budget))
                if value is None:
                    logger.warning("missing cell: %s %s shot %s budget %s",
                                   view, backbone, shot, budget)
                    line.append("--")
                else:
                    text = f"{value:.2f}"
                    line.append(f"*{text}*" if best.get(budget) == shot else text)
            body.append(line)
        baseline_shots = sorted({s for (m, s, _) in cells if m == "baseline"})
        for shot in baseline_shots:
            line = ["baseline", view, backbone, "--"]
            for budget in budgets:
                value = cells.get(("baseline", shot, budget))
                line.append("--" if value is None else f"{value:.2f}")
            body.append(line)
    return _fmt_table(header, body)
