"""Training-data budgets and N-way K-shot episode sampling.

A budget is a stratified, seeded subsample of the train split; episodes draw
disjoint support and query sets from either the budgeted train population or
the untouched test population. Every episode is a pure function of
(budget seed, episode spec seed, episode index), so any episode can be
rebuilt in isolation and streams may be generated concurrently.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ._util import rng_from
from .data import DatasetManifest


@dataclass
class EpisodeSpec:
    """Shape of one few-shot task: ways N, shots K, queries Q per class."""

    n_way: int
    k_shot: int
    n_query: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError("n_way must be >= 2")
        if self.k_shot < 1:
            raise ValueError("k_shot must be >= 1")
        if self.n_query < 1:
            raise ValueError("n_query must be >= 1")


@dataclass
class BudgetedDataset:
    """A manifest with a per-class subsample of its train split selected."""

    manifest: DatasetManifest
    fraction: float
    selected_patch_ids: frozenset
    seed: int = 0

    def populations(self, split: str = "train") -> dict:
        """Sorted patch ids per class: budgeted train or full test split."""
        if split == "train":
            grouped = self.manifest.ids_by_class("train")
            return {
                c: [p for p in ids if p in self.selected_patch_ids]
                for c, ids in grouped.items()
            }
        if split == "test":
            return self.manifest.ids_by_class("test")
        raise ValueError(f"unknown split {split!r}")

    def selection_counts(self) -> dict:
        return {c: len(ids) for c, ids in self.populations("train").items()}


@dataclass
class Episode:
    """One few-shot task: ordered classes, support and query item lists.

    Items are (patch_id, label) pairs; labels index into `classes`.
    """

    index: int
    classes: tuple
    support: tuple  # ((patch_id, label), ...), k_shot per class
    query: tuple  # ((patch_id, label), ...), n_query per class

    @property
    def support_ids(self) -> list:
        return [pid for pid, _ in self.support]

    @property
    def query_ids(self) -> list:
        return [pid for pid, _ in self.query]

    @property
    def support_labels(self) -> list:
        return [label for _, label in self.support]

    @property
    def query_labels(self) -> list:
        return [label for _, label in self.query]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def apply_budget(manifest: DatasetManifest, fraction: float, seed: int = 0) -> BudgetedDataset:
    """Select round(fraction * class count) train patches per class.

    Sampling is stratified and without replacement, drawn only from the train
    split; the test split is untouched. Each class uses its own RNG stream
    derived from (seed, class key), so the result is order-independent.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    selected = []
    for class_key, ids in manifest.ids_by_class("train").items():
        k = _round_half_up(fraction * len(ids))
        rng = rng_from(seed, "budget", class_key)
        chosen = rng.choice(len(ids), size=k, replace=False)
        selected.extend(ids[i] for i in chosen)
    return BudgetedDataset(
        manifest=manifest,
        fraction=fraction,
        selected_patch_ids=frozenset(selected),
        seed=seed,
    )


def sample_episode(
    data: BudgetedDataset,
    spec: EpisodeSpec,
    episode_index: int,
    split: str = "train",
) -> Episode:
    """Draw one episode; a pure function of (data.seed, spec.seed, episode_index).

    Classes are drawn without replacement (all classes, shuffled, when n_way
    equals the class count); per class, k_shot + n_query patches are drawn
    without replacement and the first k_shot become the support set.
    """
    populations = data.populations(split)
    available = sorted(populations)
    if spec.n_way > len(available):
        raise ValueError(
            f"n_way={spec.n_way} exceeds the {len(available)} available classes"
        )
    rng = rng_from(data.seed, spec.seed, episode_index)
    order = rng.permutation(len(available))[: spec.n_way]
    classes = tuple(available[i] for i in order)

    need = spec.k_shot + spec.n_query
    support, query = [], []
    for label, class_key in enumerate(classes):
        pool = populations[class_key]
        if len(pool) < need:
            raise ValueError(
                f"class {class_key} has {len(pool)} patches in the {split} "
                f"population, episode needs {need}"
            )
        picks = rng.choice(len(pool), size=need, replace=False)
        support.extend((pool[i], label) for i in picks[: spec.k_shot])
        query.extend((pool[i], label) for i in picks[spec.k_shot :])
    return Episode(
        index=episode_index, classes=classes,
        support=tuple(support), query=tuple(query),
    )


def episode_stream(
    data: BudgetedDataset,
    spec: EpisodeSpec,
    count: int,
    split: str = "train",
):
    """Lazily yield episodes with indices 0..count-1."""
    if count < 1:
        raise ValueError("count must be >= 1")
    for index in range(count):
        yield sample_episode(data, spec, index, split)


def dump_episode(episode: Episode, path) -> None:
    """Write an episode's composition as JSON for debugging."""
    doc = {
        "index": episode.index,
        "classes": list(episode.classes),
        "support": [[pid, label] for pid, label in episode.support],
        "query": [[pid, label] for pid, label in episode.query],
    }
    Path(path).write_text(json.dumps(doc, indent=1))
