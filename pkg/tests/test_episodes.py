import numpy as np
import pytest

from protopatch import EpisodeSpec, apply_budget, dump_episode, episode_stream, sample_episode

from conftest import flat_manifest


# ---------------------------------------------------------------------------
# budgets


def test_budget_quarter_of_balanced_manifest():
    manifest = flat_manifest(per_class_train=1000, n_classes=6)
    budget = apply_budget(manifest, 0.25, seed=3)
    assert len(budget.selected_patch_ids) == 1500
    assert set(budget.selection_counts().values()) == {250}
    train_ids = set(manifest.ids("train"))
    assert budget.selected_patch_ids <= train_ids


def test_budget_full_fraction_is_identity():
    manifest = flat_manifest(per_class_train=40, per_class_test=10, n_classes=3)
    budget = apply_budget(manifest, 1.0, seed=0)
    assert budget.selected_patch_ids == frozenset(manifest.ids("train"))


def test_budget_leaves_test_split_untouched():
    manifest = flat_manifest(per_class_train=80, per_class_test=20, n_classes=6)
    budget = apply_budget(manifest, 0.5, seed=1)
    assert not budget.selected_patch_ids & set(manifest.ids("test"))
    assert budget.populations("test") == manifest.ids_by_class("test")


def test_budget_round_half_up_small_class():
    manifest = flat_manifest(per_class_train=3, n_classes=2)
    for seed in range(100):
        budget = apply_budget(manifest, 0.5, seed=seed)
        assert set(budget.selection_counts().values()) == {2}


def test_budget_stratification_within_rounding():
    manifest = flat_manifest(per_class_train=37, n_classes=5)
    for fraction in (0.2, 0.33, 0.75, 0.9):
        budget = apply_budget(manifest, fraction, seed=8)
        for count in budget.selection_counts().values():
            assert abs(count - fraction * 37) <= 0.5 + 1e-9


def test_budget_fraction_validation():
    manifest = flat_manifest(per_class_train=4, n_classes=2)
    for bad in (0.0, -0.1, 1.2):
        with pytest.raises(ValueError):
            apply_budget(manifest, bad)


def test_budget_deterministic_and_order_free():
    manifest = flat_manifest(per_class_train=30, n_classes=4)
    a = apply_budget(manifest, 0.4, seed=21)
    b = apply_budget(manifest, 0.4, seed=21)
    assert a.selected_patch_ids == b.selected_patch_ids
    assert a.selected_patch_ids != apply_budget(manifest, 0.4, seed=22).selected_patch_ids


# ---------------------------------------------------------------------------
# episodes


def _budget(per_class_train=40, per_class_test=25, n_classes=6, fraction=1.0, seed=0):
    manifest = flat_manifest(per_class_train, per_class_test, n_classes)
    return apply_budget(manifest, fraction, seed=seed)


def test_episode_counts_and_labels():
    spec = EpisodeSpec(n_way=6, k_shot=10, n_query=10, seed=2)
    episode = sample_episode(_budget(), spec, 0)
    assert len(episode.support) == 60
    assert len(episode.query) == 60
    assert sorted(set(episode.support_labels)) == list(range(6))
    for label, class_key in enumerate(episode.classes):
        s = [pid for pid, l in episode.support if l == label]
        q = [pid for pid, l in episode.query if l == label]
        assert len(s) == 10 and len(q) == 10
        assert all(pid.split("/")[1] == class_key for pid in s + q)


def test_episode_support_query_disjoint():
    spec = EpisodeSpec(n_way=6, k_shot=5, n_query=7, seed=0)
    data = _budget()
    for index in range(50):
        episode = sample_episode(data, spec, index)
        assert not set(episode.support_ids) & set(episode.query_ids)


def test_episode_forced_full_permutation():
    data = _budget(per_class_train=12, n_classes=3)
    spec = EpisodeSpec(n_way=3, k_shot=7, n_query=5, seed=4)
    episode = sample_episode(data, spec, 0)
    for label, class_key in enumerate(episode.classes):
        drawn = {pid for pid, l in list(episode.support) + list(episode.query) if l == label}
        assert drawn == set(data.populations("train")[class_key])


def test_episode_determinism_and_variation():
    data = _budget()
    spec = EpisodeSpec(n_way=6, k_shot=10, n_query=10, seed=7)
    a = sample_episode(data, spec, 3)
    b = sample_episode(data, spec, 3)
    assert a == b
    supports = {tuple(sample_episode(data, spec, i).support_ids) for i in range(100)}
    assert len(supports) > 95  # distinct indices give distinct support sets


def test_episode_insufficient_population_names_class():
    data = _budget(per_class_train=6, n_classes=6)
    spec = EpisodeSpec(n_way=6, k_shot=5, n_query=5, seed=0)
    with pytest.raises(ValueError, match="has 6 patches .* needs 10"):
        sample_episode(data, spec, 0)


def test_episode_test_split_population():
    data = _budget(per_class_train=40, per_class_test=25, fraction=0.25)
    spec = EpisodeSpec(n_way=6, k_shot=10, n_query=10, seed=5)
    episode = sample_episode(data, spec, 0, split="test")
    test_ids = set()
    for ids in data.populations("test").values():
        test_ids.update(ids)
    assert set(episode.support_ids + episode.query_ids) <= test_ids
    # train episodes under a 25% budget stay within the selection
    small = EpisodeSpec(n_way=6, k_shot=5, n_query=5, seed=5)
    train_episode = sample_episode(data, small, 0, split="train")
    assert set(train_episode.support_ids + train_episode.query_ids) <= data.selected_patch_ids


def test_episode_stream_counts_and_base_case():
    data = _budget()
    spec = EpisodeSpec(n_way=6, k_shot=5, n_query=5, seed=1)
    stream = episode_stream(data, spec, 1000)
    first = next(stream)
    assert first == sample_episode(data, spec, 0)
    rest = list(stream)
    assert len(rest) == 999
    assert rest[-1].index == 999

    eval_stream = list(episode_stream(data, spec, 100, split="test"))
    assert len(eval_stream) == 100

    single = list(episode_stream(data, spec, 1))
    assert single == [sample_episode(data, spec, 0)]


def test_episode_spec_validation():
    for kwargs in (dict(n_way=1, k_shot=1), dict(n_way=2, k_shot=0),
                   dict(n_way=2, k_shot=1, n_query=0)):
        with pytest.raises(ValueError):
            EpisodeSpec(**kwargs)


def test_episode_dump(tmp_path):
    import json

    data = _budget(n_classes=3)
    spec = EpisodeSpec(n_way=3, k_shot=2, n_query=2, seed=0)
    episode = sample_episode(data, spec, 5)
    path = tmp_path / "episode.json"
    dump_episode(episode, path)
    doc = json.loads(path.read_text())
    assert doc["index"] == 5
    assert doc["classes"] == list(episode.classes)
    assert [tuple(x) for x in doc["support"]] == list(episode.support)
