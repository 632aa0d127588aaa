import numpy as np
import pytest

from shortcut_poison.experiments import bench_generation, load_data, perturbations_for, run_regime
from shortcut_poison.poison import PoisonPlan, pair_perturbations


def test_load_data_deterministic_and_disjoint():
    train_a, test_a = load_data("shapes", 1, 4, 2, k=3)
    train_b, _ = load_data("shapes", 1, 4, 2, k=3)
    assert np.array_equal(train_a.images, train_b.images)
    assert train_a.class_counts().tolist() == [4, 4, 4]
    assert test_a.class_counts().tolist() == [2, 2, 2]
    assert not np.array_equal(train_a.images[:2], test_a.images[:2])


def test_perturbations_match_class_counts():
    train_set, _ = load_data("shapes", 0, 5, 1, k=4)
    perts = perturbations_for(train_set, 0, p=4)
    assert np.bincount(perts.labels).tolist() == [5, 5, 5, 5]
    # every image gets its own perturbation
    assert len(np.unique(pair_perturbations(train_set.labels, perts))) == len(train_set)


def test_run_regime_class_subset_keys():
    train_set, test_set = load_data("shapes", 0, 3, 2, k=3)
    res = run_regime(train_set, test_set, 0, PoisonPlan("classes", {0}), epochs=1)
    assert {"run", "final", "poisoned_index", "poisoned_class_acc", "clean_class_acc"} <= set(res)
    assert res["poisoned_index"].tolist() == np.flatnonzero(train_set.labels == 0).tolist()


def test_bench_rows():
    rows = bench_generation([20, 40], [4, 8], shape=(1, 8, 8), repeats=1)
    assert [(n, p, d) for n, p, d, _ in rows] == [(20, 4, 64), (20, 8, 64), (40, 4, 64), (40, 8, 64)]
    assert all(s > 0 for *_, s in rows)


def test_bench_empty():
    with pytest.raises(ValueError):
        bench_generation([], [8])
