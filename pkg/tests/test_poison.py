import numpy as np
import pytest
from sklearn.base import clone

from shortcut_poison.dataio import LabeledImageSet
from shortcut_poison.numcore import Prng
from shortcut_poison.poison import (
    PoisonPlan,
    ShortcutPoisoner,
    apply_classes,
    apply_fraction,
    apply_full,
    apply_plan,
    pair_perturbations,
    quantize_8bit,
)
from shortcut_poison.shortgen import PerturbationSet, SynthConfig, synthesize


def _images(n_per_class=100, k=10, seed=0, shape=(3, 8, 8)):
    g = Prng(seed)
    images = g.uniform(0.2, 0.8, (n_per_class * k, *shape)).astype(np.float32)
    labels = np.tile(np.arange(k), n_per_class)
    return LabeledImageSet(images, labels, k)


@pytest.fixture(scope="module")
def data():
    return _images()


@pytest.fixture(scope="module")
def perts():
    return synthesize(SynthConfig(k=10, counts=100, w=8, h=8, c=3, p=4, seed=1))


def test_zero_perturbations_identity(data):
    zero = PerturbationSet(np.zeros((10, 3, 8, 8), np.float32), np.arange(10))
    out = apply_full(data, zero)
    assert np.array_equal(out.images, data.images)


def test_clamp_at_one():
    d = LabeledImageSet(np.ones((1, 1, 2, 2), np.float32), np.array([0]), 1)
    p = PerturbationSet(np.full((1, 1, 2, 2), 0.1, np.float32), np.array([0]))
    assert np.all(apply_full(d, p).images == 1.0)


def test_full_adds_radius_norm_before_clamp(data, perts):
    out = apply_full(data, perts)
    which = pair_perturbations(data.labels, perts)
    diff = out.images.astype(np.float64) - data.images
    # images sit in [0.2, 0.8], so nothing clamps while every |delta| < 0.2
    assert np.abs(perts.data).max() < 0.2
    assert np.allclose(np.linalg.norm(diff.reshape(len(data), -1), axis=1), perts.norm_radius, rtol=1e-5)
    assert np.allclose(diff, perts.data[which], atol=1e-6)


def test_full_label_matched(data, perts):
    which = pair_perturbations(data.labels, perts)
    assert np.array_equal(perts.labels[which], data.labels)


def test_pairing_round_robin():
    labels = np.array([1, 0, 1, 1, 0, 1])
    p = PerturbationSet(np.zeros((3, 1, 1, 1), np.float32), np.array([1, 0, 1]))
    # class 1 images in order get perturbations 0, 2, 0, 2; class 0 images get 1, 1
    assert pair_perturbations(labels, p).tolist() == [0, 1, 2, 0, 1, 2]


def test_input_not_modified(data, perts):
    before = data.images.copy()
    apply_full(data, perts)
    assert np.array_equal(before, data.images)


def test_shape_mismatch(data):
    p = synthesize(SynthConfig(k=10, counts=2, w=16, h=16, c=3, p=4))
    with pytest.raises(ValueError, match="shape"):
        apply_full(data, p)


def test_missing_class(data):
    p = PerturbationSet(np.zeros((1, 3, 8, 8), np.float32), np.array([0]))
    with pytest.raises(ValueError, match="class"):
        apply_full(data, p)


def test_classes_empty_identity(data, perts):
    assert np.array_equal(apply_classes(data, perts, []).images, data.images)


def test_classes_all_equals_full(data, perts):
    assert np.array_equal(apply_classes(data, perts, range(10)).images, apply_full(data, perts).images)


def test_classes_count_changed(data, perts):
    out = apply_classes(data, perts, {0, 3, 7})
    changed = np.any(out.images != data.images, axis=(1, 2, 3))
    assert changed.sum() == 300
    assert set(np.unique(data.labels[changed])) == {0, 3, 7}


def test_classes_unknown(data, perts):
    with pytest.raises(ValueError, match="unknown class"):
        apply_classes(data, perts, [10])


def test_fraction_one_equals_full(data, perts):
    out, idx = apply_fraction(data, perts, 1.0, Prng(0))
    assert np.array_equal(out.images, apply_full(data, perts).images)
    assert idx.size == len(data)


def test_fraction_zero_identity(data, perts):
    out, idx = apply_fraction(data, perts, 0.0, Prng(0))
    assert idx.size == 0
    assert np.array_equal(out.images, data.images)


def test_fraction_half_exact(data, perts):
    out, idx = apply_fraction(data, perts, 0.5, Prng(3))
    assert idx.size == 500
    changed = np.flatnonzero(np.any(out.images != data.images, axis=(1, 2, 3)))
    assert np.array_equal(changed, idx)


def test_fraction_pairing_uses_dataset_rank(data, perts):
    # a poisoned image gets the same perturbation under fraction and full regimes
    full = apply_full(data, perts)
    out, idx = apply_fraction(data, perts, 0.3, Prng(4))
    assert np.array_equal(out.images[idx], full.images[idx])


def test_fraction_out_of_range(data, perts):
    with pytest.raises(ValueError):
        apply_fraction(data, perts, 1.5, Prng(0))


def test_labels_order_count_preserved(data, perts):
    for plan in [PoisonPlan("full"), PoisonPlan("classes", {1, 2}), PoisonPlan("fraction", fraction=0.4, seed=2)]:
        out, _ = apply_plan(data, perts, plan)
        assert np.array_equal(out.labels, data.labels)
        assert out.images.shape == data.images.shape


def test_quantize_levels(data, perts):
    out, _ = apply_plan(data, perts, PoisonPlan("full", quantize=True))
    scaled = out.images.astype(np.float64) * 255
    assert np.allclose(scaled, np.rint(scaled), atol=1e-4)


def test_quantize_keeps_perturbation_signal(data, perts):
    # eps' = 6/255 per pixel on average survives 8-bit rounding
    clean = quantize_8bit(data)
    out, _ = apply_plan(data, perts, PoisonPlan("full", quantize=True))
    assert np.mean(out.images != clean.images) > 0.5


def test_plan_validation():
    with pytest.raises(ValueError):
        PoisonPlan("some")
    with pytest.raises(ValueError):
        PoisonPlan("fraction", fraction=-0.1)


def test_poisoner_estimator(data):
    est = ShortcutPoisoner(patch_size=4, random_state=1)
    out = est.fit_transform(data.images, data.labels)
    assert out.shape == data.images.shape
    assert 0 <= out.min() and out.max() <= 1
    assert len(est.perturbations_) == len(data)
    again = clone(est).fit_transform(data.images, data.labels)
    assert np.array_equal(out, again)
    assert est.get_params()["patch_size"] == 4


def test_poisoner_requires_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        ShortcutPoisoner().transform(np.zeros((1, 3, 8, 8), np.float32))
