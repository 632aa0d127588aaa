"""Clean-label poisoning: add label-matched perturbations to images.

Pairing rule: the j-th image with label ``y`` (in dataset order) receives the
``(j mod m_y)``-th perturbation labelled ``y`` (in perturbation-set order),
where ``m_y`` is the number of such perturbations. Poisoned pixels are
clipped to ``[0, 1]``. Labels, sample count and order never change.

Applying a regime to an already-poisoned set adds a second perturbation; the
functions do not detect this.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels
from .dataio import LabeledImageSet
from .numcore import Prng
from .shortgen import PerturbationSet, SynthConfig, synthesize

__all__ = [
    "PoisonPlan",
    "pair_perturbations",
    "apply_full",
    "apply_classes",
    "apply_fraction",
    "apply_plan",
    "quantize_8bit",
    "ShortcutPoisoner",
]

MODES = ("full", "classes", "fraction")


@dataclass(frozen=True)
class PoisonPlan:
    mode: str = "full"
    class_list: frozenset = field(default_factory=frozenset)
    fraction: float = 1.0
    seed: int = 0
    quantize: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "class_list", frozenset(int(c) for c in self.class_list))
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in [0, 1], got {self.fraction}")


def pair_perturbations(labels, perts: PerturbationSet, index=None) -> np.ndarray:
    """Perturbation index for each image in ``index`` (default: all images)."""
    labels = np.asarray(labels)
    if index is None:
        index = np.arange(labels.size)
    index = np.asarray(index, dtype=np.intp)
    out = np.empty(index.size, dtype=np.intp)
    if index.size == 0:
        return out
    # rank of every image within its label group, in dataset order
    order = np.argsort(labels, kind="stable")
    rank = np.empty(labels.size, dtype=np.intp)
    sorted_labels = labels[order]
    starts = np.searchsorted(sorted_labels, sorted_labels, side="left")
    rank[order] = np.arange(labels.size) - starts
    for y in np.unique(labels[index]):
        pool = np.flatnonzero(perts.labels == y)
        if pool.size == 0:
            raise ValueError(f"no perturbations available for class {y}")
        sel = labels[index] == y
        out[sel] = pool[rank[index[sel]] % pool.size]
    return out


def _check_compatible(data: LabeledImageSet, perts: PerturbationSet) -> None:
    if data.shape != perts.shape:
        raise ValueError(f"image shape {data.shape} does not match perturbation shape {perts.shape}")


def _poison_indices(data: LabeledImageSet, perts: PerturbationSet, index) -> LabeledImageSet:
    _check_compatible(data, perts)
    index = np.asarray(index, dtype=np.intp)
    images = data.images.copy()
    if index.size:
        which = pair_perturbations(data.labels, perts, index)
        mixed = images[index].astype(np.float64) + perts.data[which].astype(np.float64)
        images[index] = np.clip(mixed, 0.0, 1.0)
    return LabeledImageSet(images, data.labels.copy(), data.k, source=data.source + "+poison")


def apply_full(data: LabeledImageSet, perts: PerturbationSet) -> LabeledImageSet:
    """Poison every sample with a label-matched perturbation."""
    return _poison_indices(data, perts, np.arange(len(data)))


def apply_classes(data: LabeledImageSet, perts: PerturbationSet, class_list) -> LabeledImageSet:
    """Poison all samples whose label is in ``class_list``; leave the rest untouched."""
    classes = sorted({int(c) for c in class_list})
    unknown = [c for c in classes if not 0 <= c < data.k]
    if unknown:
        raise ValueError(f"unknown class ids {unknown} for a {data.k}-class dataset")
    index = np.flatnonzero(np.isin(data.labels, classes))
    return _poison_indices(data, perts, index)


def apply_fraction(
    data: LabeledImageSet, perts: PerturbationSet, fraction: float, prng: Prng
) -> tuple[LabeledImageSet, np.ndarray]:
    """Poison ``round(fraction * n)`` uniformly chosen samples.

    Returns the poisoned set and the sorted poisoned indices, so callers can
    build the clean-remainder baseline.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    n = len(data)
    m = int(np.floor(fraction * n + 0.5))
    index = np.sort(prng.choice_without_replacement(n, m)) if m else np.empty(0, dtype=np.intp)
    return _poison_indices(data, perts, index), index


def quantize_8bit(data: LabeledImageSet) -> LabeledImageSet:
    """Round pixels to the nearest multiple of 1/255, as when saving 8-bit images."""
    images = (np.rint(data.images.astype(np.float64) * 255.0) / 255.0).astype(np.float32)
    return LabeledImageSet(images, data.labels.copy(), data.k, source=data.source + "+u8")


def apply_plan(data: LabeledImageSet, perts: PerturbationSet, plan: PoisonPlan):
    """Dispatch on ``plan.mode``; returns ``(poisoned_set, poisoned_indices)``."""
    if plan.mode == "full":
        out, index = apply_full(data, perts), np.arange(len(data))
    elif plan.mode == "classes":
        out = apply_classes(data, perts, plan.class_list)
        index = np.flatnonzero(np.isin(data.labels, sorted(plan.class_list)))
    else:
        out, index = apply_fraction(data, perts, plan.fraction, Prng(plan.seed).substream("fraction"))
    if plan.quantize:
        out = quantize_8bit(out)
    return out, index


class ShortcutPoisoner(TransformerMixin, BaseEstimator):
    """Synthesize shortcut perturbations for a labelled image set and add them.

    ``fit`` draws one perturbation per training sample (per-class counts taken
    from ``y``); ``transform`` adds them, pairing by label.

    Parameters
    ----------
    patch_size : int, default=8
    eps : float, default=6/255
        Per-pixel RMS budget; each perturbation has L2 norm ``sqrt(d) * eps``.
    side_scale : float, default=6.0
    padding : bool, default=True
        ``False`` skips patch expansion and draws points directly in pixel space.
    quantize : bool, default=False
        Round poisoned images to 8-bit levels.
    random_state : int, default=0
    """

    def __init__(self, patch_size=8, eps=6 / 255, side_scale=6.0, padding=True,
                 quantize=False, random_state=0):
        self.patch_size = patch_size
        self.eps = eps
        self.side_scale = side_scale
        self.padding = padding
        self.quantize = quantize
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y, k = check_labels(y, X.shape[0])
        counts = np.bincount(y, minlength=k)
        if np.any(counts == 0):
            raise ValueError(f"every class in [0, {k}) needs at least one sample")
        _, c, h, w = X.shape
        self.config_ = SynthConfig(
            k=k, counts=tuple(counts.tolist()), w=w, h=h, c=c, p=self.patch_size,
            eps_prime=self.eps, side_scale=self.side_scale, seed=self.random_state,
            padding_enabled=self.padding,
        )
        self.perturbations_ = synthesize(self.config_)
        self.labels_ = y
        self.n_features_in_ = c * h * w
        return self

    def transform(self, X, y=None):
        """Poison ``X``; ``y`` defaults to the labels seen in ``fit``."""
        check_is_fitted(self, "perturbations_")
        X = check_images(X)
        if y is None:
            if X.shape[0] != self.labels_.size:
                raise ValueError("pass y when transforming a set other than the fitted one")
            y = self.labels_
        y, _ = check_labels(y, X.shape[0], self.perturbations_.k)
        out = apply_full(LabeledImageSet(X, y, self.perturbations_.k), self.perturbations_)
        if self.quantize:
            out = quantize_8bit(out)
        return out.images

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)
