"""Experiment recipes shared by the command line and the acceptance tests."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .dataio import LabeledImageSet, gen_shapes_dataset, load_cifar10
from .numcore import Prng
from .poison import PoisonPlan, apply_plan
from .shortgen import PerturbationSet, SynthConfig, synthesize
from .victim import ArchConfig, AugmentOptions, TrainConfig, build_small_cnn, class_accuracy, train

__all__ = [
    "load_data",
    "perturbations_for",
    "train_victim",
    "VictimResult",
    "run_regime",
    "ablation",
    "bench_generation",
    "DESK_LR",
]

# plain (no-normalization) CNN: at 0.05 it diverges as soon as it locks onto the shortcut
DESK_LR = 0.02


def load_data(source: str, seed: int, n_train: int = 500, n_test: int = 200, k: int = 10):
    """``source`` is ``"shapes"`` or a CIFAR-10 binary directory.

    For CIFAR-10 the first ``n_train`` / ``n_test`` images per class are kept
    (in file order), so subsets are deterministic without a seed.
    """
    if source == "shapes":
        root = Prng(seed).substream("data")
        return (gen_shapes_dataset(root.substream("train"), n_train, k=k),
                gen_shapes_dataset(root.substream("test"), n_test, k=k))
    train_set, test_set = load_cifar10(source)
    return _per_class_head(train_set, n_train), _per_class_head(test_set, n_test)


def _per_class_head(data: LabeledImageSet, per_class: int) -> LabeledImageSet:
    keep = np.concatenate([np.flatnonzero(data.labels == c)[:per_class] for c in range(data.k)])
    return data.subset(np.sort(keep))


def perturbations_for(data: LabeledImageSet, seed: int, p: int = 8, eps: float = 6 / 255,
                      padding: bool = True, side_scale: float = 6.0) -> PerturbationSet:
    """One synthetic perturbation per sample of ``data``, class counts matched."""
    c, h, w = data.shape
    counts = tuple(int(v) for v in data.class_counts())
    cfg = SynthConfig(k=data.k, counts=counts, w=w, h=h, c=c, p=p, eps_prime=eps,
                      side_scale=side_scale, seed=seed, padding_enabled=padding)
    return synthesize(cfg)


@dataclass
class VictimResult:
    run: object
    clean_acc: float
    model: object

    @property
    def final(self) -> float:
        return self.run.final_test_accuracy


def train_victim(train_set: LabeledImageSet, test_set: LabeledImageSet, seed: int,
                 epochs: int = 30, augment: AugmentOptions | None = None, lr: float = DESK_LR) -> VictimResult:
    cfg = TrainConfig(epochs=epochs, lr=lr, augment=augment or AugmentOptions(), seed=seed)
    model = build_small_cnn(ArchConfig(train_set.shape, test_set.k), seed=seed)
    run = train(model, train_set, test_set, cfg)
    return VictimResult(run, run.final_test_accuracy, model)


def run_regime(train_set, test_set, seed: int, plan: PoisonPlan | None = None,
               perts: PerturbationSet | None = None, epochs: int = 30,
               augment: AugmentOptions | None = None, padding: bool = True, lr: float = DESK_LR) -> dict:
    """Train one victim under ``plan`` (``None`` = clean) and collect accuracies.

    Returns a dict with the ``TrainRun`` plus, for class-subset plans,
    accuracy on poisoned and clean classes of the test set.
    """
    index = np.empty(0, dtype=np.intp)
    if plan is not None:
        if perts is None:
            perts = perturbations_for(train_set, seed, padding=padding)
        train_set, index = apply_plan(train_set, perts, plan)
    result = train_victim(train_set, test_set, seed, epochs, augment, lr)
    out = {"run": result.run, "final": result.final, "poisoned_index": index}
    if plan is not None and plan.mode == "classes":
        poisoned = sorted(plan.class_list)
        clean = [c for c in range(test_set.k) if c not in plan.class_list]
        out["poisoned_class_acc"] = class_accuracy(result.model, test_set, poisoned)
        out["clean_class_acc"] = class_accuracy(result.model, test_set, clean)
    return out


def ablation(train_set, test_set, seed: int, epochs: int = 30, lr: float = DESK_LR) -> dict:
    """Padded vs no-padding perturbations under crop+flip augmentation."""
    plan = PoisonPlan("full", seed=seed)
    return {
        name: run_regime(train_set, test_set, seed, plan, epochs=epochs, padding=padding, lr=lr)
        for name, padding in (("padded", True), ("no_padding", False))
    }


def bench_generation(n_list, p_list, shape=(3, 32, 32), repeats: int = 3, k: int = 10, seed: int = 0):
    """Median wall time of ``synthesize`` per ``(n, p)``, after one warm-up call.

    Returns rows ``(n, p, d, seconds)`` with ``d = c*h*w``.
    """
    if not n_list or not p_list:
        raise ValueError("n_list and p_list must be nonempty")
    c, h, w = shape
    rows = []
    for n in n_list:
        base, extra = divmod(int(n), k)
        counts = tuple(base + (i < extra) for i in range(k))
        for p in p_list:
            cfg = SynthConfig(k=k, counts=counts, w=w, h=h, c=c, p=int(p), seed=seed)
            synthesize(cfg)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                synthesize(cfg)
                times.append(time.perf_counter() - t0)
            rows.append((int(n), int(p), c * h * w, statistics.median(times)))
    return rows
