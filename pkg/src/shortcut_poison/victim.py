"""Small convolutional victim network, trained from scratch with SGD + momentum.

The network is a plain conv(3x3, same padding) / ReLU / max-pool(2x2) stack
followed by one fully-connected layer. All randomness (initialisation,
shuffling, augmentation) comes from :class:`~shortcut_poison.numcore.Prng`
substreams, so a run is a pure function of its seed when torch runs on a
single thread.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import check_images
from .dataio import LabeledImageSet, write_csv
from .numcore import Prng, sample_standard_normal

__all__ = [
    "ArchConfig",
    "AugmentOptions",
    "TrainConfig",
    "TrainRun",
    "SmallCNN",
    "build_small_cnn",
    "count_parameters",
    "random_crop",
    "hflip",
    "cutout",
    "augment",
    "lr_at_epoch",
    "train",
    "evaluate",
    "class_accuracy",
    "gradient_errors",
    "grad_check",
    "SmallCNNClassifier",
]


@dataclass(frozen=True)
class ArchConfig:
    """Layer plan in VGG-style notation: an int is a conv width, ``"M"`` a 2x2 max-pool."""

    input_shape: tuple[int, int, int] = (3, 32, 32)
    n_classes: int = 10
    layers: tuple = (32, 32, "M", 64, "M")


@dataclass(frozen=True)
class AugmentOptions:
    crop_pad: int = 4
    flip: bool = True
    cutout: int = 0  # square side in pixels, 0 disables
    mixup: float = 0.0  # Beta(alpha, alpha) parameter, 0 disables


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    decay_epochs: tuple[int, ...] = (15, 22)
    augment: AugmentOptions = field(default_factory=AugmentOptions)
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))


@dataclass
class TrainRun:
    per_epoch: list[tuple[float, float]]
    final_test_accuracy: float
    config: TrainConfig
    wall_time: float = 0.0

    def to_csv(self, path) -> None:
        """Write ``epoch,train_loss,test_acc`` rows (wall time is left out so files are reproducible)."""
        write_csv(
            path,
            ["epoch", "train_loss", "test_acc"],
            [(i + 1, repr(loss), repr(acc)) for i, (loss, acc) in enumerate(self.per_epoch)],
        )


class SmallCNN(nn.Module):
    def __init__(self, arch: ArchConfig, seed: int = 0):
        super().__init__()
        self.arch = arch
        self.seed = seed
        c, h, w = arch.input_shape
        layers: list[nn.Module] = []
        for item in arch.layers:
            if item == "M":
                if h < 2 or w < 2:
                    raise ValueError(f"cannot pool a {h}x{w} feature map in {arch.layers}")
                layers.append(nn.MaxPool2d(2))
                h, w = h // 2, w // 2
            elif isinstance(item, (int, np.integer)) and item > 0:
                layers += [nn.Conv2d(c, int(item), 3, padding=1), nn.ReLU()]
                c = int(item)
            else:
                raise ValueError(f"bad layer spec {item!r}; use a positive width or 'M'")
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(c * h * w, arch.n_classes)
        _init_parameters(self, Prng(seed).substream("init"))

    def forward(self, x):
        return self.classifier(torch.flatten(self.features(x), 1))


def _init_parameters(model: nn.Module, prng: Prng) -> None:
    # He-normal weights, zero biases
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                param.zero_()
                continue
            fan_in = int(np.prod(param.shape[1:]))
            values = sample_standard_normal(prng.substream(name), param.numel()) * np.sqrt(2.0 / fan_in)
            param.copy_(torch.from_numpy(values.reshape(tuple(param.shape))))


def build_small_cnn(arch: ArchConfig | None = None, seed: int = 0) -> SmallCNN:
    """Default plan: conv3->32, conv32->32, pool, conv32->64, pool, fc->k."""
    return SmallCNN(arch or ArchConfig(), seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def random_crop(images: np.ndarray, offsets: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad by ``pad`` and cut each image back out at ``offsets[i] = (dy, dx)``."""
    if pad == 0:
        return images.copy()
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (h, w), axis=(2, 3))
    return np.ascontiguousarray(windows[np.arange(n), :, offsets[:, 0], offsets[:, 1]])


def hflip(images: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = images.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def cutout(images: np.ndarray, centers: np.ndarray, size: int) -> np.ndarray:
    """Zero a ``size x size`` square around each centre, clipped at the borders."""
    n, _, h, w = images.shape
    top = centers[:, 0] - size // 2
    left = centers[:, 1] - size // 2
    rows = np.arange(h)[None, :]
    cols = np.arange(w)[None, :]
    rmask = (rows >= top[:, None]) & (rows < top[:, None] + size)
    cmask = (cols >= left[:, None]) & (cols < left[:, None] + size)
    hole = rmask[:, :, None] & cmask[:, None, :]
    return np.where(hole[:, None], 0.0, images).astype(images.dtype)


def augment(images, prng: Prng, opts: AugmentOptions):
    """Random crop, horizontal flip, cutout and mixup, in that order.

    ``images`` is (n, c, h, w) or a single (c, h, w) image. Returns
    ``(augmented, mix)``; ``mix`` is ``(lam, partner_index)`` when mixup is
    on, else ``None``.
    """
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    n, _, h, w = images.shape
    out = images
    if opts.crop_pad:
        offsets = prng.integers(0, 2 * opts.crop_pad + 1, size=(n, 2))
        out = random_crop(out, offsets, opts.crop_pad)
    if opts.flip:
        out = hflip(out, prng.uniform(size=n) < 0.5)
    if opts.cutout:
        centers = np.stack([prng.integers(0, h, size=n), prng.integers(0, w, size=n)], axis=1)
        out = cutout(out, centers, opts.cutout)
    mix = None
    if opts.mixup:
        lam = prng.beta(opts.mixup, opts.mixup)
        partner = prng.permutation(n)
        out = (lam * out + (1.0 - lam) * out[partner]).astype(np.float32)
        mix = (lam, partner)
    if out is images:
        out = images.copy()
    return (out[0] if single else out), mix


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``: divided by 10 after each decay epoch."""
    return cfg.lr * 0.1 ** sum(epoch > m for m in cfg.decay_epochs)


def _to_tensor(x: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


@torch.no_grad()
def predict_logits(model: nn.Module, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    chunks = [
        model(_to_tensor(images[s:s + batch_size], dtype)).double().numpy()
        for s in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(chunks) if chunks else np.empty((0, model.arch.n_classes))


def evaluate(model: nn.Module, data: LabeledImageSet) -> float:
    """Top-1 accuracy in percent, no augmentation."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    pred = predict_logits(model, data.images).argmax(axis=1)
    return 100.0 * float(np.mean(pred == data.labels))


def class_accuracy(model: nn.Module, data: LabeledImageSet, classes) -> float:
    """Accuracy in percent restricted to samples whose label is in ``classes``."""
    mask = np.isin(data.labels, list(classes))
    return evaluate(model, data.subset(mask))


def train(model: SmallCNN, train_set: LabeledImageSet, test_set: LabeledImageSet, cfg: TrainConfig) -> TrainRun:
    """Mini-batch SGD with momentum; clean-test accuracy measured after every epoch."""
    if train_set.shape != model.arch.input_shape or test_set.shape != model.arch.input_shape:
        raise ValueError(
            f"data shapes {train_set.shape}/{test_set.shape} do not match model input {model.arch.input_shape}"
        )
    if max(train_set.k, test_set.k) > model.arch.n_classes:
        raise ValueError(f"dataset has more classes than the model's {model.arch.n_classes}")
    prng = Prng(cfg.seed).substream("train")
    dtype = next(model.parameters()).dtype
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    labels_all = torch.from_numpy(train_set.labels)
    n = len(train_set)
    started = time.perf_counter()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        for group in opt.param_groups:
            group["lr"] = lr_at_epoch(cfg, epoch)
        model.train()
        order = prng.substream("epoch", epoch).permutation(n)
        total = 0.0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            batch, mix = augment(train_set.images[idx], prng.substream("epoch", epoch, "batch", b), cfg.augment)
            x = _to_tensor(batch, dtype)
            y = labels_all[idx]
            logits = model(x)
            if mix is None:
                loss = F.cross_entropy(logits, y)
            else:
                lam, partner = mix
                loss = lam * F.cross_entropy(logits, y) + (1 - lam) * F.cross_entropy(logits, y[partner])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * idx.size
        history.append((total / n, evaluate(model, test_set)))
    final = history[-1][1] if history else evaluate(model, test_set)
    return TrainRun(history, final, cfg, time.perf_counter() - started)


def gradient_errors(model: nn.Module, batch, entries_per_tensor: int = 12, step: float = 1e-5,
                    atol: float = 1e-6, seed: int = 0) -> dict[str, float]:
    """Autograd vs central finite differences, in float64, per parameter tensor.

    ``batch`` is ``(images, labels)``. For each parameter tensor (and for the
    input batch, which exercises the pooling and ReLU backward paths) up to
    ``entries_per_tensor`` seeded entries are checked. The error of an entry
    is ``|a - f| / max(|a|, |f|, atol)``.

    An entry whose +-step evaluations land on different ReLU signs or max-pool
    winners straddles a kink, where the central difference is meaningless; such
    entries are skipped and the next seeded entry is used instead.
    """
    images, labels = batch
    m64 = copy.deepcopy(model).double().eval()
    x = _to_tensor(np.asarray(images), torch.float64).requires_grad_(True)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)

    pattern: list[torch.Tensor] = []

    def record(module, inputs, _output):
        if isinstance(module, nn.ReLU):
            pattern.append(inputs[0] > 0)
        else:
            pattern.append(F.max_pool2d(inputs[0], module.kernel_size, module.stride, return_indices=True)[1])

    hooks = [mod.register_forward_hook(record) for mod in m64.modules() if isinstance(mod, (nn.ReLU, nn.MaxPool2d))]

    def loss_value():
        pattern.clear()
        with torch.no_grad():
            value = float(F.cross_entropy(m64(x), y))
        return value, list(pattern)

    loss = F.cross_entropy(m64(x), y)
    m64.zero_grad()
    loss.backward()
    tensors = [(name, p) for name, p in m64.named_parameters()] + [("input", x)]
    prng = Prng(seed).substream("grad_check")
    errors = {}
    try:
        for name, tensor in tensors:
            analytic = tensor.grad.detach().clone().reshape(-1)
            flat = tensor.data.reshape(-1)
            order = prng.substream(name).permutation(flat.numel())
            worst, checked = 0.0, 0
            for i in order:
                if checked == entries_per_tensor:
                    break
                orig = float(flat[i])
                flat[i] = orig + step
                plus, pat_plus = loss_value()
                flat[i] = orig - step
                minus, pat_minus = loss_value()
                flat[i] = orig
                if any(not torch.equal(a, b) for a, b in zip(pat_plus, pat_minus)):
                    continue
                numeric = (plus - minus) / (2 * step)
                a = float(analytic[i])
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), atol))
                checked += 1
            errors[name] = worst
    finally:
        for h in hooks:
            h.remove()
    return errors


def grad_check(model: nn.Module, batch, **kwargs) -> float:
    """Largest relative gradient error over all layers (see :func:`gradient_errors`)."""
    return max(gradient_errors(model, batch, **kwargs).values())


class SmallCNNClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn wrapper around :class:`SmallCNN` + :func:`train`.

    ``fit`` accepts ``eval_set=(X_test, y_test)`` to record clean-test
    accuracy per epoch in ``run_``.
    """

    def __init__(self, layers=(32, 32, "M", 64, "M"), epochs=30, batch_size=128, lr=0.05,
                 momentum=0.9, decay_epochs=(15, 22), crop_pad=4, flip=True, cutout=0,
                 mixup=0.0, random_state=0):
        self.layers = layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.decay_epochs = decay_epochs
        self.crop_pad = crop_pad
        self.flip = flip
        self.cutout = cutout
        self.mixup = mixup
        self.random_state = random_state

    def fit(self, X, y, eval_set=None):
        X = check_images(X)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        k = self.classes_.size
        train_set = LabeledImageSet(X, y_enc, k)
        if eval_set is None:
            test_set = train_set
        else:
            X_test = check_images(eval_set[0], name="eval_set images")
            y_test = np.searchsorted(self.classes_, eval_set[1])
            test_set = LabeledImageSet(X_test, y_test, k)
        cfg = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            decay_epochs=tuple(self.decay_epochs),
            augment=AugmentOptions(self.crop_pad, self.flip, self.cutout, self.mixup),
            seed=self.random_state,
        )
        arch = ArchConfig(tuple(X.shape[1:]), k, tuple(self.layers))
        self.model_ = build_small_cnn(arch, self.random_state)
        self.run_ = train(self.model_, train_set, test_set, cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        logits = predict_logits(self.model_, check_images(X))
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
