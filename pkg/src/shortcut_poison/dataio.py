"""Datasets, perturbation files and image/CSV export.

Binary perturbation file (``.sprt``), all fields little-endian::

    magic        4 bytes  b"SPRT"
    version      uint32
    n, c, h, w   uint32 x 4
    norm_radius  float32  (NaN when unknown)
    labels       uint16 x n
    data         float32 x n*c*h*w   (sample-major, then c, h, w)
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_images, check_labels
from .numcore import Prng, sample_standard_normal
from .shortgen import PerturbationSet

__all__ = [
    "LabeledImageSet",
    "SHAPE_NAMES",
    "PERT_MAGIC",
    "PERT_VERSION",
    "load_cifar10",
    "gen_shapes_dataset",
    "save_perts",
    "load_perts",
    "import_external_perturbations",
    "export_ppm",
    "save_image_set",
    "load_image_set",
    "write_csv",
]

PERT_MAGIC = b"SPRT"
PERT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIf")

CIFAR_RECORD = 1 + 3072
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

SHAPE_NAMES = (
    "circle", "square", "triangle", "cross", "ring",
    "bar_h", "bar_v", "diamond", "L", "dot_grid",
)


@dataclass
class LabeledImageSet:
    """Images in ``[0, 1]`` of shape (n, c, h, w) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    k: int | None = None
    source: str = ""

    def __post_init__(self):
        self.images = check_images(self.images, name="images")
        self.labels, self.k = check_labels(self.labels, self.images.shape[0], self.k, name="labels")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def subset(self, index, source: str | None = None) -> "LabeledImageSet":
        return LabeledImageSet(
            self.images[index], self.labels[index], self.k,
            self.source if source is None else source,
        )


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise FileNotFoundError(f"CIFAR-10 batch file missing: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise ValueError(
            f"{path}: size {raw.size} bytes is not a positive multiple of {CIFAR_RECORD}"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label byte {labels.max()} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Read the CIFAR-10 binary distribution (5 train batches + test batch)."""
    directory = Path(directory)
    # read everything before building any set so errors never leave partial data
    train_parts = [_read_cifar_file(directory / name) for name in CIFAR_TRAIN_FILES]
    test_images, test_labels = _read_cifar_file(directory / CIFAR_TEST_FILE)
    train = LabeledImageSet(
        np.concatenate([p[0] for p in train_parts]),
        np.concatenate([p[1] for p in train_parts]),
        k=10,
        source=f"cifar10-train:{directory}",
    )
    test = LabeledImageSet(test_images, test_labels, k=10, source=f"cifar10-test:{directory}")
    return train, test


def _shape_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of unit-radius coordinates ``(u, v)`` in shape ``kind``."""
    u, v = np.broadcast_arrays(u, v)
    au, av = np.abs(u), np.abs(v)
    name = SHAPE_NAMES[kind]
    if name == "circle":
        return u**2 + v**2 <= 1.0
    if name == "square":
        return np.maximum(au, av) <= 0.8
    if name == "triangle":
        return (v <= 0.7) & (au <= (v + 1.0) * 0.55)
    if name == "cross":
        return ((au <= 0.28) & (av <= 1.0)) | ((av <= 0.28) & (au <= 1.0))
    if name == "ring":
        rho2 = u**2 + v**2
        return (rho2 <= 1.0) & (rho2 >= 0.55**2)
    if name == "bar_h":
        return (au <= 1.0) & (av <= 0.3)
    if name == "bar_v":
        return (av <= 1.0) & (au <= 0.3)
    if name == "diamond":
        return au + av <= 1.0
    if name == "L":
        stem = (u >= -0.7) & (u <= -0.2) & (av <= 1.0)
        foot = (v >= 0.5) & (v <= 1.0) & (u >= -0.7) & (u <= 0.8)
        return stem | foot
    if name == "dot_grid":
        hit = np.zeros(u.shape, dtype=bool)
        for cy in (-0.65, 0.0, 0.65):
            for cx in (-0.65, 0.0, 0.65):
                hit |= (u - cx) ** 2 + (v - cy) ** 2 <= 0.24**2
        return hit
    raise ValueError(f"unknown shape {kind}")


_BRIGHTNESS = (0.1, 0.3)


def gen_shapes_dataset(prng: Prng, n_per_class: int, k: int = 10, w: int = 32, h: int = 32) -> LabeledImageSet:
    """Procedural RGB shapes: one dim shape per image on a dark noisy background.

    Each image has a random centre (within 25% of the frame from the middle),
    a size jitter of +-30%, a random foreground colour and additive N(0, 0.05^2)
    pixel noise. Shape edges are anti-aliased with 2x2 supersampling.
    Samples are grouped by class in label order.

    Foreground brightness (largest channel) is drawn from [0.1, 0.3]. With
    bright shapes the small CNN learns the shapes as fast as any perturbation
    shortcut, so the clean features would never lose the race the attack needs.
    """
    if not 1 <= k <= len(SHAPE_NAMES):
        raise ValueError(f"k must lie in [1, {len(SHAPE_NAMES)}], got {k}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    base_radius = 0.22 * min(w, h)
    sub = (np.arange(2) + 0.5) / 2.0
    ys = (np.arange(h)[:, None] + sub[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + sub[None, :]).reshape(-1)

    images = np.empty((k * n_per_class, 3, h, w), dtype=np.float32)
    for cls in range(k):
        stream = prng.substream("shapes", cls)
        cy = h / 2 + stream.uniform(-0.25, 0.25, n_per_class) * h
        cx = w / 2 + stream.uniform(-0.25, 0.25, n_per_class) * w
        radius = base_radius * stream.uniform(0.7, 1.3, n_per_class)
        color = stream.uniform(0.25, 1.0, (n_per_class, 3))
        color *= (stream.uniform(*_BRIGHTNESS, n_per_class) / color.max(axis=1))[:, None]
        v = (ys[None, :, None] - cy[:, None, None]) / radius[:, None, None]
        u = (xs[None, None, :] - cx[:, None, None]) / radius[:, None, None]
        cover = _shape_mask(cls, u, v).astype(np.float64)
        cover = cover.reshape(n_per_class, h, 2, w, 2).mean(axis=(2, 4))
        noise = sample_standard_normal(stream.substream("noise"), n_per_class * 3 * h * w)
        img = cover[:, None] * color[:, :, None, None] + 0.05 * noise.reshape(n_per_class, 3, h, w)
        images[cls * n_per_class:(cls + 1) * n_per_class] = np.clip(img, 0.0, 1.0)
    labels = np.repeat(np.arange(k), n_per_class)
    return LabeledImageSet(images, labels, k=k, source=f"shapes(seed={prng.seed},path={prng.path})")


def save_perts(perts: PerturbationSet, path) -> None:
    """Write ``perts`` in the ``.sprt`` layout (see module docstring)."""
    n, (c, h, w) = len(perts), perts.shape
    if perts.labels.size and perts.labels.max() > 0xFFFF:
        raise ValueError("labels above 65535 cannot be stored as uint16")
    radius = math.nan if perts.norm_radius is None else perts.norm_radius
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PERT_MAGIC, PERT_VERSION, n, c, h, w, radius))
        fh.write(perts.labels.astype("<u2").tobytes())
        fh.write(np.ascontiguousarray(perts.data, dtype="<f4").tobytes())


def load_perts(path) -> PerturbationSet:
    """Read a ``.sprt`` file, validating magic, version and length."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != PERT_MAGIC:
        raise ValueError(f"{path}: not a perturbation file")
    magic, version, n, c, h, w, radius = _HEADER.unpack_from(raw)
    if version > PERT_VERSION or version == 0:
        raise ValueError(
            f"{path}: unsupported perturbation file version {version} "
            f"(this reader supports version {PERT_VERSION})"
        )
    expected = _HEADER.size + 2 * n + 4 * n * c * h * w
    if len(raw) != expected:
        raise ValueError(f"{path}: length {len(raw)} bytes, expected {expected} for n={n}, shape=({c},{h},{w})")
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=_HEADER.size).astype(np.int64)
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size + 2 * n).reshape(n, c, h, w)
    return PerturbationSet(
        data.astype(np.float32),
        labels,
        norm_radius=None if math.isnan(radius) else float(radius),
    )


def import_external_perturbations(path, shape, labels_path) -> PerturbationSet:
    """Wrap a raw float32 tensor dump and a uint16 label dump as a set.

    ``shape`` is the per-sample ``(c, h, w)``; ``n`` is taken from the label
    file. No normalisation is applied.
    """
    c, h, w = (int(s) for s in shape)
    label_bytes = Path(labels_path).read_bytes()
    if len(label_bytes) % 2:
        raise ValueError(f"{labels_path}: odd byte count {len(label_bytes)} for uint16 labels")
    labels = np.frombuffer(label_bytes, dtype="<u2").astype(np.int64)
    n = labels.size
    expected = 4 * n * c * h * w
    actual = os.path.getsize(path)
    if actual != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes for {n} samples of shape ({c},{h},{w}), got {actual}"
        )
    data = np.fromfile(path, dtype="<f4").reshape(n, c, h, w)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: contains non-finite values")
    return PerturbationSet(data, labels)


def export_ppm(img, path) -> None:
    """Write a (3, h, w) image in [0, 1] as binary PPM (P6)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"export_ppm needs a 3-channel (3, h, w) image, got {img.shape}")
    _, h, w = img.shape
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def save_image_set(data: LabeledImageSet, directory) -> None:
    """Store ``images.npy`` (float32) and ``labels.npy`` in ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "images.npy", data.images)
    np.save(directory / "labels.npy", data.labels)


def load_image_set(directory, k: int | None = None) -> LabeledImageSet:
    directory = Path(directory)
    return LabeledImageSet(
        np.load(directory / "images.npy"), np.load(directory / "labels.npy"), k, source=str(directory)
    )


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
