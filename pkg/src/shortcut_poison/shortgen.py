"""Synthetic linearly-separable perturbations.

Each class gets a Gaussian point cloud with its own random covariance,
centred on a distinct vertex of a hypercube in a low-dimensional space of
``w' * h' * c`` coordinates (``w' = w // p + 1``). Every coordinate is then
blown up into a constant ``p x p`` pixel patch, the resulting mosaic is
cropped back to ``(h, w)`` at a random offset, and each sample is rescaled
to L2 norm ``sqrt(c*h*w) * eps_prime``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .numcore import Prng, matmul, sample_standard_normal

__all__ = [
    "SynthConfig",
    "ClassCloud",
    "PerturbationSet",
    "grid_dims",
    "choose_vertices",
    "generate_class_cloud",
    "expand_to_image",
    "crop_offsets",
    "normalize_perturbation",
    "norm_radius",
    "synthesize",
]


def grid_dims(w: int, h: int, p: int) -> tuple[int, int]:
    """Low-resolution grid size ``(w', h')`` for patch size ``p``."""
    if not 1 <= p <= min(w, h):
        raise ValueError(f"patch size p={p} must lie in [1, min(w, h)={min(w, h)}]")
    return w // p + 1, h // p + 1


def norm_radius(c: int, h: int, w: int, eps_prime: float) -> float:
    """L2 radius ``sqrt(c*h*w) * eps_prime`` of the perturbation budget."""
    return math.sqrt(c * h * w) * eps_prime


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of one perturbation synthesis run.

    ``counts`` may be given as a single int, meaning that many samples for
    every class.
    """

    k: int = 10
    counts: tuple[int, ...] | int = 500
    w: int = 32
    h: int = 32
    c: int = 3
    p: int = 8
    eps_prime: float = 6 / 255
    side_scale: float = 6.0
    seed: int = 0
    padding_enabled: bool = True

    def __post_init__(self):
        counts = self.counts
        if isinstance(counts, (int, np.integer)):
            counts = (int(counts),) * self.k
        object.__setattr__(self, "counts", tuple(int(n) for n in counts))
        if self.k < 2:
            raise ValueError(f"need at least 2 classes, got k={self.k}")
        if len(self.counts) != self.k:
            raise ValueError(f"{len(self.counts)} class counts given for k={self.k}")
        if min(self.counts) < 1:
            raise ValueError("every class needs at least one sample")
        if min(self.w, self.h, self.c) < 1:
            raise ValueError(f"invalid image shape c={self.c}, h={self.h}, w={self.w}")
        grid_dims(self.w, self.h, self.p)
        if not self.eps_prime > 0:
            raise ValueError(f"eps_prime must be positive, got {self.eps_prime}")
        if not self.side_scale > 0:
            raise ValueError(f"side_scale must be positive, got {self.side_scale}")
        if self.point_dim < 63 and self.k > 2**self.point_dim:
            raise ValueError(
                f"not enough vertices: k={self.k} > 2**{self.point_dim} hypercube vertices"
            )

    @property
    def grid(self) -> tuple[int, int]:
        """``(w', h')``, or ``(w, h)`` when padding is disabled."""
        if not self.padding_enabled:
            return self.w, self.h
        return grid_dims(self.w, self.h, self.p)

    @property
    def point_dim(self) -> int:
        gw, gh = self.grid
        return gw * gh * self.c

    @property
    def n(self) -> int:
        return sum(self.counts)

    @property
    def radius(self) -> float:
        return norm_radius(self.c, self.h, self.w, self.eps_prime)

    def as_dict(self) -> dict:
        return {
            "k": self.k,
            "counts": list(self.counts),
            "w": self.w,
            "h": self.h,
            "c": self.c,
            "p": self.p,
            "eps_prime": self.eps_prime,
            "side_scale": self.side_scale,
            "seed": self.seed,
            "padding_enabled": self.padding_enabled,
        }


@dataclass
class ClassCloud:
    """Low-dimensional points of one class before image expansion."""

    class_id: int
    vertex: np.ndarray
    covariance_seed: tuple
    points: np.ndarray


@dataclass
class PerturbationSet:
    """Labelled perturbations of shape ``(n, c, h, w)``, stored as float32.

    ``norm_radius`` is ``None`` for imported third-party perturbations, which
    carry no norm guarantee.
    """

    data: np.ndarray
    labels: np.ndarray
    norm_radius: float | None = None
    provenance: SynthConfig | None = None
    k: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 4:
            raise ValueError(f"perturbation data must be (n, c, h, w), got {self.data.shape}")
        if self.labels.shape != (self.data.shape[0],):
            raise ValueError(
                f"{self.labels.shape[0] if self.labels.ndim else 0} labels for "
                f"{self.data.shape[0]} perturbations"
            )
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.k is None:
            self.k = int(self.labels.max()) + 1 if self.labels.size else 0
        elif self.labels.size and self.labels.max() >= self.k:
            raise ValueError(f"labels must lie in [0, {self.k})")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def subset(self, index) -> "PerturbationSet":
        return replace(self, data=self.data[index], labels=self.labels[index])


def choose_vertices(prng: Prng, k: int, dim: int, s_abs: float) -> np.ndarray:
    """Pick ``k`` distinct hypercube vertices with coordinates ``+-s_abs``.

    Returns an array of shape ``(k, dim)``. Collisions are redrawn.
    """
    if dim < 63 and k > 2**dim:
        raise ValueError(f"not enough vertices: k={k} > 2**{dim}")
    chosen: list[np.ndarray] = []
    seen: set[bytes] = set()
    while len(chosen) < k:
        bits = prng.integers(0, 2, size=dim).astype(np.int8)
        key = bits.tobytes()
        if key in seen:
            continue
        seen.add(key)
        chosen.append(bits)
    signs = 2.0 * np.stack(chosen).astype(np.float64) - 1.0
    return signs * s_abs


def generate_class_cloud(
    prng: Prng,
    n_i: int,
    dim: int,
    vertex,
    class_id: int = 0,
    mixing: np.ndarray | None = None,
) -> ClassCloud:
    """Sample ``n_i`` points ``G @ A + vertex`` for one class.

    ``G`` is standard normal and ``A`` has entries uniform on ``[-1, 1]``,
    drawn from the ``"gaussian"`` and ``"covariance"`` substreams of ``prng``.
    ``mixing`` replaces ``A`` (used by tests to pin the covariance).
    """
    if n_i < 1:
        raise ValueError(f"n_i must be >= 1, got {n_i}")
    vertex = np.asarray(vertex, dtype=np.float64)
    if vertex.shape != (dim,):
        raise ValueError(f"vertex has shape {vertex.shape}, expected ({dim},)")
    cov_stream = prng.substream("covariance")
    if mixing is None:
        mixing = cov_stream.uniform(-1.0, 1.0, size=(dim, dim))
    gauss = sample_standard_normal(prng.substream("gaussian"), n_i * dim).reshape(n_i, dim)
    points = matmul(gauss, mixing) + vertex
    return ClassCloud(class_id, vertex, cov_stream.path, points)


def _cell_indices(size: int, p: int, offset: int) -> np.ndarray:
    return (np.arange(size) + offset) // p


def expand_to_image(point, w: int, h: int, c: int, p: int, crop_offset=(0, 0)) -> np.ndarray:
    """Turn one low-dimensional point into a ``(c, h, w)`` patch mosaic crop.

    The point is read as ``(c, h', w')`` cells; each cell becomes a constant
    ``p x p`` block and the ``(c, h, w)`` window at ``crop_offset = (dy, dx)``
    is returned.
    """
    gw, gh = grid_dims(w, h, p)
    point = np.asarray(point, dtype=np.float64)
    if point.size != gw * gh * c:
        raise ValueError(f"point has {point.size} values, expected {gw * gh * c}")
    dy, dx = (int(v) for v in crop_offset)
    if not (0 <= dy <= gh * p - h and 0 <= dx <= gw * p - w):
        raise ValueError(
            f"crop offset {(dy, dx)} outside [0, {gh * p - h}] x [0, {gw * p - w}]"
        )
    cells = point.reshape(c, gh, gw)
    rows = _cell_indices(h, p, dy)
    cols = _cell_indices(w, p, dx)
    return cells[:, rows][:, :, cols]


def normalize_perturbation(img, eps_prime: float) -> np.ndarray:
    """Rescale ``img`` to L2 norm ``sqrt(img.size) * eps_prime``."""
    img = np.asarray(img, dtype=np.float64)
    norm = np.linalg.norm(img)
    if norm == 0 or not np.isfinite(norm):
        raise ValueError("degenerate sample: perturbation has zero (or non-finite) norm")
    return img * (math.sqrt(img.size) * eps_prime / norm)


def _run_lengths(size: int, p: int, grid: int) -> np.ndarray:
    """Pixels covered by each grid cell, one row per crop offset: (offsets, grid)."""
    return np.stack(
        [np.bincount(_cell_indices(size, p, o), minlength=grid) for o in range(grid * p - size + 1)]
    )


def _mosaic_into(out: np.ndarray, cells: np.ndarray, p: int, offsets: np.ndarray) -> None:
    """Vectorised :func:`expand_to_image` writing into ``out`` (n, c, h, w).

    ``offsets`` must be sorted so that equal offsets are contiguous; each run
    is then filled with broadcast row copies instead of a per-pixel gather.
    """
    h, w = out.shape[2:]
    gh, gw = cells.shape[2:]
    col_runs = _run_lengths(w, p, gw)
    row_edges = np.concatenate(
        [np.zeros((gh * p - h + 1, 1), dtype=np.intp), np.cumsum(_run_lengths(h, p, gh), axis=1)],
        axis=1,
    ).tolist()
    change = np.flatnonzero(np.any(offsets[1:] != offsets[:-1], axis=1)) + 1
    bounds = [0, *change.tolist(), len(offsets)]
    for s, e in zip(bounds[:-1], bounds[1:]):
        dy, dx = offsets[s]
        # widen the small array first so the big writes are whole image rows
        wide = np.repeat(cells[s:e], col_runs[dx], axis=3)
        view = out[s:e]
        edges = row_edges[dy]
        for a in range(gh):
            lo, hi = edges[a], edges[a + 1]
            if hi > lo:
                view[:, :, lo:hi, :] = wide[:, :, a:a + 1, :]


def _visible_counts(size: int, p: int, grid: int, offsets: np.ndarray) -> np.ndarray:
    """How many output pixels each grid cell covers, per sample: (n, grid)."""
    return _run_lengths(size, p, grid).astype(np.float64)[offsets]


def crop_offsets(prng: Prng, n: int, h: int, w: int, p: int) -> np.ndarray:
    """``n`` uniform ``(dy, dx)`` crop offsets, sorted lexicographically.

    Points within a class are i.i.d., so pairing them with sorted offsets
    leaves the joint distribution unchanged while letting the mosaic writer
    handle equal offsets in contiguous runs.
    """
    gw, gh = grid_dims(w, h, p)
    offsets = np.stack(
        [prng.integers(0, gh * p - h + 1, size=n), prng.integers(0, gw * p - w + 1, size=n)], axis=1
    )
    return offsets[np.lexsort((offsets[:, 1], offsets[:, 0]))]


def synthesize(config: SynthConfig) -> PerturbationSet:
    """Generate a full :class:`PerturbationSet` for ``config``.

    Classes are laid out in label order. All randomness comes from substreams
    of ``Prng(config.seed)`` keyed by class, so classes could be produced in
    any order with the same result.
    """
    root = Prng(config.seed)
    c, h, w, p = config.c, config.h, config.w, config.p
    gw, gh = config.grid
    dim = config.point_dim
    sigma_a = math.sqrt(dim / 3.0)
    vertices = choose_vertices(root.substream("vertices"), config.k, dim, config.side_scale * sigma_a)
    radius = config.radius

    data = np.empty((config.n, c, h, w), dtype=np.float32)
    labels = np.repeat(np.arange(config.k), config.counts)
    start = 0
    for i, n_i in enumerate(config.counts):
        stream = root.substream("class", i)
        cloud = generate_class_cloud(stream, n_i, dim, vertices[i], class_id=i)
        cells = cloud.points.reshape(n_i, c, gh, gw)
        if config.padding_enabled:
            offsets = crop_offsets(stream.substream("crop"), n_i, h, w, p)
            # exact norm of each cropped mosaic from per-cell pixel multiplicities
            row_w = _visible_counts(h, p, gh, offsets[:, 0])
            col_w = _visible_counts(w, p, gw, offsets[:, 1])
            sq_norm = np.einsum("ncab,na,nb->n", cells**2, row_w, col_w)
        else:
            sq_norm = np.einsum("ncab,ncab->n", cells, cells)
        norms = np.sqrt(sq_norm)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise ValueError(f"degenerate sample in class {i}")
        scaled = (cells * (radius / norms)[:, None, None, None]).astype(np.float32)
        if config.padding_enabled:
            _mosaic_into(data[start:start + n_i], scaled, p, offsets)
        else:
            data[start:start + n_i] = scaled
        start += n_i
    return PerturbationSet(data, labels, norm_radius=radius, provenance=config, k=config.k)
