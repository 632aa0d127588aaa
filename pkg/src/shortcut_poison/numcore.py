"""Seeded random streams and small dense-math primitives shared by every module.

Randomness is drawn from numpy's PCG64 bit generator. Substreams are derived
by hashing a label path into the ``spawn_key`` of a :class:`numpy.random.SeedSequence`,
so a stream depends only on ``(seed, path)`` and never on the order in which
other streams were consumed.
"""

from __future__ import annotations

import copy
import hashlib
from typing import Hashable

import numpy as np

__all__ = [
    "Prng",
    "sample_standard_normal",
    "matmul",
    "softmax_cross_entropy",
]

_SEED_MASK = (1 << 64) - 1


def _label_word(label: Hashable) -> int:
    # type-tagged so that the int 3 and the string "3" give different streams
    token = f"{type(label).__name__}:{label!r}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(token, digest_size=4).digest(), "little")


class Prng:
    """Splittable, seeded pseudo-random generator.

    Parameters
    ----------
    seed : int
        64-bit seed. Negative values are folded into the unsigned range.
    path : tuple, optional
        Labels identifying the substream. Use :meth:`substream` rather than
        passing this directly.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & _SEED_MASK
        self.path = tuple(path)
        spawn_key = tuple(_label_word(label) for label in self.path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=spawn_key))
        )
        self._cached_normal: float | None = None

    def __repr__(self) -> str:
        return f"Prng(seed={self.seed}, path={self.path!r})"

    def substream(self, *labels: Hashable) -> "Prng":
        """Independent child stream; does not advance ``self``."""
        return Prng(self.seed, self.path + tuple(labels))

    def copy(self) -> "Prng":
        """Snapshot of the current state (both copies then evolve separately)."""
        return copy.deepcopy(self)

    @property
    def generator(self) -> np.random.Generator:
        """Underlying numpy generator, for distributions not wrapped here."""
        return self._gen

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def random_bits(self, n: int) -> np.ndarray:
        """``n`` uniform 64-bit unsigned integers."""
        return self._gen.integers(0, _SEED_MASK, size=n, dtype=np.uint64, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, m: int) -> np.ndarray:
        """``m`` distinct indices from ``range(n)``, in draw order."""
        return self._gen.choice(n, size=m, replace=False)

    def beta(self, a: float, b: float) -> float:
        return float(self._gen.beta(a, b))

    def standard_normal(self, n: int) -> np.ndarray:
        return sample_standard_normal(self, n)


def sample_standard_normal(prng: Prng, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. N(0, 1) values with the Box-Muller transform.

    Values come in (cos, sin) pairs; when ``n`` is odd the unused sine half of
    the last pair is cached on ``prng`` and returned first by the next call.
    """
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    out = np.empty(n, dtype=np.float64)
    start = 0
    if n and prng._cached_normal is not None:
        out[0] = prng._cached_normal
        prng._cached_normal = None
        start = 1
    remaining = n - start
    if remaining == 0:
        return out
    n_pairs = (remaining + 1) // 2
    u = prng._gen.random((n_pairs, 2))
    # 1 - U lies in (0, 1], keeping the log finite
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    angle = 2.0 * np.pi * u[:, 1]
    pairs = np.empty((n_pairs, 2), dtype=np.float64)
    pairs[:, 0] = radius * np.cos(angle)
    pairs[:, 1] = radius * np.sin(angle)
    flat = pairs.reshape(-1)
    out[start:] = flat[:remaining]
    if flat.size > remaining:
        prng._cached_normal = float(flat[-1])
    return out


def matmul(a, b) -> np.ndarray:
    """Dense float64 product with shape and finiteness checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matmul produced non-finite entries")
    return out


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to ``logits``.

    Returns
    -------
    loss : float
    grad : ndarray of shape (n, k)
        ``(softmax(logits) - onehot(labels)) / n``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.intp)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels])) if n else 0.0
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    grad /= max(n, 1)
    return loss, grad
