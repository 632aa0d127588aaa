"""Exact (O(n^2)) t-SNE and the silhouette score used to quantify clustering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .dataio import write_csv
from .numcore import Prng, sample_standard_normal

__all__ = [
    "Embedding",
    "conditional_affinities",
    "pairwise_affinities",
    "stratified_subsample",
    "tsne_embed",
    "silhouette",
    "ExactTSNE",
]

_EXAGGERATION = 12.0
_EXAGGERATION_ITERS = 250
_LEARNING_RATE = 200.0
_INIT_STD = 1e-4
_FLOOR = 1e-12


@dataclass
class Embedding:
    points: np.ndarray
    labels: np.ndarray | None
    kl_trace: list[float]
    params: dict = field(default_factory=dict)
    indices: np.ndarray | None = None

    def to_csv(self, path) -> None:
        labels = self.labels if self.labels is not None else np.full(len(self.points), -1)
        write_csv(path, ["x", "y", "label"],
                  [(repr(float(x)), repr(float(y)), int(c)) for (x, y), c in zip(self.points, labels)])


def _squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_affinities(x, perplexity: float, tol: float = 1e-3, max_steps: int = 200):
    """Row-conditional Gaussian affinities ``P[j|i]`` matched to ``perplexity``.

    Each row's precision is found by bisection (doubling until bracketed) so
    that ``exp(H(P[.|i]))`` is within ``tol`` of ``perplexity``. Returns the
    ``(n, n)`` matrix of conditionals and the per-row precisions.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 5 <= perplexity <= (n - 1) / 3:
        raise ValueError(f"perplexity must lie in [5, (n-1)/3 = {(n - 1) / 3:.2f}], got {perplexity}")
    dist = _squared_distances(x)
    np.fill_diagonal(dist, np.inf)
    # perplexity is shift-invariant per row; shifting by the row minimum avoids underflow
    dist -= dist.min(axis=1, keepdims=True)
    beta = np.ones(n)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    cond = np.empty((n, n))
    target = np.log(perplexity)
    for _ in range(max_steps):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        weights = np.exp(-dist[rows] * beta[rows, None])
        total = weights.sum(axis=1)
        probs = weights / total[:, None]
        weighted = np.where(probs > 0, dist[rows], 0.0)
        entropy = np.log(total) + beta[rows] * np.einsum("ij,ij->i", probs, weighted)
        cond[rows] = probs
        done = np.abs(np.exp(entropy) - perplexity) <= tol
        active[rows[done]] = False
        rows, entropy = rows[~done], entropy[~done]
        too_flat = entropy > target  # precision too small
        lo[rows[too_flat]] = beta[rows[too_flat]]
        hi[rows[~too_flat]] = beta[rows[~too_flat]]
        beta[rows] = np.where(np.isinf(hi[rows]), beta[rows] * 2.0, 0.5 * (lo[rows] + hi[rows]))
    if active.any():
        raise ValueError(
            f"perplexity search did not converge for {active.sum()} rows "
            f"(first: row {np.flatnonzero(active)[0]}); duplicate points?"
        )
    return cond, beta


def pairwise_affinities(x, perplexity: float) -> np.ndarray:
    """Symmetric joint affinities ``(P[j|i] + P[i|j]) / 2n``, summing to one."""
    cond, _ = conditional_affinities(x, perplexity)
    return (cond + cond.T) / (2.0 * cond.shape[0])


def stratified_subsample(labels, cap: int, prng: Prng) -> np.ndarray:
    """Sorted indices of at most ``cap`` samples, keeping class proportions."""
    labels = np.asarray(labels)
    n = labels.size
    if n <= cap:
        return np.arange(n)
    classes, counts = np.unique(labels, return_counts=True)
    quota = np.floor(counts * cap / n).astype(int)
    # hand out the rounding remainder to the largest fractional parts
    extra = cap - quota.sum()
    order = np.argsort(-(counts * cap / n - quota), kind="stable")
    quota[order[:extra]] += 1
    picks = [
        np.flatnonzero(labels == c)[prng.substream("class", int(c)).choice_without_replacement(cnt, q)]
        for c, cnt, q in zip(classes, counts, quota)
    ]
    return np.sort(np.concatenate(picks))


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def tsne_embed(x, perplexity: float = 30.0, iters: int = 1000, prng: Prng | None = None,
               labels=None, max_points: int = 3000) -> Embedding:
    """Embed ``x`` in 2-D by gradient descent on KL(P || Q) with Student-t ``Q``.

    Early exaggeration x12 and momentum 0.5 for the first 250 iterations,
    momentum 0.8 afterwards, learning rate 200, Gaussian init with std 1e-4.
    Inputs larger than ``max_points`` are subsampled per class first.
    ``kl_trace`` holds KL(P || Q) with the un-exaggerated ``P`` after every
    iteration.
    """
    prng = prng if prng is not None else Prng(0)
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    n_all = x.shape[0]
    if n_all < 10:
        raise ValueError(f"t-SNE needs at least 10 points, got {n_all}")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n_all,):
            raise ValueError(f"expected {n_all} labels, got shape {labels.shape}")
    index = stratified_subsample(labels if labels is not None else np.zeros(n_all, int),
                                 max_points, prng.substream("subsample"))
    x = x[index]
    n = x.shape[0]

    p = np.maximum(pairwise_affinities(x, perplexity), _FLOOR)
    y = _INIT_STD * sample_standard_normal(prng.substream("init"), 2 * n).reshape(n, 2)
    velocity = np.zeros_like(y)
    trace = []
    for it in range(iters):
        early = it < _EXAGGERATION_ITERS
        momentum = 0.5 if early else 0.8
        p_eff = p * _EXAGGERATION if early else p
        num = 1.0 / (1.0 + _squared_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), _FLOOR)
        weights = (p_eff - q) * num
        grad = 4.0 * (weights.sum(axis=1)[:, None] * y - weights @ y)
        velocity = momentum * velocity - _LEARNING_RATE * grad
        y = y + velocity
        y -= y.mean(axis=0)
        trace.append(_kl(p, q))
    return Embedding(
        y,
        labels[index] if labels is not None else None,
        trace,
        {"perplexity": perplexity, "iters": iters, "seed": prng.seed},
        index,
    )


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if classes.size < 2:
        raise ValueError("silhouette needs at least two classes")
    if counts.min() < 2:
        raise ValueError(f"class {classes[counts.argmin()]!r} has a single point")
    dist = np.sqrt(_squared_distances(points.reshape(points.shape[0], -1)))
    onehot = np.eye(classes.size)[inverse]
    sums = dist @ onehot  # (n, classes): total distance to each class
    own = inverse
    a = sums[np.arange(len(own)), own] / (counts[own] - 1)
    means = sums / counts[None, :]
    means[np.arange(len(own)), own] = np.inf
    b = means.min(axis=1)
    s = (b - a) / np.maximum(a, b)
    s = np.where(np.maximum(a, b) > 0, s, 0.0)
    return float(np.mean(s))


class ExactTSNE(TransformerMixin, BaseEstimator):
    """Estimator wrapper for :func:`tsne_embed` (``fit_transform`` only, like sklearn's TSNE)."""

    def __init__(self, perplexity=30.0, n_iter=1000, max_points=3000, random_state=0):
        self.perplexity = perplexity
        self.n_iter = n_iter
        self.max_points = max_points
        self.random_state = random_state

    def fit(self, X, y=None):
        emb = tsne_embed(X, self.perplexity, self.n_iter, Prng(self.random_state), labels=y,
                         max_points=self.max_points)
        self.embedding_ = emb.points
        self.kl_divergence_ = emb.kl_trace[-1] if emb.kl_trace else float("nan")
        self.sample_indices_ = emb.indices
        self.n_features_in_ = np.asarray(X).reshape(len(X), -1).shape[1]
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X, y).embedding_
