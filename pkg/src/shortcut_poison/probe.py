"""Linear-separability probes for labelled perturbation sets.

Perturbations are flattened and scaled to unit L2 norm, then a multinomial
linear model and a one-hidden-layer ReLU network (width 30) are fitted with
full-batch L-BFGS for a fixed number of steps. The reported number is
training accuracy; a shuffled-label run gives the negative control.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .numcore import Prng, sample_standard_normal, softmax_cross_entropy
from .shortgen import PerturbationSet

__all__ = [
    "ProbeReport",
    "prepare_features",
    "lbfgs_minimize",
    "linear_objective",
    "two_layer_objective",
    "fit_linear",
    "fit_two_layer",
    "shuffled_label_control",
    "LinearProbe",
    "TwoLayerProbe",
]


@dataclass
class ProbeReport:
    model_kind: str
    train_accuracy: float
    final_loss: float
    steps: int
    seed: int
    control_accuracy: float | None = None
    loss_trace: list[float] = field(default_factory=list)

    def row(self) -> list:
        control = "" if self.control_accuracy is None else repr(self.control_accuracy)
        return [self.model_kind, repr(self.train_accuracy), repr(self.final_loss), self.steps, control, self.seed]

    HEADER = ["model_kind", "train_accuracy", "final_loss", "steps", "control_accuracy", "seed"]


def prepare_features(perts) -> np.ndarray:
    """Flatten each sample and scale it to unit L2 norm; returns (n, d) float64."""
    data = perts.data if isinstance(perts, PerturbationSet) else np.asarray(perts)
    if data.shape[0] < 1:
        raise ValueError("need at least one sample")
    x = data.reshape(data.shape[0], -1).astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(~(norms > 0) | ~np.isfinite(norms))
    if bad.size:
        raise ValueError(f"cannot normalise zero-norm or non-finite rows, e.g. row {bad[0]}")
    return x / norms[:, None]


def _two_loop(grad, history) -> np.ndarray:
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * (s @ q)
        q -= a * y
        alphas.append(a)
    s, y, _ = history[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(history, reversed(alphas)):
        q += (a - rho * (y @ q)) * s
    return q


def lbfgs_minimize(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    max_steps: int = 50,
    history_size: int = 10,
    c1: float = 1e-4,
    gtol: float = 1e-8,
    max_halvings: int = 60,
) -> tuple[np.ndarray, list[float]]:
    """Limited-memory BFGS with Armijo backtracking (step halved until accepted).

    When the sufficient-decrease test is below the rounding level of ``f``, a
    step is also accepted if ``f`` does not grow beyond rounding and the
    directional derivative stays below ``(1 - 2*c1) * |slope|``.

    ``objective(x)`` returns ``(value, gradient)``. Stops after ``max_steps``
    accepted steps, when the gradient norm drops below ``gtol``, or when no
    step size passes the Armijo test. Returns the final point and the
    objective values of every iterate, starting with ``x0``.
    """
    x = np.array(x0, dtype=np.float64)

    def evaluate(point, step):
        f, g = objective(point)
        f = float(f)
        g = np.asarray(g, dtype=np.float64)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise FloatingPointError(f"objective returned a non-finite value or gradient at step {step}")
        return f, g

    f, g = evaluate(x, 0)
    trace = [f]
    history: deque = deque(maxlen=history_size)
    for step in range(1, max_steps + 1):
        if np.linalg.norm(g) < gtol:
            break
        direction = -_two_loop(g, history) if history else -g
        slope = g @ direction
        if slope >= 0:
            history.clear()
            direction, slope = -g, -(g @ g)
        t = 1.0
        for _ in range(max_halvings):
            x_new = x + t * direction
            f_new, g_new = evaluate(x_new, step)
            if f_new <= f + c1 * t * slope:
                break
            # near the optimum the decrease drowns in rounding error; accept a step that keeps f
            # within rounding and does not overshoot the 1-D minimum (approximate Armijo)
            noise = 1e-12 * max(abs(f), abs(f_new))
            if -c1 * t * slope < noise and f_new <= f + noise and g_new @ direction <= (1 - 2 * c1) * -slope:
                break
            t *= 0.5
        else:
            break
        s, y = x_new - x, g_new - g
        sy = s @ y
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            history.append((s, y, 1.0 / sy))
        else:
            # Armijo-only steps can give negative curvature; stale pairs then stall the search
            history.clear()
        x, f, g = x_new, f_new, g_new
        trace.append(f)
    return x, trace


def _check_problem(features, labels, k):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    y = np.asarray(labels).astype(np.int64)
    if y.shape != (x.shape[0],):
        raise ValueError(f"expected {x.shape[0]} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return x, y


def linear_objective(features, labels, k):
    """Mean cross-entropy of ``x @ W + b`` over parameters packed as ``[W.ravel(), b]``."""
    x, y = _check_problem(features, labels, k)
    d = x.shape[1]

    def unpack(theta):
        return theta[: d * k].reshape(d, k), theta[d * k:]

    def fun(theta):
        w, b = unpack(theta)
        loss, g_logits = softmax_cross_entropy(x @ w + b, y)
        return loss, np.concatenate([(x.T @ g_logits).ravel(), g_logits.sum(axis=0)])

    def logits(theta):
        w, b = unpack(theta)
        return x @ w + b

    fun.logits = logits
    fun.size = d * k + k
    return fun


def two_layer_objective(features, labels, k, width=30):
    """Cross-entropy of ``relu(x @ W1 + b1) @ W2 + b2``; parameters packed in that order."""
    x, y = _check_problem(features, labels, k)
    d = x.shape[1]
    sizes = [d * width, width, width * k, k]
    cuts = np.cumsum(sizes)[:-1]

    def unpack(theta):
        w1, b1, w2, b2 = np.split(theta, cuts)
        return w1.reshape(d, width), b1, w2.reshape(width, k), b2

    def fun(theta):
        w1, b1, w2, b2 = unpack(theta)
        pre = x @ w1 + b1
        hidden = np.maximum(pre, 0.0)
        loss, g_logits = softmax_cross_entropy(hidden @ w2 + b2, y)
        g_hidden = (g_logits @ w2.T) * (pre > 0)
        return loss, np.concatenate([
            (x.T @ g_hidden).ravel(), g_hidden.sum(axis=0),
            (hidden.T @ g_logits).ravel(), g_logits.sum(axis=0),
        ])

    def logits(theta):
        w1, b1, w2, b2 = unpack(theta)
        return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2

    def init(prng: Prng):
        # He-normal weights, zero biases
        w1 = sample_standard_normal(prng.substream("w1"), d * width) * np.sqrt(2.0 / d)
        w2 = sample_standard_normal(prng.substream("w2"), width * k) * np.sqrt(2.0 / width)
        return np.concatenate([w1, np.zeros(width), w2, np.zeros(k)])

    fun.logits = logits
    fun.init = init
    fun.size = sum(sizes)
    return fun


def _accuracy(logits, labels) -> float:
    return 100.0 * float(np.mean(logits.argmax(axis=1) == labels))


def fit_linear(features, labels, k, max_steps=50, seed=0) -> ProbeReport:
    """Train a multinomial linear model from zero with L-BFGS; report training accuracy."""
    fun = linear_objective(features, labels, k)
    theta, trace = lbfgs_minimize(fun, np.zeros(fun.size), max_steps=max_steps)
    acc = _accuracy(fun.logits(theta), np.asarray(labels))
    return ProbeReport("linear", acc, trace[-1], len(trace) - 1, seed, loss_trace=trace)


def fit_two_layer(features, labels, k, width=30, max_steps=50, seed=0) -> ProbeReport:
    """Train a width-``width`` ReLU network with L-BFGS from a seeded He init."""
    fun = two_layer_objective(features, labels, k, width)
    theta0 = fun.init(Prng(seed).substream("two_layer"))
    theta, trace = lbfgs_minimize(fun, theta0, max_steps=max_steps)
    acc = _accuracy(fun.logits(theta), np.asarray(labels))
    return ProbeReport("two_layer", acc, trace[-1], len(trace) - 1, seed, loss_trace=trace)


def shuffled_label_control(features, labels, k, prng: Prng, max_steps=50, permutation=None) -> ProbeReport:
    """Fit the linear probe after permuting the labels uniformly at random.

    With ``n <= d + 1`` points in general position even shuffled labels can
    be fitted perfectly, so the control is only informative for ``n > d + 1``.
    """
    labels = np.asarray(labels)
    perm = prng.permutation(labels.size) if permutation is None else np.asarray(permutation)
    report = fit_linear(features, labels[perm], k, max_steps=max_steps, seed=prng.seed)
    report.control_accuracy = report.train_accuracy
    return report


class _ProbeBase(ClassifierMixin, BaseEstimator):
    def _prepare(self, X):
        X = np.asarray(X)
        if X.ndim > 2:
            X = X.reshape(X.shape[0], -1)
        X = check_array(X, dtype=np.float64)
        return prepare_features(X) if self.normalize else X

    def fit(self, X, y):
        X = self._prepare(X)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        fun = self._objective(X, y_enc, self.classes_.size)
        self.coef_, trace = lbfgs_minimize(fun, self._theta0(fun), max_steps=self.max_steps)
        self.loss_trace_ = trace
        self.n_iter_ = len(trace) - 1
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = self._prepare(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self._forward(X)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class LinearProbe(_ProbeBase):
    """Multinomial logistic regression trained with :func:`lbfgs_minimize`."""

    def __init__(self, max_steps=50, normalize=True, random_state=0):
        self.max_steps = max_steps
        self.normalize = normalize
        self.random_state = random_state

    def _objective(self, X, y, k):
        return linear_objective(X, y, k)

    def _theta0(self, fun):
        return np.zeros(fun.size)

    def _forward(self, X):
        k = self.classes_.size
        d = self.n_features_in_
        return X @ self.coef_[: d * k].reshape(d, k) + self.coef_[d * k:]


class TwoLayerProbe(_ProbeBase):
    """One-hidden-layer ReLU network trained with :func:`lbfgs_minimize`."""

    def __init__(self, width=30, max_steps=50, normalize=True, random_state=0):
        self.width = width
        self.max_steps = max_steps
        self.normalize = normalize
        self.random_state = random_state

    def _objective(self, X, y, k):
        return two_layer_objective(X, y, k, self.width)

    def _theta0(self, fun):
        return fun.init(Prng(self.random_state).substream("two_layer"))

    def _forward(self, X):
        k, d, h = self.classes_.size, self.n_features_in_, self.width
        w1, b1, w2, b2 = np.split(self.coef_, np.cumsum([d * h, h, h * k]))
        return np.maximum(X @ w1.reshape(d, h) + b1, 0.0) @ w2.reshape(h, k) + b2
