"""One-vs-all logistic regression recognizer.

Multiclass posteriors are the per-class sigmoids normalized across classes;
the binary kind (used for untrimmed detection) is a single sigmoid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

MULTICLASS = "multiclass"
BINARY = "binary"


class TrainingError(ValueError):
    pass


_sigmoid = expit


def augment(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        return np.append(X, 1.0)
    return np.hstack([X, np.ones((X.shape[0], 1))])


def logistic_objective(w, Xa, z, l2):
    """Regularized negative log-likelihood and its gradient.

    ``Xa`` is bias-augmented (last column ones), ``z`` holds 0/1 targets and the
    bias weight is left unpenalized.
    """
    s = Xa @ w
    # log(1 + e^s) - z*s, computed stably
    f = np.sum(np.logaddexp(0.0, s) - z * s) + 0.5 * l2 * np.dot(w[:-1], w[:-1])
    g = Xa.T @ (_sigmoid(s) - z)
    g[:-1] += l2 * w[:-1]
    return f, g


def _fit_binary(Xa, z, l2, max_iter, tol, nonneg=False):
    """Gradient descent with backtracking.  With ``nonneg`` the non-bias
    weights are projected onto [0, inf) after every step."""
    def project(v):
        if nonneg:
            v[:-1] = np.maximum(v[:-1], 0.0)
        return v

    w = np.zeros(Xa.shape[1])
    f, g = logistic_objective(w, Xa, z, l2)
    step = 1.0
    for _ in range(max_iter):
        pg = w - project(w - g)  # projected gradient; equals g when unconstrained
        if np.sqrt(float(pg @ pg)) < tol:
            break
        step *= 2.0
        while True:
            w_new = project(w - step * g)
            d = w_new - w
            f_new, g_new = logistic_objective(w_new, Xa, z, l2)
            if f_new <= f + 0.5 * float(g @ d) or step < 1e-20:
                break
            step *= 0.5
        w, f, g = w_new, f_new, g_new
    return w


@dataclass
class LinearClassifier:
    weights: np.ndarray  # (L, dim + 1); a single row for the binary kind
    l2: float
    kind: str = MULTICLASS

    @property
    def dim(self) -> int:
        return self.weights.shape[1] - 1

    @property
    def n_classes(self) -> int:
        return 2 if self.kind == BINARY else self.weights.shape[0]

    def _check(self, psi):
        psi = np.asarray(psi, dtype=float)
        if psi.shape[-1] != self.dim:
            raise ValueError(f"descriptor has dimension {psi.shape[-1]}, classifier expects {self.dim}")
        return psi

    def posteriors(self, psi) -> np.ndarray:
        """P(y | psi) for every class; works on a single vector or a batch of rows."""
        psi = self._check(psi)
        s = psi @ self.weights[:, :-1].T + self.weights[:, -1]
        p = _sigmoid(s)
        if self.kind == BINARY:
            return np.concatenate([1.0 - p, p], axis=-1)
        return p / p.sum(axis=-1, keepdims=True)

    def posterior(self, psi, y: int) -> float:
        psi = self._check(psi)
        if self.kind == BINARY:
            p = float(_sigmoid(psi @ self.weights[0, :-1] + self.weights[0, -1]))
            return p if y == 1 else 1.0 - p
        return float(self.posteriors(psi)[y])

    def predict(self, psi):
        return np.argmax(self.posteriors(psi), axis=-1)

    def to_dict(self):
        return {"kind": self.kind, "l2": self.l2, "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"], dtype=float), float(d["l2"]), d["kind"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def train_classifier(X, y, l2=1.0, kind=MULTICLASS, n_classes=None,
                     max_iter=5000, tol=1e-6, nonneg=False) -> LinearClassifier:
    """Fit one regularized logistic model per class by full-batch gradient
    descent with backtracking line search.  ``nonneg`` keeps every weight
    except the bias at or above zero."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise TrainingError("X must be (n, dim) with one label per row")
    if not np.all(np.isfinite(X)):
        raise TrainingError("non-finite descriptor values")
    Xa = augment(X)
    if kind == BINARY:
        for c in (0, 1):
            if not np.any(y == c):
                raise TrainingError(f"binary training needs examples of class {c}")
        w = _fit_binary(Xa, (y == 1).astype(float), l2, max_iter, tol, nonneg)
        return LinearClassifier(w[None, :], float(l2), BINARY)
    if kind != MULTICLASS:
        raise TrainingError(f"unknown classifier kind {kind!r}")
    L = int(n_classes) if n_classes is not None else int(y.max()) + 1
    W = np.zeros((L, Xa.shape[1]))
    for c in range(L):
        if not np.any(y == c):
            raise TrainingError(f"class {c} has no training examples")
        W[c] = _fit_binary(Xa, (y == c).astype(float), l2, max_iter, tol, nonneg)
    return LinearClassifier(W, float(l2), MULTICLASS)

