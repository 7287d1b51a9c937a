"""Comparison selectors: Passive, Object-Preference and decision-tree orderings."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

CYCLE = "cycle"
TOP = "top"
PREFERENCE = "preference"


class PassiveSelector:
    """Uniformly random legal action; never chooses Skip while any feature
    action is available."""

    def __init__(self, skip_index: Optional[int] = None):
        self.skip_index = skip_index

    def begin(self, rng):
        skip = self.skip_index

        def choose(candidates, phi):
            cand = np.asarray(candidates)
            if skip is not None and cand.size > 1:
                cand = cand[cand != skip]
            return int(cand[rng.integers(cand.size)])
        return choose


def passive_selector(action_set) -> PassiveSelector:
    return PassiveSelector(action_set.skip_index)


@dataclass(frozen=True)
class StaticOrdering:
    """Ranked action list followed in order, wrapping around.

    At each step the first ranked action (from the current position) that is
    legal is taken; if none is, the lowest-index legal non-Skip action is.
    """

    ranked: tuple
    mode: str = CYCLE
    skip_index: Optional[int] = None

    def begin(self, rng=None):
        ranked = list(self.ranked)
        skip = self.skip_index
        pos = [0]

        def choose(candidates, phi):
            legal = set(int(c) for c in candidates)
            n = len(ranked)
            for i in range(n):
                a = ranked[(pos[0] + i) % n]
                if a in legal:
                    pos[0] = (pos[0] + i + 1) % n
                    return a
            rest = sorted(c for c in legal if c != skip)
            return rest[0] if rest else int(min(legal))
        return choose


def exhaustive_selector(action_set) -> StaticOrdering:
    """Round-robin over every feature action in index order."""
    return StaticOrdering(tuple(int(a) for a in action_set.work_indices), CYCLE,
                          action_set.skip_index)


def object_pref_order(observations, labels, skip_index=None) -> StaticOrdering:
    """Rank actions by their largest per-activity mean observation.

    ``observations`` is (clips, actions).  Ties go to the lower action index.
    """
    X = np.asarray(observations, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    # sorting first makes the means, and so the tie-breaking, independent of clip order
    means = np.stack([np.sort(X[labels == c], axis=0).mean(axis=0) for c in classes])
    score = means.max(axis=0)
    order = sorted(range(X.shape[1]), key=lambda m: (-score[m], m))
    return StaticOrdering(tuple(order), PREFERENCE, skip_index)


# -- CART ---------------------------------------------------------------------------

def _gini(counts):
    n = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / n[..., None]
    return np.where(n > 0, 1.0 - np.sum(p * p, axis=-1), 0.0)


@dataclass
class _Node:
    counts: np.ndarray
    feature: int = -1
    threshold: float = 0.0
    left: "_Node" = None
    right: "_Node" = None

    @property
    def is_leaf(self):
        return self.left is None


class DecisionTree:
    """Binary CART classifier with Gini splits at midpoints between distinct
    feature values."""

    def __init__(self, max_depth=12, min_leaf=2):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.root = None
        self.importances_ = None
        self.n_classes = 0

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=int)
        self.n_classes = int(y.max()) + 1
        self._gain = np.zeros(X.shape[1])
        self._n = len(y)
        self.root = self._grow(X, y, 0)
        total = self._gain.sum()
        self.importances_ = self._gain / total if total > 0 else np.zeros(X.shape[1])
        return self

    def _best_split(self, X, y):
        n, F = X.shape
        onehot = np.eye(self.n_classes)[y]
        parent = _gini(onehot.sum(axis=0))
        best = (0.0, -1, 0.0)
        for f in range(F):
            order = np.argsort(X[:, f], kind="stable")
            xs = X[order, f]
            left = np.cumsum(onehot[order], axis=0)[:-1]
            right = left[-1] + onehot[order][-1] - left
            nl = np.arange(1, n)
            ok = (xs[1:] > xs[:-1]) & (nl >= self.min_leaf) & (n - nl >= self.min_leaf)
            if not ok.any():
                continue
            child = (nl * _gini(left) + (n - nl) * _gini(right)) / n
            gain = np.where(ok, parent - child, -np.inf)
            # near-equal gains resolve to the lowest threshold, not to float noise
            i = int(np.flatnonzero(gain >= gain.max() - 1e-12)[0])
            if gain[i] > best[0] + 1e-12:
                best = (float(gain[i]), f, 0.5 * (xs[i] + xs[i + 1]))
        return best

    def _grow(self, X, y, depth):
        node = _Node(np.bincount(y, minlength=self.n_classes))
        if depth >= self.max_depth or len(y) < 2 * self.min_leaf or np.count_nonzero(node.counts) < 2:
            return node
        gain, f, thr = self._best_split(X, y)
        if f < 0:
            return node
        self._gain[f] += gain * len(y) / self._n
        mask = X[:, f] <= thr
        node.feature, node.threshold = f, thr
        node.left = self._grow(X[mask], y[mask], depth + 1)
        node.right = self._grow(X[~mask], y[~mask], depth + 1)
        return node

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(len(X), dtype=int)
        for i, x in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if x[node.feature] <= node.threshold else node.right
            out[i] = int(np.argmax(node.counts))
        return out


def train_decision_tree(attributes, labels, max_depth=12, min_leaf=2):
    """Fit CART; returns (tree, normalized Gini importances)."""
    tree = DecisionTree(max_depth, min_leaf).fit(attributes, labels)
    return tree, tree.importances_


def importance_ranking(importances):
    """Attributes with positive importance, most important first (ties to the
    lower index)."""
    imp = np.asarray(importances, dtype=float)
    return [int(i) for i in sorted(np.flatnonzero(imp > 0), key=lambda i: (-imp[i], i))]


def dt_selectors(importances, P, action_of=None, skip_index=None):
    """(DT-Static, DT-Top) orderings from Gini importances.

    ``action_of`` maps attribute index to action index (identity by default).
    DT-Static cycles every selected attribute; DT-Top cycles only the top ``P``.
    """
    if P < 1:
        raise ValueError("P must be at least 1")
    ranked = importance_ranking(importances)
    if not ranked:
        ranked = list(range(len(importances)))
    if action_of is not None:
        ranked = [int(action_of[i]) for i in ranked]
    if P > len(ranked):
        warnings.warn(f"P={P} exceeds the {len(ranked)} ranked features; using all of them")
        P = len(ranked)
    return (StaticOrdering(tuple(ranked), CYCLE, skip_index),
            StaticOrdering(tuple(ranked[:P]), TOP, skip_index))
