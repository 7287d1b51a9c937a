"""Diagonal-covariance Gaussian mixture over full action-observation vectors,
fitted by EM, with conditional-mean imputation of unobserved coordinates."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class DiagonalGMM:
    weights: np.ndarray    # (n,)
    means: np.ndarray      # (n, M)
    variances: np.ndarray  # (n, M)
    var_floor: float = 1e-4
    ll_trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def component_loglik(self, X, cols=None):
        """log N(x | mu_i, Sigma_i) restricted to ``cols``; shape (rows, n)."""
        X = np.atleast_2d(X)
        mu, var = self.means, self.variances
        if cols is not None:
            mu, var = mu[:, cols], var[:, cols]
        diff2 = (X[:, None, :] - mu[None, :, :]) ** 2
        return -0.5 * np.sum(diff2 / var + np.log(var) + LOG_2PI, axis=2)

    def loglik(self, X):
        """Per-row log p(x)."""
        return logsumexp(self.component_loglik(X) + np.log(self.weights), axis=1)

    def sample(self, n, rng):
        z = rng.choice(self.n_components, size=n, p=self.weights)
        return self.means[z] + np.sqrt(self.variances[z]) * rng.standard_normal((n, self.dim)), z

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist(), "var_floor": self.var_floor}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"], float), np.asarray(d["means"], float),
                   np.asarray(d["variances"], float), float(d.get("var_floor", 1e-4)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _kmeanspp(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(X))
        else:
            idx = rng.choice(len(X), p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def fit_gmm(data, n_components=5, seed=0, max_iter=200, tol=1e-6, var_floor=1e-4) -> DiagonalGMM:
    """EM for a diagonal GMM, seeded k-means++ style.

    Stops when the mean per-row log-likelihood improves by less than ``tol``.
    Variances are floored at ``var_floor``; a component whose variance hits the
    floor is recorded in ``warnings``.
    """
    X = np.asarray(data, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("fit_gmm needs a non-empty (rows, dim) matrix")
    if X.shape[0] < n_components:
        raise ValueError(f"{X.shape[0]} rows cannot support {n_components} components")
    rng = np.random.default_rng(seed)
    n, M = X.shape
    k = n_components
    gvar = np.maximum(X.var(axis=0), var_floor)
    gmm = DiagonalGMM(np.full(k, 1.0 / k), _kmeanspp(X, k, rng),
                      np.tile(gvar, (k, 1)), var_floor)
    prev = -np.inf
    for it in range(max_iter):
        # E step
        lp = gmm.component_loglik(X) + np.log(gmm.weights)
        row_ll = logsumexp(lp, axis=1)
        ll = float(row_ll.mean())
        gmm.ll_trace.append(ll)
        if it > 0 and ll - prev < tol:
            break
        prev = ll
        resp = np.exp(lp - row_ll[:, None])
        # M step
        nk = resp.sum(axis=0)
        safe = np.maximum(nk, 1e-300)
        means = (resp.T @ X) / safe[:, None]
        var = (resp.T @ (X * X)) / safe[:, None] - means ** 2
        empty = nk < 1e-12
        if np.any(empty):
            means[empty] = gmm.means[empty]
            var[empty] = gmm.variances[empty]
        floored = var < var_floor
        if np.any(floored.all(axis=1)):
            msg = f"iteration {it}: component(s) {np.flatnonzero(floored.all(axis=1)).tolist()} collapsed; variance floored"
            if msg not in gmm.warnings:
                gmm.warnings.append(msg)
                log.debug(msg)
        gmm.means = means
        gmm.variances = np.maximum(var, var_floor)
        gmm.weights = nk / n
    return gmm


def responsibilities(gmm: DiagonalGMM, observed_mask, observed_values) -> np.ndarray:
    """w'_i proportional to w_i N(x_p | mu_ip, Sigma_ip), normalized."""
    mask = np.asarray(observed_mask, dtype=bool)
    cols = np.flatnonzero(mask)
    if cols.size == 0:
        return gmm.weights.copy()
    xp = np.asarray(observed_values, dtype=float)
    if xp.shape[0] == mask.shape[0]:
        xp = xp[cols]
    lw = gmm.component_loglik(xp[None, :], cols)[0] + np.log(gmm.weights)
    return np.exp(lw - logsumexp(lw))


def impute(gmm: DiagonalGMM, observed_mask, observed_values) -> np.ndarray:
    """Conditional expectation of the unobserved coordinates.

    ``observed_values`` may be given either full-length (entries at unobserved
    positions are ignored) or restricted to the observed coordinates.  Returns
    a vector aligned with the unobserved positions, in index order.
    """
    mask = np.asarray(observed_mask, dtype=bool)
    if mask.shape != (gmm.dim,):
        raise ValueError(f"mask has shape {mask.shape}, model dimension is {gmm.dim}")
    xp = np.asarray(observed_values, dtype=float)
    if xp.shape[0] not in (mask.sum(), mask.shape[0]):
        raise ValueError("observed values do not match the mask")
    unobs = ~mask
    if not unobs.any():
        return np.zeros(0)
    w = responsibilities(gmm, mask, xp)
    return w @ gmm.means[:, unobs]
