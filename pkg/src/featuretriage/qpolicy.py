"""Linear Q-models over state-action features and the policy-iteration loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

BATCH = "batch"
STREAMING = "streaming"
UNTRIMMED = "untrimmed"


# -- traces -------------------------------------------------------------------

@dataclass
class StepRecord:
    k: int
    action: int
    t: float
    phi: np.ndarray
    x: Optional[float]
    reward: float
    cost: float
    posterior: float    # true-class posterior after the step
    prediction: int     # predicted label after the step
    ret: float = 0.0
    terminal: bool = False  # the step closes a sub-episode (untrimmed: a frame arrived)


@dataclass
class EpisodeTrace:
    video_id: str
    label: int
    initial_posterior: float
    initial_prediction: int
    steps: list = field(default_factory=list)
    detection: object = None  # DetectionTrace for untrimmed episodes
    final_psi: object = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps])

    @property
    def final_prediction(self) -> int:
        return self.steps[-1].prediction if self.steps else self.initial_prediction

    @property
    def final_posterior(self) -> float:
        return self.steps[-1].posterior if self.steps else self.initial_posterior

    @property
    def cost(self) -> float:
        return float(sum(s.cost for s in self.steps))

    def posteriors(self) -> np.ndarray:
        """True-class posterior before step 1, then after each step."""
        return np.array([self.initial_posterior] + [s.posterior for s in self.steps])

    def predictions(self) -> np.ndarray:
        return np.array([self.initial_prediction] + [s.prediction for s in self.steps], dtype=int)

    def fill_returns(self, gamma: float) -> "EpisodeTrace":
        terminals = [s.terminal for s in self.steps]
        for s, g in zip(self.steps, compute_returns(self.rewards, gamma, terminals)):
            s.ret = float(g)
        return self

    def to_dict(self, with_features=False) -> dict:
        steps = []
        for s in self.steps:
            d = {"k": s.k, "action": s.action, "t": float(s.t), "x": s.x,
                 "reward": s.reward, "return": s.ret, "cost": s.cost,
                 "posterior": s.posterior, "prediction": s.prediction}
            if with_features:
                d["phi"] = s.phi.tolist()
            steps.append(d)
        out = {"video": self.video_id, "label": self.label,
               "initial_posterior": self.initial_posterior,
               "initial_prediction": self.initial_prediction,
               "final_prediction": self.final_prediction,
               "cost": self.cost, "steps": steps}
        if self.detection is not None:
            out["detection"] = self.detection.to_dict()
        return out


def compute_returns(rewards, gamma: float, terminals=None) -> np.ndarray:
    """G_k = sum_{j >= k} gamma^(j-k) r_j, via the backward recursion.

    When ``terminals`` is given, the sum for step k stops at the first
    terminal step j >= k (inclusive).
    """
    rewards = np.asarray(rewards, dtype=float)
    G = np.zeros_like(rewards)
    acc = 0.0
    for k in range(len(rewards) - 1, -1, -1):
        if terminals is not None and terminals[k]:
            acc = 0.0
        acc = rewards[k] + gamma * acc
        G[k] = acc
    return G


# -- state-action features ------------------------------------------------------

def recency(last_time: np.ndarray, t_now: float, setting: str, cap=None) -> np.ndarray:
    """delta-t vector from per-action last-performed times (NaN = never).

    With ``cap`` the values saturate at ``cap`` and never-performed actions
    read ``cap`` instead of 0.
    """
    done = ~np.isnan(last_time)
    if setting == BATCH:
        return done.astype(float)
    if cap is not None:
        out = np.full(last_time.shape[0], float(cap))
        out[done] = np.minimum(t_now - last_time[done], cap)
        return out
    out = np.zeros(last_time.shape[0])
    out[done] = t_now - last_time[done]
    return out


def state_action_features(psi, action_history, t_now, n_actions, setting=STREAMING) -> np.ndarray:
    """[psi, delta-t] where delta-t(m) is the time since action m was last
    performed (0 if never); in batch it is a performed indicator."""
    last = np.full(n_actions, np.nan)
    for a, t in action_history:
        if t > t_now:
            raise ValueError(f"history time {t} is after t_now={t_now}")
        if np.isnan(last[a]) or t > last[a]:
            last[a] = t
    return np.concatenate([np.asarray(psi, dtype=float), recency(last, t_now, setting)])


# -- Q model ----------------------------------------------------------------------

@dataclass
class QModel:
    theta: np.ndarray   # (M, F + 1), bias last
    gamma: float = 0.4
    ridge: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def n_actions(self):
        return self.theta.shape[0]

    @property
    def feature_dim(self):
        return self.theta.shape[1] - 1

    def q_values(self, phi, actions=None) -> np.ndarray:
        th = self.theta if actions is None else self.theta[actions]
        return th[:, :-1] @ phi + th[:, -1]

    def to_dict(self):
        return {"theta": self.theta.tolist(), "gamma": self.gamma,
                "ridge": self.ridge, "meta": self.meta}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["theta"], float), float(d["gamma"]),
                   float(d["ridge"]), dict(d.get("meta", {})))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def q_value(model: QModel, phi, a: int) -> float:
    if not 0 <= a < model.n_actions:
        raise IndexError(f"unknown action {a}")
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (model.feature_dim,):
        raise ValueError(f"feature has shape {phi.shape}, model expects ({model.feature_dim},)")
    return float(model.theta[a, :-1] @ phi + model.theta[a, -1])


def select_action(model: QModel, phi, candidates, epsilon: float, rng) -> int:
    """epsilon-greedy: uniform over candidates with probability epsilon, else
    the highest-Q candidate (ties go to the lowest action index)."""
    cand = np.sort(np.asarray(candidates, dtype=int))
    if cand.size == 0:
        raise ValueError("empty candidate set")
    if rng.random() < epsilon:
        return int(cand[rng.integers(cand.size)])
    return int(cand[np.argmax(model.q_values(phi, cand))])


class RidgeAccumulator:
    """Per-action sufficient statistics for ridge regression with an
    unregularized bias; adding samples and re-solving equals refitting on the
    union of everything added."""

    def __init__(self, n_actions, feature_dim):
        d = feature_dim + 1
        self.A = np.zeros((n_actions, d, d))
        self.b = np.zeros((n_actions, d))
        self.counts = np.zeros(n_actions, dtype=int)

    def add(self, actions, Phi, G):
        actions = np.asarray(actions, dtype=int)
        Phi = np.asarray(Phi, dtype=float).reshape(len(actions), -1)
        Xa = np.hstack([Phi, np.ones((len(actions), 1))])
        G = np.asarray(G, dtype=float)
        for a in np.unique(actions):
            sel = actions == a
            X = Xa[sel]
            self.A[a] += X.T @ X
            self.b[a] += X.T @ G[sel]
            self.counts[a] += int(sel.sum())

    def solve(self, ridge) -> np.ndarray:
        M, d, _ = self.A.shape
        theta = np.zeros((M, d))
        reg = np.full(d, float(ridge))
        reg[-1] = 0.0
        for a in range(M):
            if self.counts[a] == 0:
                continue
            theta[a] = np.linalg.solve(self.A[a] + np.diag(reg), self.b[a])
        return theta


def fit_q(actions, Phi, G, n_actions, ridge=1.0, gamma=0.4, meta=None) -> QModel:
    """Per-action ridge fit of returns on bias-augmented features.

    Minimizes sum (G - theta . [phi, 1])^2 + ridge * |theta without bias|^2 for
    each action; actions without samples keep zero weights.
    """
    Phi = np.asarray(Phi, dtype=float)
    acc = RidgeAccumulator(n_actions, Phi.shape[1])
    if len(actions):
        acc.add(actions, Phi, G)
    return QModel(acc.solve(ridge), gamma, ridge, dict(meta or {}))


# -- selectors ----------------------------------------------------------------------
#
# A selector's ``begin(rng)`` returns a per-episode chooser called as
# ``chooser(candidates, phi) -> action``.  Selectors are immutable; episode
# state lives in the chooser.

class QSelector:
    def __init__(self, model: QModel, epsilon: float = 0.0):
        self.model = model
        self.epsilon = epsilon

    def begin(self, rng):
        model, eps = self.model, self.epsilon
        return lambda candidates, phi: select_action(model, phi, candidates, eps, rng)


class RandomSelector:
    """Uniform over the legal candidates (the initial exploration policy)."""

    def begin(self, rng):
        def choose(candidates, phi):
            return int(candidates[rng.integers(len(candidates))])
        return choose


# -- policy iteration ----------------------------------------------------------------

@dataclass
class PolicyConfig:
    iterations: int = 8
    gamma: float = 0.4
    epsilon0: float = 0.5
    epsilon_step: float = 0.1
    epsilon_floor: float = 0.05
    ridge: float = 1.0
    seed: int = 0

    def epsilon(self, iteration: int) -> float:
        """Exploration rate used when generating samples in ``iteration``
        (1-based).  Iteration 1 runs the random policy."""
        if iteration <= 1:
            return 1.0
        return max(self.epsilon_floor, self.epsilon0 - self.epsilon_step * (iteration - 2))

    def to_dict(self):
        return asdict(self)


def episode_rng(seed, iteration, index):
    return np.random.default_rng([int(seed), int(iteration), int(index)])


def policy_iteration(videos, env, config: PolicyConfig = None):
    """Alternate rollouts and per-action ridge refits.

    Iteration 1 rolls the random policy; iteration i > 1 rolls epsilon-greedy
    on the model fitted after iteration i-1.  Each refit uses all samples
    generated so far.  Returns the final model and per-iteration diagnostics.
    """
    config = config or PolicyConfig()
    videos = list(videos)
    if not videos:
        raise ValueError("policy_iteration needs at least one training video")
    acc = RidgeAccumulator(env.n_actions, env.feature_dim)
    model = None
    diagnostics = []
    total = 0
    for it in range(1, config.iterations + 1):
        eps = config.epsilon(it)
        selector = RandomSelector() if model is None else QSelector(model, eps)
        acts, feats, rets = [], [], []
        ep_returns, finals, correct, costs = [], [], [], []
        for j, video in enumerate(videos):
            trace = env.episode(video, selector, episode_rng(config.seed, it, j))
            trace.fill_returns(config.gamma)
            for s in trace.steps:
                acts.append(s.action)
                feats.append(s.phi)
                rets.append(s.ret)
            ep_returns.append(float(trace.rewards.sum()))
            finals.append(trace.final_posterior)
            correct.append(trace.final_prediction == trace.label)
            costs.append(trace.cost)
        if acts:
            acc.add(acts, np.vstack(feats), rets)
        total += len(acts)
        model = QModel(acc.solve(config.ridge), config.gamma, config.ridge, env.meta())
        diag = {"iteration": it, "epsilon": eps, "episodes": len(videos),
                "samples_added": len(acts), "samples_total": total,
                "mean_total_reward": float(np.mean(ep_returns)),
                "mean_final_posterior": float(np.mean(finals)),
                "train_accuracy": float(np.mean(correct)),
                "mean_cost": float(np.mean(costs))}
        diagnostics.append(diag)
        log.info("policy iteration %d: eps=%.2f samples=%d reward=%.4f acc=%.3f",
                 it, eps, total, diag["mean_total_reward"], diag["train_accuracy"])
    model.meta["policy_config"] = config.to_dict()
    return model, diagnostics
