"""Batch and streaming recognition episodes.

Streaming cost/clock model: one invocation unit is one detector applied to
one frame.  A detection over a buffer of ``b`` frames costs ``b`` units and
occupies ``b / detector_speed`` seconds; frames arrive once per ``1 / fps``
seconds.  Skip waits for the next frame and costs nothing.  Observations are
taken on the buffer as it stood when the action was issued.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .descriptor import MAX_POOL, MEAN_POOL, init_descriptor, update_max, update_mean
from .gmm import impute
from .qpolicy import BATCH, STREAMING, EpisodeTrace, StepRecord, recency

TEMPORAL = "temporal"
SPATIOTEMPORAL = "spatiotemporal"


# -- action specs -----------------------------------------------------------------

@dataclass(frozen=True)
class Volume:
    index: int
    t0: float   # relative start, fraction of clip length
    t1: float   # relative end
    cell: Optional[int] = None

    def frames(self, T: int):
        return math.ceil(self.t0 * T), math.ceil(self.t1 * T)


@dataclass(frozen=True)
class DetectInVolume:
    obj: int
    volume: Volume


@dataclass(frozen=True)
class DetectInBuffer:
    obj: int


@dataclass(frozen=True)
class Skip:
    pass


@dataclass(frozen=True)
class ExtractFrame:
    pass


def describe(action) -> str:
    if isinstance(action, DetectInVolume):
        v = action.volume
        cell = "" if v.cell is None else f",cell{v.cell}"
        return f"detect(obj{action.obj},t[{v.t0:g},{v.t1:g}){cell})"
    if isinstance(action, DetectInBuffer):
        return f"detect(obj{action.obj},buffer)"
    return type(action).__name__.lower()


class ActionSet:
    """Indexed action list.  ``obj_of[m]`` is the channel detected by action m
    (-1 for Skip / ExtractFrame)."""

    def __init__(self, actions, kind, n_channels):
        self.actions = tuple(actions)
        self.kind = kind
        self.n_channels = n_channels
        self.obj_of = np.array([getattr(a, "obj", -1) for a in self.actions], dtype=int)
        skips = [m for m, a in enumerate(self.actions) if isinstance(a, Skip)]
        self.skip_index = skips[0] if skips else None
        self.work_indices = np.array([m for m, a in enumerate(self.actions)
                                      if not isinstance(a, Skip)], dtype=int)

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, m):
        return self.actions[m]

    def __iter__(self):
        return iter(self.actions)

    @property
    def n_volumes(self):
        return len(self.actions) // self.n_channels if self.kind == BATCH else 1

    def describe(self):
        return [describe(a) for a in self.actions]

    def meta(self):
        return {"kind": self.kind, "n_channels": self.n_channels,
                "n_actions": len(self), "grid": getattr(self, "grid", None)}


def batch_volumes(grid=TEMPORAL):
    halves = [(0.0, 0.5), (0.5, 1.0)]
    if grid == TEMPORAL:
        return [Volume(i, t0, t1) for i, (t0, t1) in enumerate(halves)]
    if grid == SPATIOTEMPORAL:
        return [Volume(i * 4 + c, t0, t1, c)
                for i, (t0, t1) in enumerate(halves) for c in range(4)]
    raise ValueError(f"unknown volume grid {grid!r}")


def make_batch_actions(n_channels, grid=TEMPORAL) -> ActionSet:
    """Object x subvolume actions, object-major: m = obj * n_volumes + volume."""
    vols = batch_volumes(grid)
    acts = [DetectInVolume(n, v) for n in range(n_channels) for v in vols]
    aset = ActionSet(acts, BATCH, n_channels)
    aset.grid = grid
    return aset


def make_streaming_actions(n_channels, mode=MAX_POOL) -> ActionSet:
    """N buffer detectors plus Skip (max-pool), or ExtractFrame plus Skip (mean-pool)."""
    if mode == MAX_POOL:
        acts = [DetectInBuffer(n) for n in range(n_channels)] + [Skip()]
    elif mode == MEAN_POOL:
        acts = [ExtractFrame(), Skip()]
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    aset = ActionSet(acts, STREAMING, n_channels)
    aset.grid = None
    return aset


# -- observation & reward ---------------------------------------------------------------

def observe(video, action, window=None) -> float:
    """Max score of the action's channel over frames [start, end) of ``window``
    (restricted to the action's spatial cell when it has one)."""
    if window is None:
        if not isinstance(action, DetectInVolume):
            raise ValueError("a window is required for buffer actions")
        window = action.volume.frames(video.n_frames)
    start, end = window
    if end <= start:
        raise ValueError(f"empty observation window [{start}, {end})")
    if start < 0 or end > video.n_frames:
        raise ValueError(f"window [{start}, {end}) outside video of {video.n_frames} frames")
    vals = video.scores[start:end, action.obj]
    cell = action.volume.cell if isinstance(action, DetectInVolume) else None
    if cell is not None:
        if video.boxes is None:
            raise ValueError(f"video {video.id!r} has no spatial cells for a spatial volume")
        vals = vals[video.boxes[start:end, action.obj] == cell]
        return float(vals.max()) if vals.size else 0.0
    return float(vals.max())


def full_observation_vector(video, actions: ActionSet) -> np.ndarray:
    """Observation of every batch action (the vector the GMM models)."""
    return np.array([observe(video, a) for a in actions])


def step_reward(classifier, psi_before, psi_after, y_true) -> float:
    return classifier.posterior(psi_after, y_true) - classifier.posterior(psi_before, y_true)


def episode_cost(trace: EpisodeTrace) -> float:
    return trace.cost


# -- batch -------------------------------------------------------------------------------

class BatchEnv:
    """Whole clip available; each action is performed at most once and costs
    one unit.  Unperformed actions are imputed by the GMM before the
    classifier sees the descriptor."""

    setting = BATCH

    def __init__(self, actions: ActionSet, classifier, gmm=None, K=None, state_psi="observed"):
        if actions.kind != BATCH:
            raise ValueError("BatchEnv needs a batch action set")
        self.actions = actions
        self.classifier = classifier
        self.gmm = gmm
        self.K = K
        self.state_psi = state_psi
        self.N = actions.n_channels
        self.V = actions.n_volumes
        self._cache = {}

    @property
    def n_actions(self):
        return len(self.actions)

    @property
    def feature_dim(self):
        return self.N + self.n_actions

    def meta(self):
        return {"setting": BATCH, **self.actions.meta()}

    def observations(self, video):
        key = id(video)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not video:
            T = video.n_frames
            for v in batch_volumes(self.actions.grid):
                s, e = v.frames(T)
                if e <= s:
                    raise ValueError(f"video {video.id!r} ({T} frames) is too short for the volume grid")
            hit = (video, full_observation_vector(video, self.actions))
            self._cache[key] = hit
        return hit[1]

    def classifier_input(self, psi, performed, xvals):
        """psi with unperformed actions filled in by the GMM, clamped to [0, 1]."""
        if self.gmm is None or performed.all():
            return psi
        xt = np.where(performed, xvals, 0.0)
        xt[~performed] = np.clip(impute(self.gmm, performed, xvals[performed]), 0.0, 1.0)
        return np.maximum(psi, xt.reshape(self.N, self.V).max(axis=1))

    def episode(self, video, selector, rng=None, K=None) -> EpisodeTrace:
        M = self.n_actions
        if K is None:
            K = M if self.K is None else self.K
        if not 0 <= K <= M:
            raise ValueError(f"episode length K={K} outside [0, {M}]")
        rng = rng if rng is not None else np.random.default_rng(0)
        xfull = self.observations(video)
        y = video.label
        clf = self.classifier
        state = init_descriptor(MAX_POOL, self.N)
        performed = np.zeros(M, dtype=bool)
        last = np.full(M, np.nan)
        xvals = np.zeros(M)
        hat = self.classifier_input(state.psi, performed, xvals)
        post = clf.posteriors(hat)
        trace = EpisodeTrace(video.id, y, float(post[y]), int(np.argmax(post)))
        choose = selector.begin(rng)
        for k in range(1, K + 1):
            cand = np.flatnonzero(~performed)
            phi = np.concatenate([hat if self.state_psi == "imputed" else state.psi,
                                  recency(last, 0.0, BATCH)])
            a = int(choose(cand, phi))
            if performed[a]:
                raise RuntimeError(f"selector repeated batch action {a}")
            x = float(xfull[a])
            update_max(state, int(self.actions.obj_of[a]), x)
            performed[a] = True
            last[a] = 0.0
            xvals[a] = x
            hat = self.classifier_input(state.psi, performed, xvals)
            new = clf.posteriors(hat)
            trace.steps.append(StepRecord(k, a, 0.0, phi, x, float(new[y] - post[y]), 1.0,
                                          float(new[y]), int(np.argmax(new))))
            post = new
        trace.final_psi = state.psi.copy()
        return trace


def batch_episode(video, selector, K, classifier, gmm=None, actions=None, rng=None):
    actions = actions or make_batch_actions(video.n_channels)
    return BatchEnv(actions, classifier, gmm).episode(video, selector, rng, K)


# -- streaming --------------------------------------------------------------------------

class StreamingEnv:
    """Frames arrive one at a time into a FIFO buffer of ``buffer`` frames.

    ``probe``, when given, is called as ``probe(clock, buffer_start)`` before
    every action so that frame accesses can be audited.
    """

    setting = STREAMING

    def __init__(self, classifier, detector_speed, buffer, mode=MAX_POOL,
                 n_channels=None, probe=None):
        if buffer < 1:
            raise ValueError("buffer must hold at least one frame")
        if not detector_speed > 0:
            raise ValueError("detector speed must be positive")
        self.classifier = classifier
        self.detector_speed = detector_speed
        self.speed = Fraction(str(detector_speed))
        self.buffer = int(buffer)
        self.mode = mode
        N = n_channels if n_channels is not None else classifier.dim
        self.actions = make_streaming_actions(N, mode)
        self.dim = classifier.dim
        self.probe = probe

    @property
    def n_actions(self):
        return len(self.actions)

    @property
    def feature_dim(self):
        return self.dim + self.n_actions

    def meta(self):
        return {"setting": STREAMING, "mode": self.mode, "detector_speed": self.detector_speed,
                "buffer": self.buffer, **self.actions.meta()}

    def episode(self, video, selector, rng=None) -> EpisodeTrace:
        rng = rng if rng is not None else np.random.default_rng(0)
        T = video.n_frames
        fps = Fraction(str(video.fps))
        y = video.label
        clf = self.classifier
        acts = self.actions
        if self.mode == MAX_POOL:
            state = init_descriptor(MAX_POOL, self.dim, video.scores[0])
        else:
            if video.dense is None:
                raise ValueError(f"video {video.id!r} has no frame descriptors for mean-pool mode")
            state = init_descriptor(MEAN_POOL, self.dim, video.dense[0])
        extracted = {0}
        last = np.full(len(acts), np.nan)
        post = clf.posteriors(state.psi)
        trace = EpisodeTrace(video.id, y, float(post[y]), int(np.argmax(post)))
        choose = selector.begin(rng)
        all_idx = np.arange(len(acts))
        tau = Fraction(0)
        k = 0
        while True:
            c = math.floor(tau)
            if c >= T:
                break
            lo = max(0, c - self.buffer + 1)
            b = c - lo + 1
            if self.probe is not None:
                self.probe(c, lo)
            if self.mode == MEAN_POOL and c in extracted:
                cand = np.array([acts.skip_index])
            else:
                cand = all_idx
            phi = np.concatenate([state.psi, recency(last, float(c), STREAMING)])
            a = int(choose(cand, phi))
            spec = acts[a]
            if isinstance(spec, DetectInBuffer):
                x = observe(video, spec, (lo, c + 1))
                update_max(state, spec.obj, x)
                cost = float(b)
                tau += b * fps / self.speed
            elif isinstance(spec, Skip):
                x = None
                cost = 0.0
                tau = Fraction(c + 1)
            elif isinstance(spec, ExtractFrame):
                if c in extracted:
                    raise RuntimeError("frame already extracted")
                update_mean(state, video.dense[c])
                extracted.add(c)
                x = None
                cost = 1.0
                tau += fps / self.speed
            else:
                raise ValueError(f"illegal streaming action {spec!r}")
            last[a] = c
            k += 1
            new = post if x is None and cost == 0 else clf.posteriors(state.psi)
            trace.steps.append(StepRecord(k, a, float(c), phi, x, float(new[y] - post[y]),
                                          cost, float(new[y]), int(np.argmax(new))))
            post = new
        trace.final_psi = state.psi.copy()
        return trace


def streaming_episode(video, selector, detector_speed, B, classifier, rng=None, mode=MAX_POOL):
    return StreamingEnv(classifier, detector_speed, B, mode).episode(video, selector, rng)


def default_buffer(train_videos) -> int:
    """Half the median training-clip length, at least one frame."""
    med = float(np.median([v.n_frames for v in train_videos]))
    return max(1, int(round(med / 2)))
