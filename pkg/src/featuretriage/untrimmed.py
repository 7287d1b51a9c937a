"""Frame-level detection of one target activity in untrimmed streams.

Each frame is labeled, once its display interval has ended, by the most
confident of the windows of length 1..beta that end at it.  Window
descriptors max-pool the per-frame detections observed so far; unobserved
(frame, channel) pairs count as 0.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .classifier import BINARY, train_classifier
from .envs import DetectInBuffer, Skip, make_streaming_actions
from .qpolicy import UNTRIMMED, EpisodeTrace, StepRecord, recency


def default_beta(n_channels: int) -> int:
    return max(1, math.ceil(n_channels / 3))


class WindowBank:
    """Observed per-frame channel values for the most recent ``beta`` frames."""

    def __init__(self, beta: int, n_channels: int):
        if beta < 1:
            raise ValueError("beta must be at least 1")
        self.beta = beta
        self.n_channels = n_channels
        self._rows = deque(maxlen=beta)
        self._first = 0  # frame index of the oldest stored row

    def __len__(self):
        return len(self._rows)

    @property
    def newest(self) -> int:
        return self._first + len(self._rows) - 1

    @property
    def oldest(self) -> int:
        return self._first

    def push(self, frame: int, values=None):
        if self._rows and frame != self.newest + 1:
            raise ValueError(f"frame {frame} pushed after frame {self.newest}")
        if len(self._rows) == self.beta:
            self._first += 1
        elif not self._rows:
            self._first = frame
        row = np.zeros(self.n_channels) if values is None else np.array(values, dtype=float)
        self._rows.append(row)

    def record(self, start: int, channel: int, values):
        """Fold detections of ``channel`` on frames start, start+1, ... into the
        bank; frames already evicted are ignored."""
        for i, v in enumerate(values):
            f = start + i
            if self.oldest <= f <= self.newest:
                row = self._rows[f - self._first]
                if v > row[channel]:
                    row[channel] = v

    def matrix(self) -> np.ndarray:
        """Stored rows, oldest first."""
        return np.array(self._rows)

    def descriptor(self) -> np.ndarray:
        return self.matrix().max(axis=0)


def window_predict(clf, bank: WindowBank):
    """(confidence, window length) of the most confident window ending at the
    newest frame; ties go to the shortest window."""
    if len(bank) == 0:
        raise ValueError("window bank is empty")
    rows = bank.matrix()[::-1]
    desc = np.maximum.accumulate(rows, axis=0)  # row i: window of length i + 1
    conf = clf.posteriors(desc)[:, 1]
    i = int(np.argmax(conf))
    return float(conf[i]), i + 1


@dataclass
class DetectionTrace:
    video_id: str
    confidences: np.ndarray
    predicted: np.ndarray
    span: tuple
    window_lengths: np.ndarray = None

    @property
    def n_frames(self):
        return len(self.confidences)

    def truth(self) -> np.ndarray:
        t = np.zeros(self.n_frames, dtype=int)
        t[self.span[0]:self.span[1]] = 1
        return t

    def to_dict(self):
        return {"video": self.video_id, "span": list(self.span),
                "confidence": [float(c) for c in self.confidences],
                "predicted": [int(p) for p in self.predicted]}


def f1_score(traces, threshold=0.5) -> float:
    """Frame-level F1 pooled over every frame of every trace."""
    tp = fp = fn = 0
    for tr in traces:
        pred = np.asarray(tr.confidences) >= threshold
        truth = tr.truth().astype(bool)
        tp += int(np.sum(pred & truth))
        fp += int(np.sum(pred & ~truth))
        fn += int(np.sum(~pred & truth))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


class AmocPoint(NamedTuple):
    fpr: float
    nt2d: float
    threshold: float


def amoc_curve(traces, thresholds) -> list:
    """Activity monitoring operating curve.

    At threshold th a stream fires at its first frame with confidence >= th.
    NT2D = (fire - span_start) / span_length clamped to [0, 1]; streams that
    never fire score 1.  A stream counts as a false positive when any frame
    outside the span reaches th.  Points are sorted by FPR.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("amoc_curve needs at least one threshold")
    traces = list(traces)
    points = []
    for th in thresholds:
        nt2d, fps = [], 0
        for tr in traces:
            conf = np.asarray(tr.confidences)
            s, e = tr.span
            hits = np.flatnonzero(conf >= th)
            if hits.size:
                nt2d.append(min(1.0, max(0.0, (hits[0] - s) / (e - s))))
            else:
                nt2d.append(1.0)
            outside = np.ones(conf.shape[0], dtype=bool)
            outside[s:e] = False
            if np.any(conf[outside] >= th):
                fps += 1
        points.append(AmocPoint(fps / len(traces), float(np.mean(nt2d)), float(th)))
    return sorted(points, key=lambda p: (p.fpr, -p.threshold))


# -- binary recognizer -----------------------------------------------------------------

def window_training_set(dataset, target, beta, seed=0, per_clip=5):
    """Max-pooled windows of length 1..beta: ``per_clip`` from every target clip
    and the same number drawn uniformly from clips of other activities."""
    rng = np.random.default_rng(seed)
    pos = [r for r in dataset if r.label == target]
    neg = [r for r in dataset if r.label != target]
    if not pos or not neg:
        raise ValueError(f"need clips of activity {target} and of other activities")

    def draw(rec):
        T = rec.n_frames
        length = int(rng.integers(1, min(beta, T) + 1))
        start = int(rng.integers(0, T - length + 1))
        return rec.scores[start:start + length].max(axis=0)

    X, y = [], []
    for rec in pos:
        for _ in range(per_clip):
            X.append(draw(rec))
            y.append(1)
    for _ in range(len(pos) * per_clip):
        X.append(draw(neg[rng.integers(len(neg))]))
        y.append(0)
    return np.array(X), np.array(y)


def train_binary_recognizer(dataset, target, beta, l2=1.0, seed=0, per_clip=5, nonneg=True):
    """Binary window recognizer.  Weights are nonnegative by default: the bank
    stores 0 for channels not yet detected, and a recognizer that is monotone
    in the evidence reads those entries as "no evidence yet" rather than as
    proof that the background objects are absent."""
    X, y = window_training_set(dataset, target, beta, seed, per_clip)
    return train_classifier(X, y, l2=l2, kind=BINARY, nonneg=nonneg)


# -- episode ---------------------------------------------------------------------------

class UntrimmedEnv:
    """Streaming cost model on an untrimmed record with per-frame labeling.

    The policy state is the max-pool descriptor of the whole window bank; the
    reward of an action is the change it causes in the window-search
    confidence of the current frame's true label.  Each frame interval is its
    own sub-episode: the step during which the next frame arrives is terminal,
    so returns never credit an action with rewards earned on later frames.

    Within a frame interval each detector may run once; Skip is always legal.
    delta-t saturates at beta, and actions never performed read beta: the
    bank holds nothing older than beta frames, so older detections are as
    good as none.

    ``pos_weight`` scales the reward on frames inside the span.  Set to the
    negative/positive frame ratio it keeps the rare positive frames from being
    drowned out, which otherwise teaches the policy never to look for the
    target at all.
    """

    setting = UNTRIMMED

    def __init__(self, classifier, detector_speed, buffer, beta, probe=None, pos_weight=1.0):
        if classifier.kind != BINARY:
            raise ValueError("untrimmed detection needs a binary recognizer")
        if buffer < 1 or not detector_speed > 0:
            raise ValueError("buffer must be >= 1 and detector speed positive")
        self.classifier = classifier
        self.detector_speed = detector_speed
        self.speed = Fraction(str(detector_speed))
        self.buffer = int(buffer)
        self.beta = int(beta)
        self.dim = classifier.dim
        self.actions = make_streaming_actions(self.dim)
        self.probe = probe
        if not pos_weight > 0:
            raise ValueError("pos_weight must be positive")
        self.pos_weight = float(pos_weight)

    @property
    def n_actions(self):
        return len(self.actions)

    @property
    def feature_dim(self):
        return self.dim + self.n_actions

    def meta(self):
        return {"setting": UNTRIMMED, "detector_speed": self.detector_speed,
                "buffer": self.buffer, "beta": self.beta, "pos_weight": self.pos_weight,
                **self.actions.meta()}

    def episode(self, record, selector, rng=None) -> EpisodeTrace:
        rng = rng if rng is not None else np.random.default_rng(0)
        clf = self.classifier
        T = record.n_frames
        truth = record.frame_labels()
        bank = WindowBank(self.beta, self.dim)
        bank.push(0, record.scores[0])
        conf = np.zeros(T)
        lengths = np.zeros(T, dtype=int)
        last = np.full(self.n_actions, np.nan)
        all_idx = np.arange(self.n_actions)
        skip = self.actions.skip_index
        weight = (1.0, self.pos_weight)

        def p_true(c, frame):
            return c if truth[frame] else 1.0 - c

        c0, _ = window_predict(clf, bank)
        trace = EpisodeTrace(record.id, record.target, p_true(c0, 0), int(c0 >= 0.5))
        choose = selector.begin(rng)
        tau = Fraction(0)
        cur = 0  # next frame to label; the bank always ends at it
        k = 0
        while True:
            c = math.floor(tau)
            if c >= T:
                break
            lo = max(0, c - self.buffer + 1)
            b = c - lo + 1
            if self.probe is not None:
                self.probe(c, lo)
            before, _ = window_predict(clf, bank)
            phi = np.concatenate([bank.descriptor(),
                                  recency(last, float(c), UNTRIMMED, cap=self.beta)])
            # a detector already run while this frame is current would re-read
            # the same buffer; it becomes legal again when the next frame arrives
            cand = all_idx[(last != c) | (all_idx == skip)]
            a = int(choose(cand, phi))
            if a not in cand:
                raise RuntimeError(f"selector chose illegal action {a}")
            spec = self.actions[a]
            if isinstance(spec, DetectInBuffer):
                vals = record.scores[lo:c + 1, spec.obj]
                bank.record(lo, spec.obj, vals)
                x = float(vals.max())
                cost = float(b)
                tau += Fraction(b) / self.speed
                after, _ = window_predict(clf, bank)
            elif isinstance(spec, Skip):
                x, cost, after = None, 0.0, before
                tau = Fraction(c + 1)
            else:
                raise ValueError(f"illegal untrimmed action {spec!r}")
            last[a] = c
            k += 1
            arrived = min(math.floor(tau), T)
            # a new frame ends the current frame's action sequence
            trace.steps.append(StepRecord(k, a, float(c), phi, x,
                                          weight[truth[c]] * (p_true(after, c) - p_true(before, c)),
                                          cost,
                                          p_true(after, c), int(after >= 0.5),
                                          terminal=arrived > c))
            while cur < arrived:
                conf[cur], lengths[cur] = window_predict(clf, bank)
                cur += 1
                if cur < T:
                    bank.push(cur)
        trace.detection = DetectionTrace(record.id, conf, (conf >= 0.5).astype(int),
                                         tuple(record.span), lengths)
        return trace


def balanced_pos_weight(records) -> float:
    """Negative-to-positive frame ratio over untrimmed records."""
    pos = sum(r.span[1] - r.span[0] for r in records)
    total = sum(r.n_frames for r in records)
    if pos == 0 or pos == total:
        return 1.0
    return (total - pos) / pos


def untrimmed_episode(record, selector, detector_speed, B, beta, binary_clf, rng=None):
    """Returns (DetectionTrace, invocation cost)."""
    trace = UntrimmedEnv(binary_clf, detector_speed, B, beta).episode(record, selector, rng)
    return trace.detection, trace.cost
