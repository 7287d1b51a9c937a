"""Video feature-stream datasets: records, manifest I/O, synthetic generation
and the untrimmed concatenation protocol.

On disk a dataset is a JSON manifest plus one CSV per clip (row = frame,
column = detector channel, no header)::

    {
      "format": "featuretriage-manifest/1",
      "n_activities": 8,
      "n_channels": 20,
      "dense_dim": null,
      "records": [
        {"id": "clip0000", "label": 3, "fps": 1.0,
         "scores": "scores/clip0000.csv",
         "boxes": "boxes/clip0000.csv",      # optional, int cell per detection
         "dense": "dense/clip0000.csv"}      # optional, T x D frame descriptors
      ]
    }

Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

MANIFEST_FORMAT = "featuretriage-manifest/1"
N_CELLS = 4  # 2x2 spatial grid


class DatasetError(ValueError):
    """Raised when a dataset is malformed or violates its invariants."""


class ConfigError(ValueError):
    """Raised for degenerate generator / experiment configurations."""


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class VideoRecord:
    id: str
    label: int
    scores: np.ndarray
    fps: float = 1.0
    boxes: Optional[np.ndarray] = None
    dense: Optional[np.ndarray] = None

    @property
    def n_frames(self) -> int:
        return self.scores.shape[0]

    @property
    def n_channels(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True, eq=False)
class UntrimmedRecord:
    id: str
    scores: np.ndarray
    span: tuple
    target: int
    segments: tuple = ()  # (clip id, label) per slot, in stream order

    @property
    def n_frames(self) -> int:
        return self.scores.shape[0]

    def frame_labels(self) -> np.ndarray:
        lab = np.zeros(self.n_frames, dtype=int)
        lab[self.span[0]:self.span[1]] = 1
        return lab


@dataclass(frozen=True, eq=False)
class Dataset:
    records: tuple
    n_activities: int
    n_channels: int
    dense_dim: Optional[int] = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)

    def subset(self, idx) -> "Dataset":
        return Dataset(tuple(self.records[i] for i in idx), self.n_activities,
                       self.n_channels, self.dense_dim)

    def full_descriptors(self) -> np.ndarray:
        """Max-pool descriptor of every clip using all frames."""
        return np.stack([r.scores.max(axis=0) for r in self.records])

    def median_length(self) -> float:
        return float(np.median([r.n_frames for r in self.records]))


def make_record(id, label, scores, fps=1.0, boxes=None, dense=None,
                n_activities=None) -> VideoRecord:
    """Validate arrays and build an immutable :class:`VideoRecord`."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 1:
        raise DatasetError(f"record {id!r}: scores must be a non-empty T x N matrix")
    if not np.all(np.isfinite(scores)) or scores.min() < 0.0 or scores.max() > 1.0:
        raise DatasetError(f"record {id!r}: detection scores must lie in [0, 1]")
    label = int(label)
    if label < 0 or (n_activities is not None and label >= n_activities):
        raise DatasetError(f"record {id!r}: label {label} outside [0, {n_activities})")
    if not fps > 0:
        raise DatasetError(f"record {id!r}: fps must be positive")
    if boxes is not None:
        boxes = np.asarray(boxes)
        if boxes.shape != scores.shape:
            raise DatasetError(f"record {id!r}: boxes shape {boxes.shape} != scores shape {scores.shape}")
        if boxes.min() < 0 or boxes.max() >= N_CELLS:
            raise DatasetError(f"record {id!r}: box cells must lie in [0, {N_CELLS})")
        boxes = _frozen(boxes, dtype=int)
    if dense is not None:
        dense = np.asarray(dense, dtype=float)
        if dense.ndim != 2 or dense.shape[0] != scores.shape[0]:
            raise DatasetError(f"record {id!r}: dense descriptors must be T x D with T={scores.shape[0]}")
        dense = _frozen(dense)
    return VideoRecord(str(id), label, _frozen(scores), float(fps), boxes, dense)


# -- manifest I/O -------------------------------------------------------------

def write_matrix(path, mat):
    mat = np.asarray(mat)
    with open(path, "w") as fh:
        for row in mat:
            if mat.dtype.kind in "iu":
                fh.write(",".join(str(int(v)) for v in row))
            else:
                fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def _read_matrix(path, rid, dtype=float):
    if not os.path.exists(path):
        raise DatasetError(f"record {rid!r}: missing file {path}")
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2, dtype=dtype)
    except ValueError as exc:
        raise DatasetError(f"record {rid!r}: cannot parse {path}: {exc}") from None


def save_dataset(dataset: Dataset, out_dir) -> str:
    """Write ``dataset`` as manifest + CSVs under ``out_dir``; return the manifest path."""
    os.makedirs(os.path.join(out_dir, "scores"), exist_ok=True)
    entries = []
    for rec in dataset:
        entry = {"id": rec.id, "label": rec.label, "fps": rec.fps,
                 "scores": f"scores/{rec.id}.csv"}
        write_matrix(os.path.join(out_dir, entry["scores"]), rec.scores)
        if rec.boxes is not None:
            os.makedirs(os.path.join(out_dir, "boxes"), exist_ok=True)
            entry["boxes"] = f"boxes/{rec.id}.csv"
            write_matrix(os.path.join(out_dir, entry["boxes"]), rec.boxes)
        if rec.dense is not None:
            os.makedirs(os.path.join(out_dir, "dense"), exist_ok=True)
            entry["dense"] = f"dense/{rec.id}.csv"
            write_matrix(os.path.join(out_dir, entry["dense"]), rec.dense)
        entries.append(entry)
    manifest = {"format": MANIFEST_FORMAT, "n_activities": dataset.n_activities,
                "n_channels": dataset.n_channels, "dense_dim": dataset.dense_dim,
                "records": entries}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_dataset(manifest_path) -> Dataset:
    """Load and validate a dataset; any invariant violation raises :class:`DatasetError`."""
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetError(f"missing manifest {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    root = os.path.dirname(os.path.abspath(manifest_path))
    try:
        L = int(manifest["n_activities"])
        N = int(manifest["n_channels"])
        entries = manifest["records"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"manifest {manifest_path}: missing field {exc}") from None
    D = manifest.get("dense_dim")
    records = []
    seen = set()
    for entry in entries:
        rid = entry.get("id")
        if rid is None or rid in seen:
            raise DatasetError(f"manifest {manifest_path}: missing or duplicate record id {rid!r}")
        seen.add(rid)
        scores = _read_matrix(os.path.join(root, entry["scores"]), rid)
        if scores.shape[1] != N:
            raise DatasetError(f"record {rid!r}: {scores.shape[1]} channels, manifest declares N={N}")
        boxes = dense = None
        if entry.get("boxes"):
            boxes = _read_matrix(os.path.join(root, entry["boxes"]), rid, dtype=int)
        if entry.get("dense"):
            dense = _read_matrix(os.path.join(root, entry["dense"]), rid)
            if D is not None and dense.shape[1] != D:
                raise DatasetError(f"record {rid!r}: dense dim {dense.shape[1]} != {D}")
        records.append(make_record(rid, entry.get("label", -1), scores,
                                   fps=entry.get("fps", 1.0), boxes=boxes,
                                   dense=dense, n_activities=L))
    if not records:
        raise DatasetError(f"manifest {manifest_path}: no records")
    return Dataset(tuple(records), L, N, None if D is None else int(D))


# -- synthetic generation -----------------------------------------------------

@dataclass
class SyntheticConfig:
    """Generator settings.

    ``presence[c][j]`` is the probability that object ``j`` appears in a clip of
    activity ``c``; when omitted a structured matrix is drawn from
    ``structure_seed`` (see :func:`default_presence`).  Scores of a present
    object inside its contiguous span are Beta with mean ``present_mean``,
    everything else Beta with mean ``absent_mean``; ``noise`` mixes between a
    clean 0/1 indicator (``noise=0``) and the Beta draw (``noise=1``).
    """

    n_activities: int = 8
    n_channels: int = 20
    n_clips: int = 200
    presence: Optional[list] = None
    length_range: tuple = (20, 40)
    span_frac: tuple = (0.2, 0.6)
    present_mean: float = 0.8
    absent_mean: float = 0.1
    concentration: float = 20.0
    noise: float = 1.0
    signature_p: float = 0.9
    context_p: float = 0.9
    background_p: float = 0.05
    spatial: bool = False
    dense_dim: int = 0
    dense_noise: float = 0.3
    structure_seed: int = 0
    seed: int = 0
    id_prefix: str = "clip"

    @classmethod
    def from_dict(cls, d) -> "SyntheticConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("length_range", "span_frac"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def validate(self):
        if self.n_activities < 1 or self.n_channels < 1:
            raise ConfigError("synthetic config needs n_activities >= 1 and n_channels >= 1")
        if self.n_clips < 0:
            raise ConfigError("n_clips must be non-negative")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"empty length range {self.length_range}")
        flo, fhi = self.span_frac
        if not 0 < flo <= fhi <= 1:
            raise ConfigError(f"span_frac must satisfy 0 < lo <= hi <= 1, got {self.span_frac}")
        for name in ("present_mean", "absent_mean", "noise", "signature_p",
                     "context_p", "background_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.concentration <= 0:
            raise ConfigError("concentration must be positive")
        if self.presence is not None:
            p = np.asarray(self.presence, dtype=float)
            if p.shape != (self.n_activities, self.n_channels):
                raise ConfigError(f"presence must be {self.n_activities} x {self.n_channels}")
            if p.min() < 0 or p.max() > 1:
                raise ConfigError("presence probabilities must lie in [0, 1]")


def default_presence(cfg: SyntheticConfig) -> np.ndarray:
    """Structured p(object | activity).

    Activities are paired into scenes; each scene owns one context object shared
    by its activities (when there are enough channels), each activity owns a
    few signature objects, and leftover channels are low-probability clutter.
    """
    L, N = cfg.n_activities, cfg.n_channels
    rng = np.random.default_rng(cfg.structure_seed)
    p = np.full((L, N), cfg.background_p)
    perm = rng.permutation(N)
    n_scenes = math.ceil(L / 2) if L > 1 else 0
    n_ctx = n_scenes if N - n_scenes >= 2 * L else 0
    pos = 0
    for s in range(n_ctx):
        j = perm[pos]
        pos += 1
        for c in (2 * s, 2 * s + 1):
            if c < L:
                p[c, j] = cfg.context_p
    per_act = max(1, (N - n_ctx) // L) if N - n_ctx >= L else 0
    if per_act == 0:
        # fewer channels than activities: give each channel to one activity
        for i, j in enumerate(perm[pos:]):
            p[i % L, j] = cfg.signature_p
        return p
    for c in range(L):
        for _ in range(per_act):
            p[c, perm[pos]] = cfg.signature_p
            pos += 1
    return p


def _beta(rng, mean, conc, size):
    mean = min(max(mean, 1e-6), 1 - 1e-6)
    return rng.beta(mean * conc, (1 - mean) * conc, size=size)


def gen_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Draw a dataset from ``cfg``; the output depends only on ``cfg``."""
    cfg.validate()
    L, N = cfg.n_activities, cfg.n_channels
    presence = (np.asarray(cfg.presence, dtype=float) if cfg.presence is not None
                else default_presence(cfg))
    srng = np.random.default_rng([cfg.structure_seed, 1])
    if cfg.dense_dim > 0:
        prototypes = srng.uniform(0, 1, size=(L, cfg.dense_dim))
        background = srng.uniform(0, 1, size=cfg.dense_dim)
    rng = np.random.default_rng(cfg.seed)
    labels = rng.permutation(np.arange(cfg.n_clips) % L)
    lo, hi = cfg.length_range
    records = []
    for i, y in enumerate(labels):
        T = int(rng.integers(lo, hi + 1))
        present = rng.random(N) < presence[y]
        clean = np.zeros((T, N))
        for j in np.flatnonzero(present):
            frac = rng.uniform(*cfg.span_frac)
            length = max(1, int(round(frac * T)))
            start = int(rng.integers(0, T - length + 1))
            clean[start:start + length, j] = 1.0
        noisy = np.where(clean > 0,
                         _beta(rng, cfg.present_mean, cfg.concentration, (T, N)),
                         _beta(rng, cfg.absent_mean, cfg.concentration, (T, N)))
        scores = np.clip((1 - cfg.noise) * clean + cfg.noise * noisy, 0.0, 1.0)
        boxes = None
        if cfg.spatial:
            cells = rng.integers(0, N_CELLS, size=N)
            boxes = np.tile(cells, (T, 1))
        dense = None
        if cfg.dense_dim > 0:
            alpha = np.full(T, 0.2)
            length = max(1, int(round(rng.uniform(*cfg.span_frac) * T)))
            start = int(rng.integers(0, T - length + 1))
            alpha[start:start + length] = 1.0
            dense = (alpha[:, None] * prototypes[y] + (1 - alpha[:, None]) * background
                     + cfg.dense_noise * rng.standard_normal((T, cfg.dense_dim)))
        records.append(make_record(f"{cfg.id_prefix}{i:04d}", int(y), scores,
                                   boxes=boxes, dense=dense, n_activities=L))
    return Dataset(tuple(records), L, N, cfg.dense_dim or None)


# -- untrimmed concatenation ---------------------------------------------------

def concat_untrimmed(positives: Sequence[VideoRecord], negatives: Sequence[VideoRecord],
                     placements: int = 5, seed: int = 0, n_slots: int = 5,
                     target: Optional[int] = None) -> list:
    """Embed each positive clip among ``n_slots - 1`` random negatives.

    Each positive yields ``placements`` streams with the positive at distinct
    slot indices.  Negatives are drawn without replacement within a stream and
    with replacement across streams.
    """
    if placements < 1 or placements > n_slots:
        raise ConfigError(f"placements must lie in [1, {n_slots}]")
    if len(negatives) < n_slots - 1:
        raise ConfigError(f"need at least {n_slots - 1} negative clips, got {len(negatives)}")
    rng = np.random.default_rng(seed)
    out = []
    for pos in positives:
        tgt = pos.label if target is None else target
        if placements == n_slots:
            slots = np.arange(n_slots)
        else:
            slots = np.sort(rng.choice(n_slots, size=placements, replace=False))
        for slot in slots:
            neg_idx = rng.choice(len(negatives), size=n_slots - 1, replace=False)
            clips = [negatives[i] for i in neg_idx]
            clips.insert(int(slot), pos)
            start = sum(c.n_frames for c in clips[:slot])
            scores = np.concatenate([c.scores for c in clips], axis=0)
            out.append(UntrimmedRecord(
                id=f"{pos.id}@{int(slot)}", scores=_frozen(scores),
                span=(start, start + pos.n_frames), target=int(tgt),
                segments=tuple((c.id, c.label) for c in clips)))
    return out


def untrimmed_split(dataset: Dataset, target: int, placements: int = 5,
                    seed: int = 0) -> list:
    """Untrimmed streams for ``target`` built from the clips of ``dataset``."""
    pos = [r for r in dataset if r.label == target]
    neg = [r for r in dataset if r.label != target]
    return concat_untrimmed(pos, neg, placements=placements, seed=seed)
