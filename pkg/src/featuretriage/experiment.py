"""Experiment sweeps: budgets (batch) or detector speeds (streaming,
untrimmed), repeated over seeds, with CSV/JSON emission.

Every CSV is produced by aggregating the JSONL trace dumps written under
``<out>/traces``; ``reaggregate`` repeats that step from disk alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .baselines import (PassiveSelector, dt_selectors, exhaustive_selector,
                        importance_ranking, object_pref_order, train_decision_tree)
from .classifier import BINARY, MULTICLASS, LinearClassifier, train_classifier
from .data import ConfigError, SyntheticConfig, gen_synthetic, load_dataset, untrimmed_split
from .descriptor import MAX_POOL, MEAN_POOL
from .envs import BatchEnv, StreamingEnv, default_buffer, full_observation_vector, make_batch_actions
from .gmm import DiagonalGMM, fit_gmm
from .qpolicy import (BATCH, STREAMING, UNTRIMMED, PolicyConfig, QModel, QSelector,
                      policy_iteration)
from .untrimmed import (DetectionTrace, UntrimmedEnv, amoc_curve, balanced_pos_weight,
                        default_beta, f1_score, train_binary_recognizer, window_training_set)

log = logging.getLogger(__name__)

WORKERS_ENV = "FEATURETRIAGE_WORKERS"
SELECTORS = ("policy", "passive", "objpref", "dt-static", "dt-top", "exhaustive")
SCHEMAS = {
    "accuracy_vs_budget.csv": "accuracy-budget/1",
    "accuracy_vs_speed.csv": "accuracy-speed/1",
    "cost_vs_speed.csv": "cost-speed/1",
    "confidence_vs_step.csv": "confidence-step/1",
    "f1.csv": "f1-speed/1",
    "cost.csv": "cost-speed/1",
    "amoc.csv": "amoc/1",
}


# -- configuration ----------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    setting: str = BATCH
    selectors: list = field(default_factory=lambda: ["policy", "passive", "objpref", "dt-static"])
    budgets: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 11)])
    speeds: list = field(default_factory=lambda: [1, 2, 4, 8])
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    out: str = "results"
    # data: either manifests or a synthetic generator config
    train_data: Optional[str] = None
    test_data: Optional[str] = None
    synthetic: Optional[dict] = None
    n_train: int = 400
    n_test: int = 200
    train_seed: int = 101
    test_seed: int = 202
    # models (paths are optional; missing ones are trained)
    classifier_path: Optional[str] = None
    gmm_path: Optional[str] = None
    policy_path: Optional[str] = None
    l2: float = 1.0
    gmm_components: int = 5
    gmm_seed: int = 0
    use_gmm: bool = True
    policy_state: str = "observed"
    # policy iteration
    iterations: int = 8
    gamma: float = 0.4
    epsilon0: float = 0.5
    epsilon_step: float = 0.1
    epsilon_floor: float = 0.05
    ridge: float = 1.0
    # environments
    grid: str = "temporal"
    buffer: Optional[int] = None
    mode: str = MAX_POOL
    # untrimmed
    target: int = 0
    placements: int = 5
    beta: Optional[int] = None
    window_per_clip: int = 5
    untrimmed_seed: int = 0
    balance_reward: bool = True
    thresholds: list = field(default_factory=lambda: [round(0.05 * i, 2) for i in range(1, 20)])
    # baselines / reporting
    dt_top_p: Optional[int] = None
    curve_points: int = 11

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        if self.setting not in (BATCH, STREAMING, UNTRIMMED):
            raise ConfigError(f"unknown setting {self.setting!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        grid = self.budgets if self.setting == BATCH else self.speeds
        if not grid:
            raise ConfigError("the budget / detector-speed grid must be nonempty")
        if self.setting == BATCH and any(not 0 <= b <= 1 for b in self.budgets):
            raise ConfigError("budget fractions must lie in [0, 1]")
        if self.setting != BATCH and any(not s > 0 for s in self.speeds):
            raise ConfigError("detector speeds must be positive")
        if not self.selectors:
            raise ConfigError("at least one selector is required")
        bad = [s for s in self.selectors if s not in SELECTORS]
        if bad:
            raise ConfigError(f"unknown selectors {bad}; choose from {list(SELECTORS)}")
        if len(set(self.selectors)) != len(self.selectors):
            raise ConfigError("selectors are listed more than once")
        if "objpref" in self.selectors and self.setting != BATCH:
            raise ConfigError("objpref ranks subvolume actions and only applies to the batch setting")
        if self.mode == MEAN_POOL and any(s.startswith("dt") for s in self.selectors):
            raise ConfigError("decision-tree orderings need object detectors (max-pool mode)")
        if self.mode not in (MAX_POOL, MEAN_POOL):
            raise ConfigError(f"unknown pooling mode {self.mode!r}")
        if self.train_data is None and self.synthetic is None:
            raise ConfigError("give either train_data/test_data manifests or a synthetic config")
        if self.setting == UNTRIMMED and not self.thresholds:
            raise ConfigError("untrimmed experiments need at least one AMOC threshold")
        if self.curve_points < 2:
            raise ConfigError("curve_points must be at least 2")

    def policy_config(self, seed) -> PolicyConfig:
        return PolicyConfig(iterations=self.iterations, gamma=self.gamma,
                            epsilon0=self.epsilon0, epsilon_step=self.epsilon_step,
                            epsilon_floor=self.epsilon_floor, ridge=self.ridge, seed=int(seed))


def load_config(path) -> dict:
    """Read a YAML or JSON mapping."""
    import yaml
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    with open(p) as fh:
        d = yaml.safe_load(fh)
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: expected a mapping at the top level")
    return d


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# -- metrics -----------------------------------------------------------------------------

def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    return float(np.mean(p == y))


def _posteriors(trace) -> np.ndarray:
    if isinstance(trace, dict):
        return np.array([trace["initial_posterior"]] + [s["posterior"] for s in trace["steps"]])
    return trace.posteriors()


def confidence_curve(traces, n_points: Optional[int] = None) -> np.ndarray:
    """Mean true-class posterior per step.

    With ``n_points`` the step axis is normalized: entry i averages each
    trace's posterior at step round(i / (n_points - 1) * K) of its K steps.
    Without it, entry k averages the posteriors after k steps, shorter traces
    holding their final value.
    """
    seqs = [_posteriors(t) for t in traces]
    if not seqs:
        raise ValueError("confidence_curve needs at least one trace")
    if n_points is None:
        K = max(len(s) for s in seqs)
        padded = np.array([np.concatenate([s, np.full(K - len(s), s[-1])]) for s in seqs])
        return padded.mean(axis=0)
    q = np.linspace(0.0, 1.0, n_points)
    rows = [s[np.rint(q * (len(s) - 1)).astype(int)] for s in seqs]
    return np.mean(rows, axis=0)


# -- data & models -----------------------------------------------------------------------

def _require(path):
    if path is not None and not Path(path).is_file():
        raise ConfigError(f"model file not found: {path}")
    return path


def load_data(cfg: ExperimentConfig):
    if cfg.train_data is not None:
        if cfg.test_data is None:
            raise ConfigError("test_data is required alongside train_data")
        return load_dataset(cfg.train_data), load_dataset(cfg.test_data)
    base = dict(cfg.synthetic)
    for k in ("n_clips", "seed", "id_prefix"):
        base.pop(k, None)
    train = gen_synthetic(SyntheticConfig.from_dict({**base, "n_clips": cfg.n_train,
                                                     "seed": cfg.train_seed, "id_prefix": "train"}))
    test = gen_synthetic(SyntheticConfig.from_dict({**base, "n_clips": cfg.n_test,
                                                    "seed": cfg.test_seed, "id_prefix": "test"}))
    return train, test


def batch_observations(dataset, actions) -> np.ndarray:
    return np.stack([full_observation_vector(v, actions) for v in dataset])


@dataclass
class Context:
    """Everything a sweep job needs; built once, shared read-only."""
    cfg: ExperimentConfig
    train: object
    test: object
    classifier: LinearClassifier
    gmm: Optional[DiagonalGMM] = None
    actions: object = None
    train_eval: list = None   # episodes for policy training
    test_eval: list = None    # episodes for evaluation
    buffer: int = 0
    beta: int = 0
    dt_importances: Optional[np.ndarray] = None
    objpref: object = None
    policy: Optional[QModel] = None
    pos_weight: float = 1.0


def build_context(cfg: ExperimentConfig) -> Context:
    for p in (cfg.classifier_path, cfg.gmm_path, cfg.policy_path):
        _require(p)
    train, test = load_data(cfg)
    ctx = Context(cfg, train, test, None)
    if cfg.policy_path:
        ctx.policy = QModel.load(cfg.policy_path)
    if cfg.setting == UNTRIMMED:
        ctx.beta = cfg.beta or default_beta(train.n_channels)
        if cfg.classifier_path:
            ctx.classifier = LinearClassifier.load(cfg.classifier_path)
        else:
            ctx.classifier = train_binary_recognizer(train, cfg.target, ctx.beta, cfg.l2,
                                                     cfg.untrimmed_seed, cfg.window_per_clip)
        ctx.train_eval = untrimmed_split(train, cfg.target, cfg.placements, cfg.untrimmed_seed)
        ctx.test_eval = untrimmed_split(test, cfg.target, cfg.placements, cfg.untrimmed_seed + 1)
        ctx.buffer = cfg.buffer or default_buffer(train)
        if cfg.balance_reward:
            ctx.pos_weight = balanced_pos_weight(ctx.train_eval)
        if any(s.startswith("dt") for s in cfg.selectors):
            X, y = window_training_set(train, cfg.target, ctx.beta, cfg.untrimmed_seed,
                                       cfg.window_per_clip)
            ctx.dt_importances = train_decision_tree(X, y)[1]
        return ctx

    if cfg.classifier_path:
        ctx.classifier = LinearClassifier.load(cfg.classifier_path)
    elif cfg.setting == STREAMING and cfg.mode == MEAN_POOL:
        X = np.stack([v.dense.mean(axis=0) for v in train])
        ctx.classifier = train_classifier(X, train.labels, cfg.l2, MULTICLASS, train.n_activities)
    else:
        ctx.classifier = train_classifier(train.full_descriptors(), train.labels, cfg.l2,
                                          MULTICLASS, train.n_activities)
    ctx.train_eval, ctx.test_eval = list(train), list(test)
    if cfg.setting == BATCH:
        ctx.actions = make_batch_actions(train.n_channels, cfg.grid)
        Xobs = batch_observations(train, ctx.actions)
        if cfg.gmm_path:
            ctx.gmm = DiagonalGMM.load(cfg.gmm_path)
        elif cfg.use_gmm:
            ctx.gmm = fit_gmm(Xobs, cfg.gmm_components, cfg.gmm_seed)
        if "objpref" in cfg.selectors:
            ctx.objpref = object_pref_order(Xobs, train.labels)
        if any(s.startswith("dt") for s in cfg.selectors):
            ctx.dt_importances = train_decision_tree(Xobs, train.labels)[1]
    else:
        ctx.buffer = cfg.buffer or default_buffer(train)
        if any(s.startswith("dt") for s in cfg.selectors):
            ctx.dt_importances = train_decision_tree(train.full_descriptors(), train.labels)[1]
    return ctx


def make_env(ctx: Context, speed=None, probe=None):
    cfg = ctx.cfg
    if cfg.setting == BATCH:
        return BatchEnv(ctx.actions, ctx.classifier, ctx.gmm, state_psi=cfg.policy_state)
    if cfg.setting == STREAMING:
        return StreamingEnv(ctx.classifier, speed, ctx.buffer, cfg.mode,
                            ctx.train.n_channels, probe)
    return UntrimmedEnv(ctx.classifier, speed, ctx.buffer, ctx.beta, probe, ctx.pos_weight)


def make_selector(name, ctx: Context, env, model=None, speed=None):
    actions = env.actions
    skip = actions.skip_index
    if name == "policy":
        if model is None:
            raise ValueError("the policy selector needs a trained model")
        return QSelector(model, 0.0)
    if name == "passive":
        return PassiveSelector(skip)
    if name == "exhaustive":
        return exhaustive_selector(actions)
    if name == "objpref":
        return ctx.objpref
    if name in ("dt-static", "dt-top"):
        if ctx.cfg.dt_top_p is not None:
            P = ctx.cfg.dt_top_p
        elif speed is not None:
            P = max(1, int(round(speed)))
        else:
            P = max(1, len(importance_ranking(ctx.dt_importances)))
        static, top = dt_selectors(ctx.dt_importances, P, skip_index=skip)
        return static if name == "dt-static" else top
    raise ValueError(f"unknown selector {name!r}")


# -- sweep jobs ---------------------------------------------------------------------------

def speed_tag(speed) -> str:
    return "all" if speed is None else f"{float(speed):g}"


def trace_name(selector, speed, seed) -> str:
    return f"traces/{selector}_{speed_tag(speed)}_seed{seed}.jsonl"


def trace_path(out, selector, speed, seed) -> Path:
    return Path(out) / trace_name(selector, speed, seed)


def eval_rng(seed, index):
    return np.random.default_rng([int(seed), 7919, int(index)])


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True))
            fh.write("\n")


def _trace_row(trace, setting):
    d = trace.to_dict()
    if setting == UNTRIMMED:
        d.pop("steps")  # per-frame detections carry what the metrics need
    return d


def run_job(ctx: Context, seed, speed=None) -> dict:
    """Train (or reuse) the policy for one (seed, speed) point, then roll every
    selector over the evaluation episodes and dump the traces."""
    cfg = ctx.cfg
    env = make_env(ctx, speed)
    info = {"seed": int(seed), "speed": speed}
    model = ctx.policy
    if "policy" in cfg.selectors and model is None:
        model, diag = policy_iteration(ctx.train_eval, env, cfg.policy_config(seed))
        info["diagnostics"] = diag
        pol_dir = Path(cfg.out) / "policies"
        model.save(pol_dir / f"policy_{speed_tag(speed)}_seed{seed}.json")
    for name in cfg.selectors:
        sel = make_selector(name, ctx, env, model, speed)
        rows = [_trace_row(env.episode(v, sel, eval_rng(seed, j)), cfg.setting)
                for j, v in enumerate(ctx.test_eval)]
        _write_jsonl(trace_path(cfg.out, name, speed, seed), rows)
    return info


def _job_args(cfg):
    speeds = [None] if cfg.setting == BATCH else list(cfg.speeds)
    return [(seed, speed) for speed in speeds for seed in cfg.seeds]


def n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


def _run_jobs(ctx, jobs):
    workers = min(n_workers(), len(jobs))
    if workers <= 1:
        return [run_job(ctx, s, v) for s, v in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_job, ctx, s, v) for s, v in jobs]
        return [f.result() for f in futures]


# -- aggregation --------------------------------------------------------------------------

def _fmt(x) -> str:
    return f"{float(x):.6f}"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[0]] + [_fmt(v) for v in r[1:]])
    return buf.getvalue()


def _mean_sd(values):
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())


def _wide(key_name, keys, selectors, metric):
    """One row per key, mean/sd columns per selector; ``metric(sel, key)``
    returns the per-seed values."""
    header = [key_name] + [f"{s}_{stat}" for s in selectors for stat in ("mean", "sd")]
    rows = []
    for k in keys:
        row = [f"{float(k):g}"]
        for s in selectors:
            row.extend(_mean_sd(metric(s, k)))
        rows.append(row)
    return _csv_text(header, rows)


def read_traces(out, selector, speed, seed) -> list:
    with open(trace_path(out, selector, speed, seed)) as fh:
        return [json.loads(line) for line in fh]


def _step_predictions(tr):
    return [tr["initial_prediction"]] + [s["prediction"] for s in tr["steps"]]


def _curve_csv(cfg, load, speeds):
    q = np.linspace(0.0, 1.0, cfg.curve_points)
    sels = cfg.selectors
    header = (["speed"] if speeds != [None] else []) + ["step_fraction"] + \
        [f"{s}_{stat}" for s in sels for stat in ("mean", "sd")]
    lines = []
    for speed in speeds:
        curves = {s: np.array([confidence_curve(load(s, speed, seed), cfg.curve_points)
                               for seed in cfg.seeds]) for s in sels}
        for i, qi in enumerate(q):
            row = [] if speed is None else [f"{float(speed):g}"]
            row.append(f"{qi:g}")
            for s in sels:
                row += [_fmt(curves[s][:, i].mean()), _fmt(curves[s][:, i].std())]
            lines.append(row)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(lines)
    return buf.getvalue()


def aggregate(cfg: ExperimentConfig, load) -> dict:
    """CSV texts keyed by file name.  ``load(selector, speed, seed)`` returns
    the trace dicts of one sweep point."""
    sels = cfg.selectors
    out = {}
    if cfg.setting == BATCH:
        def acc_at(s, b):
            vals = []
            for seed in cfg.seeds:
                trs = load(s, None, seed)
                M = len(trs[0]["steps"])
                K = int(round(b * M))
                preds = [_step_predictions(t)[K] for t in trs]
                vals.append(accuracy(preds, [t["label"] for t in trs]))
            return vals
        out["accuracy_vs_budget.csv"] = _wide("budget", cfg.budgets, sels, acc_at)
        out["confidence_vs_step.csv"] = _curve_csv(cfg, load, [None])
        return out

    speeds = list(cfg.speeds)
    if cfg.setting == STREAMING:
        def acc(s, v):
            return [accuracy([t["final_prediction"] for t in load(s, v, seed)],
                             [t["label"] for t in load(s, v, seed)]) for seed in cfg.seeds]

        def cost(s, v):
            return [np.mean([t["cost"] for t in load(s, v, seed)]) for seed in cfg.seeds]
        out["accuracy_vs_speed.csv"] = _wide("speed", speeds, sels, acc)
        out["cost_vs_speed.csv"] = _wide("speed", speeds, sels, cost)
        out["confidence_vs_step.csv"] = _curve_csv(cfg, load, speeds)
        return out

    def detections(s, v, seed):
        return [DetectionTrace(t["video"], np.array(t["detection"]["confidence"]),
                               np.array(t["detection"]["predicted"]),
                               tuple(t["detection"]["span"])) for t in load(s, v, seed)]

    def f1(s, v):
        return [f1_score(detections(s, v, seed)) for seed in cfg.seeds]

    def cost(s, v):
        return [np.mean([t["cost"] for t in load(s, v, seed)]) for seed in cfg.seeds]
    out["f1.csv"] = _wide("speed", speeds, sels, f1)
    out["cost.csv"] = _wide("speed", speeds, sels, cost)
    rows = []
    for s in sels:
        for v in speeds:
            per_seed = [sorted(amoc_curve(detections(s, v, seed), cfg.thresholds),
                               key=lambda p: p.threshold) for seed in cfg.seeds]
            for i, th in enumerate(sorted(cfg.thresholds)):
                fpr = [c[i].fpr for c in per_seed]
                nt = [c[i].nt2d for c in per_seed]
                rows.append([s, f"{float(v):g}", f"{float(th):g}", *map(_fmt, _mean_sd(fpr)),
                             *map(_fmt, _mean_sd(nt))])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["selector", "speed", "threshold", "fpr_mean", "fpr_sd", "nt2d_mean", "nt2d_sd"])
    w.writerows(rows)
    out["amoc.csv"] = buf.getvalue()
    return out


def _cached_loader(out):
    cache = {}

    def load(selector, speed, seed):
        key = (selector, speed_tag(speed), seed)
        if key not in cache:
            cache[key] = read_traces(out, selector, speed, seed)
        return cache[key]
    return load


def reaggregate(out_dir) -> dict:
    """Recompute every CSV of a finished run from its summary and traces."""
    with open(Path(out_dir) / "summary.json") as fh:
        summary = json.load(fh)
    cfg = ExperimentConfig.from_dict(summary["config"])
    return aggregate(cfg, _cached_loader(out_dir))


# -- driver -------------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run the sweep and write CSVs, traces and ``summary.json`` under
    ``cfg.out``.  Returns the summary."""
    cfg.validate()
    out = Path(cfg.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    if "policy" in cfg.selectors and cfg.policy_path is None:
        (out / "policies").mkdir(exist_ok=True)
    ctx = build_context(cfg)
    jobs = _job_args(cfg)
    log.info("running %d sweep jobs (%s setting)", len(jobs), cfg.setting)
    infos = _run_jobs(ctx, jobs)
    csvs = aggregate(cfg, _cached_loader(out))
    for name, text in csvs.items():
        (out / name).write_text(text)
    diagnostics = {f"{speed_tag(i['speed'])}/seed{i['seed']}": i["diagnostics"]
                   for i in infos if "diagnostics" in i}
    summary = {
        "version": __version__,
        "setting": cfg.setting,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "seeds": list(cfg.seeds),
        "files": sorted(csvs),
        "schemas": {k: SCHEMAS[k] for k in sorted(csvs)},
        "traces": sorted(trace_name(s, v, seed) for seed, v in jobs for s in cfg.selectors),
        "buffer": ctx.buffer or None,
        "beta": ctx.beta or None,
        "policy_diagnostics": diagnostics,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return summary
