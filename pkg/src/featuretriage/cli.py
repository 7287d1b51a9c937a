"""Command-line entry point: ``featuretriage <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .classifier import BINARY, MULTICLASS, LinearClassifier, TrainingError, train_classifier
from .data import ConfigError, DatasetError, SyntheticConfig, gen_synthetic, load_dataset, save_dataset, untrimmed_split
from .descriptor import MAX_POOL, MEAN_POOL
from .envs import BatchEnv, StreamingEnv, default_buffer, make_batch_actions
from .experiment import ExperimentConfig, batch_observations, load_config, run_experiment
from .gmm import DiagonalGMM, fit_gmm
from .qpolicy import BATCH, STREAMING, UNTRIMMED, PolicyConfig, policy_iteration
from .untrimmed import UntrimmedEnv, balanced_pos_weight, default_beta, train_binary_recognizer

log = logging.getLogger("featuretriage")

BASELINES = ("passive", "objpref", "dt-static", "dt-top", "exhaustive")


def _floats(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _names(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _need(value, flag):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


# -- subcommands --------------------------------------------------------------------------

def cmd_gen_synthetic(args):
    d = load_config(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.n_clips is not None:
        d["n_clips"] = args.n_clips
    ds = gen_synthetic(SyntheticConfig.from_dict(d))
    manifest = save_dataset(ds, _need(args.out, "--out"))
    print(manifest)


def cmd_train_classifier(args):
    ds = load_dataset(_need(args.data, "--data"))
    if args.kind == BINARY:
        beta = args.beta or default_beta(ds.n_channels)
        clf = train_binary_recognizer(ds, args.target, beta, args.l2, args.seed or 0)
    else:
        clf = train_classifier(ds.full_descriptors(), ds.labels, args.l2, MULTICLASS,
                               ds.n_activities)
    out = Path(_need(args.out, "--out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    clf.save(out)
    acc = float(np.mean(clf.predict(ds.full_descriptors()) == ds.labels)) if args.kind == MULTICLASS else None
    print(json.dumps({"model": str(out), "kind": args.kind, "train_accuracy": acc}, sort_keys=True))


def cmd_train_gmm(args):
    ds = load_dataset(_need(args.data, "--data"))
    X = batch_observations(ds, make_batch_actions(ds.n_channels, args.grid))
    gmm = fit_gmm(X, args.components, args.seed or 0)
    out = Path(_need(args.out, "--out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    gmm.save(out)
    for w in gmm.warnings:
        log.warning("gmm: %s", w)
    print(json.dumps({"model": str(out), "iterations": len(gmm.ll_trace),
                      "loglik": gmm.ll_trace[-1]}, sort_keys=True))


def cmd_train_policy(args):
    ds = load_dataset(_need(args.data, "--data"))
    clf = LinearClassifier.load(_need(args.classifier, "--classifier"))
    if args.setting == BATCH:
        gmm = DiagonalGMM.load(args.gmm) if args.gmm else None
        env = BatchEnv(make_batch_actions(ds.n_channels, args.grid), clf, gmm)
        videos = list(ds)
    elif args.setting == STREAMING:
        buffer = args.buffer or default_buffer(ds)
        env = StreamingEnv(clf, _need(args.detector_fps, "--detector-fps"), buffer, args.mode,
                           ds.n_channels)
        videos = list(ds)
    else:
        buffer = args.buffer or default_buffer(ds)
        beta = args.beta or default_beta(ds.n_channels)
        videos = untrimmed_split(ds, args.target, args.placements, args.seed or 0)
        pos_weight = 1.0 if args.unbalanced else balanced_pos_weight(videos)
        env = UntrimmedEnv(clf, _need(args.detector_fps, "--detector-fps"), buffer, beta,
                           pos_weight=pos_weight)
    config = PolicyConfig(iterations=args.iterations, gamma=args.gamma,
                          epsilon0=args.epsilon0, epsilon_step=args.epsilon_step,
                          epsilon_floor=args.epsilon_floor, ridge=args.ridge, seed=args.seed or 0)
    model, diag = policy_iteration(videos, env, config)
    out = Path(_need(args.out, "--out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    _write_json(out.with_suffix(".diagnostics.json"), diag)
    print(json.dumps(diag[-1], sort_keys=True))


def _experiment_config(args, setting, selectors=None):
    d = load_config(args.config) if args.config else {}
    d["setting"] = setting
    overrides = {
        "seeds": [args.seed] if args.seed is not None else None,
        "out": args.out,
        "train_data": args.train_data, "test_data": args.test_data,
        "classifier_path": args.classifier, "gmm_path": args.gmm, "policy_path": args.policy,
        "selectors": selectors or args.selectors,
        "budgets": getattr(args, "budget_frac", None),
        "speeds": getattr(args, "detector_fps", None),
        "buffer": getattr(args, "buffer", None),
        "beta": getattr(args, "beta", None),
        "target": getattr(args, "target_activity", None),
    }
    for k, v in overrides.items():
        if v is not None:
            d[k] = v
    return ExperimentConfig.from_dict(d)


def _run(cfg):
    summary = run_experiment(cfg)
    for name in summary["files"]:
        print(Path(cfg.out) / name)
    print(Path(cfg.out) / "summary.json")


def cmd_run_batch(args):
    _run(_experiment_config(args, BATCH))


def cmd_run_streaming(args):
    _run(_experiment_config(args, STREAMING))


def cmd_run_untrimmed(args):
    _run(_experiment_config(args, UNTRIMMED))


def cmd_baseline(args):
    _run(_experiment_config(args, args.setting, [args.method]))


def cmd_report(args):
    from .plotting import render_report
    for p in render_report(_need(args.out, "--out")):
        print(p)


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (experiments: run this seed only)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--config", help="YAML/JSON config file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="featuretriage",
                                description="Learn and evaluate feature-prioritization policies.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-synthetic", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n-clips", type=int)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("train-classifier", parents=[common], help="train the activity classifier")
    s.add_argument("--data", help="dataset manifest")
    s.add_argument("--l2", type=float, default=1.0)
    s.add_argument("--kind", choices=[MULTICLASS, BINARY], default=MULTICLASS)
    s.add_argument("--target", type=int, default=0, help="target activity (binary)")
    s.add_argument("--beta", type=int, help="window bound in frames (binary)")
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("train-gmm", parents=[common], help="fit the imputation GMM")
    s.add_argument("--data")
    s.add_argument("--components", type=int, default=5)
    s.add_argument("--grid", choices=["temporal", "spatiotemporal"], default="temporal")
    s.set_defaults(func=cmd_train_gmm)

    s = sub.add_parser("train-policy", parents=[common], help="run policy iteration")
    s.add_argument("--data")
    s.add_argument("--classifier")
    s.add_argument("--gmm")
    s.add_argument("--setting", choices=[BATCH, STREAMING, UNTRIMMED], default=BATCH)
    s.add_argument("--iterations", type=int, default=8)
    s.add_argument("--gamma", type=float, default=0.4)
    s.add_argument("--epsilon0", type=float, default=0.5)
    s.add_argument("--epsilon-step", type=float, default=0.1)
    s.add_argument("--epsilon-floor", type=float, default=0.05)
    s.add_argument("--ridge", type=float, default=1.0)
    s.add_argument("--grid", choices=["temporal", "spatiotemporal"], default="temporal")
    s.add_argument("--detector-fps", type=float)
    s.add_argument("--buffer", type=int)
    s.add_argument("--mode", choices=[MAX_POOL, MEAN_POOL], default=MAX_POOL)
    s.add_argument("--beta", type=int)
    s.add_argument("--target", type=int, default=0)
    s.add_argument("--placements", type=int, default=5)
    s.add_argument("--unbalanced", action="store_true",
                   help="untrimmed: do not up-weight rewards on in-span frames")
    s.set_defaults(func=cmd_train_policy)

    def experiment_flags(s):
        s.add_argument("--train-data")
        s.add_argument("--test-data")
        s.add_argument("--classifier")
        s.add_argument("--gmm")
        s.add_argument("--policy")

    s = sub.add_parser("run-batch", parents=[common], help="batch budget sweep")
    experiment_flags(s)
    s.add_argument("--budget-frac", type=_floats, help="e.g. 0.1,0.3,1.0")
    s.add_argument("--selectors", type=_names)
    s.set_defaults(func=cmd_run_batch)

    s = sub.add_parser("run-streaming", parents=[common], help="streaming detector-speed sweep")
    experiment_flags(s)
    s.add_argument("--detector-fps", type=_floats, help="e.g. 1,2,4,8")
    s.add_argument("--buffer", type=int)
    s.add_argument("--selectors", type=_names)
    s.set_defaults(func=cmd_run_streaming)

    s = sub.add_parser("run-untrimmed", parents=[common], help="untrimmed detection sweep")
    experiment_flags(s)
    s.add_argument("--detector-fps", type=_floats)
    s.add_argument("--buffer", type=int)
    s.add_argument("--beta", type=int)
    s.add_argument("--target-activity", type=int)
    s.add_argument("--selectors", type=_names)
    s.set_defaults(func=cmd_run_untrimmed)

    s = sub.add_parser("baseline", parents=[common], help="run a single baseline selector")
    experiment_flags(s)
    s.add_argument("--method", choices=sorted(BASELINES), required=True)
    s.add_argument("--setting", choices=[BATCH, STREAMING, UNTRIMMED], default=BATCH)
    s.add_argument("--budget-frac", type=_floats)
    s.add_argument("--detector-fps", type=_floats)
    s.add_argument("--buffer", type=int)
    s.add_argument("--beta", type=int)
    s.add_argument("--target-activity", type=int)
    s.set_defaults(func=cmd_baseline, selectors=None)

    s = sub.add_parser("report", parents=[common], help="render PNG figures for an experiment directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, DatasetError, TrainingError, FileNotFoundError) as exc:
        print(f"featuretriage {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
