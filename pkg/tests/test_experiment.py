import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from featuretriage.data import ConfigError
from featuretriage.experiment import (ExperimentConfig, accuracy, config_hash, confidence_curve,
                                      reaggregate, run_experiment)

SMALL = {"n_activities": 3, "n_channels": 6, "length_range": [8, 14], "span_frac": [0.5, 1.0]}


def cfg(tmp_path, **kw):
    d = {"synthetic": SMALL, "n_train": 60, "n_test": 30, "seeds": [1, 2],
         "iterations": 2, "out": str(tmp_path / "out")}
    d.update(kw)
    return ExperimentConfig.from_dict(d)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- metrics ------------------------------------------------------------------------------

def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([1, 0, 2, 2], [1, 0, 2, 0]) == 0.75
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1, 2], [1])


def _trace(posteriors):
    return {"initial_posterior": posteriors[0],
            "steps": [{"posterior": p} for p in posteriors[1:]]}


def test_confidence_curve_examples():
    np.testing.assert_allclose(confidence_curve([_trace([0.2, 0.5, 0.9])]), [0.2, 0.5, 0.9])
    flat = [_trace([0.4] * 5), _trace([0.4] * 3)]
    np.testing.assert_allclose(confidence_curve(flat), [0.4] * 5)
    np.testing.assert_allclose(confidence_curve(flat, 4), [0.4] * 4)
    # shorter traces hold their final value
    np.testing.assert_allclose(confidence_curve([_trace([0.2, 0.4]), _trace([0.6])]), [0.4, 0.5])
    # normalized: q = 0, .5, 1 on a 5-entry trace reads entries 0, 2, 4
    np.testing.assert_allclose(confidence_curve([_trace([0.1, 0.2, 0.3, 0.4, 0.5])], 3),
                               [0.1, 0.3, 0.5])


@given(st.lists(st.lists(st.floats(0, 1), min_size=1, max_size=8), min_size=1, max_size=6))
def test_confidence_curve_endpoint_minus_start_is_mean_total_reward(seqs):
    traces = [_trace(s) for s in seqs]
    curve = confidence_curve(traces)
    rewards = [sum(b - a for a, b in zip(s, s[1:])) for s in seqs]
    assert abs((curve[-1] - curve[0]) - np.mean(rewards)) < 1e-9


# -- configuration -------------------------------------------------------------------------

@pytest.mark.parametrize("bad", [
    {"seeds": []}, {"budgets": []}, {"selectors": ["nope"]},
    {"selectors": ["passive", "passive"]}, {"setting": "streaming", "selectors": ["objpref"]},
    {"setting": "streaming", "speeds": [0]}, {"budgets": [1.5]}, {"bogus_key": 1},
    {"synthetic": None},
])
def test_invalid_configs_rejected(tmp_path, bad):
    with pytest.raises(ConfigError):
        cfg(tmp_path, **bad)


def test_config_hash_changes_iff_a_field_changes(tmp_path):
    a, b = cfg(tmp_path), cfg(tmp_path)
    assert config_hash(a) == config_hash(b)
    for change in ({"l2": 2.0}, {"seeds": [1]}, {"out": "elsewhere"}, {"gamma": 0.5},
                   {"synthetic": {**SMALL, "n_channels": 7}}):
        assert config_hash(cfg(tmp_path, **change)) != config_hash(a)


@given(st.floats(0.01, 10), st.floats(0.01, 10))
def test_config_hash_property(l2a, l2b):
    a = ExperimentConfig.from_dict({"synthetic": SMALL, "l2": l2a})
    b = ExperimentConfig.from_dict({"synthetic": SMALL, "l2": l2b})
    assert (config_hash(a) == config_hash(b)) == (l2a == l2b)


def test_missing_model_file_named(tmp_path):
    with pytest.raises(ConfigError, match="nowhere.json"):
        run_experiment(cfg(tmp_path, classifier_path=str(tmp_path / "nowhere.json")))


# -- sweeps --------------------------------------------------------------------------------

def test_batch_sweep_rows_convergence_and_reaggregation(tmp_path):
    c = cfg(tmp_path, selectors=["policy", "passive", "objpref", "dt-static", "dt-top"])
    summary = run_experiment(c)
    out = tmp_path / "out"
    rows = read_csv(out / "accuracy_vs_budget.csv")
    assert len(rows) == 10
    last = rows[-1]
    assert len({last[f"{s}_mean"] for s in c.selectors}) == 1
    assert all(float(last[f"{s}_sd"]) >= 0 for s in c.selectors)
    for name, text in reaggregate(out).items():
        assert (out / name).read_text() == text
    saved = json.loads((out / "summary.json").read_text())
    assert saved["config_hash"] == config_hash(c) == summary["config_hash"]
    assert saved["seeds"] == [1, 2]


def test_streaming_exhaustive_accuracy_nondecreasing_in_speed(tmp_path):
    c = cfg(tmp_path, setting="streaming", selectors=["exhaustive", "passive"],
            speeds=[1, 2, 4, 8], seeds=[1])
    run_experiment(c)
    out = tmp_path / "out"
    acc = [float(r["exhaustive_mean"]) for r in read_csv(out / "accuracy_vs_speed.csv")]
    assert all(x <= y for x, y in zip(acc, acc[1:]))
    cost = [float(r["exhaustive_mean"]) for r in read_csv(out / "cost_vs_speed.csv")]
    assert all(x <= y for x, y in zip(cost, cost[1:]))
    curve = read_csv(out / "confidence_vs_step.csv")
    assert len(curve) == 4 * c.curve_points and {r["speed"] for r in curve} == {"1", "2", "4", "8"}
    for name, text in reaggregate(out).items():
        assert (out / name).read_text() == text


def test_untrimmed_sweep_outputs(tmp_path):
    c = cfg(tmp_path, setting="untrimmed", selectors=["policy", "passive", "dt-static"],
            speeds=[6, 12], seeds=[1], placements=2, thresholds=[0.3, 0.6, 0.9])
    run_experiment(c)
    out = tmp_path / "out"
    f1 = read_csv(out / "f1.csv")
    assert [r["speed"] for r in f1] == ["6", "12"]
    assert all(0 <= float(r["passive_mean"]) <= 1 for r in f1)
    amoc = read_csv(out / "amoc.csv")
    assert len(amoc) == 3 * 2 * 3
    for name, text in reaggregate(out).items():
        assert (out / name).read_text() == text


def test_rerun_is_byte_identical(tmp_path):
    files = {}
    for run in ("a", "b"):
        c = cfg(tmp_path, out=str(tmp_path / run), setting="streaming", speeds=[2, 4],
                seeds=[3], selectors=["policy", "dt-top"])
        run_experiment(c)
        files[run] = {p.relative_to(tmp_path / run): p.read_bytes()
                      for p in sorted((tmp_path / run).rglob("*")) if p.is_file()}
    assert files["a"].keys() == files["b"].keys()
    for k in files["a"]:
        if k.name == "summary.json":  # only the recorded output directory differs
            a = json.loads(files["a"][k])
            b = json.loads(files["b"][k])
            for d in (a, b):
                d["config"].pop("out")
                d.pop("config_hash")
            assert a == b
        else:
            assert files["a"][k] == files["b"][k], k
