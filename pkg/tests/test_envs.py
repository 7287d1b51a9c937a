import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from featuretriage.baselines import PassiveSelector, StaticOrdering, exhaustive_selector
from featuretriage.classifier import LinearClassifier, train_classifier
from featuretriage.data import make_record
from featuretriage.descriptor import MEAN_POOL
from featuretriage.envs import (BatchEnv, DetectInBuffer, DetectInVolume, Skip, StreamingEnv,
                                batch_volumes, default_buffer, episode_cost,
                                full_observation_vector, make_batch_actions,
                                make_streaming_actions, observe, step_reward)
from featuretriage.gmm import fit_gmm
from featuretriage.qpolicy import EpisodeTrace, RandomSelector, StepRecord

from conftest import toy_video


class Scripted:
    """Plays a fixed action list, then Skip (or the last legal candidate)."""

    def __init__(self, plan, fallback=None):
        self.plan = list(plan)
        self.fallback = fallback

    def begin(self, rng):
        plan = list(self.plan)

        def choose(cand, phi):
            if plan:
                return plan.pop(0)
            if self.fallback is not None and self.fallback in cand:
                return self.fallback
            return int(cand[-1])
        return choose


def test_batch_action_counts():
    assert len(make_batch_actions(26, "spatiotemporal")) == 208
    assert len(make_batch_actions(75, "temporal")) == 150


@given(st.integers(2, 200))
def test_volumes_partition_clip(T):
    for grid in ("temporal",):
        frames = [v.frames(T) for v in batch_volumes(grid)]
        covered = np.concatenate([np.arange(*f) for f in frames])
        np.testing.assert_array_equal(np.sort(covered), np.arange(T))
        assert len(covered) == T


def test_spatiotemporal_cells_partition():
    T = 6
    cells = np.array([[0, 1, 2, 3]] * T)
    v = toy_video(np.random.default_rng(0).random((T, 4)), boxes=cells)
    acts = make_batch_actions(4, "spatiotemporal")
    x = full_observation_vector(v, acts).reshape(4, 8)
    # every detection sits in exactly one (half, cell) volume
    for n in range(4):
        assert np.count_nonzero(x[n]) == 2
        assert x[n].max() == v.scores[:, n].max()


def test_observe_examples():
    v = toy_video([[0.1], [0.9], [0.4]])
    first, second = make_batch_actions(1)
    assert observe(v, DetectInBuffer(0), (0, 3)) == 0.9
    assert first.volume.frames(3) == (0, 2) and observe(v, first) == 0.9
    assert second.volume.frames(3) == (2, 3) and observe(v, second) == 0.4
    with pytest.raises(ValueError):
        observe(v, DetectInBuffer(0), (2, 2))


def test_step_reward_examples():
    clf = LinearClassifier(np.array([[0.0, 0.0], [2.0, 0.0]]), 1.0)
    psi = np.array([0.3])
    assert step_reward(clf, psi, psi, 1) == 0.0
    assert step_reward(clf, np.array([0.0]), np.array([1.0]), 1) > 0
    assert step_reward(clf, np.array([1.0]), np.array([0.0]), 1) < 0
    # posterior 0.4 -> 0.6 gives +0.2 for a binary recognizer
    b = LinearClassifier(np.array([[1.0, 0.0]]), 1.0, "binary")
    lo, hi = -np.log(1 / 0.4 - 1), -np.log(1 / 0.6 - 1)
    assert abs(step_reward(b, np.array([lo]), np.array([hi]), 1) - 0.2) < 1e-12


def test_episode_cost_examples():
    skips = EpisodeTrace("v", 0, 0.5, 0, [StepRecord(k, 1, k, None, None, 0.0, 0.0, 0.5, 0)
                                          for k in range(3)])
    assert episode_cost(skips) == 0
    two = EpisodeTrace("v", 0, 0.5, 0, [StepRecord(k, 0, k, None, 0.1, 0.0, 4.0, 0.5, 0)
                                        for k in range(2)])
    assert episode_cost(two) == 8


@pytest.fixture(scope="module")
def batch_setup(small_data):
    train, test = small_data
    clf = train_classifier(train.full_descriptors(), train.labels, n_classes=train.n_activities)
    acts = make_batch_actions(train.n_channels)
    gmm = fit_gmm(np.stack([full_observation_vector(v, acts) for v in train]), 3, seed=0)
    return train, test, clf, BatchEnv(acts, clf, gmm)


def test_batch_full_budget_matches_full_observation(batch_setup):
    _, test, clf, env = batch_setup
    for i, v in enumerate(test):
        tr = env.episode(v, PassiveSelector(), np.random.default_rng(i))
        np.testing.assert_array_equal(tr.final_psi, v.scores.max(axis=0))
        assert tr.final_prediction == clf.predict(v.scores.max(axis=0))
        assert tr.cost == env.n_actions


def test_batch_zero_budget_is_pure_imputation(batch_setup):
    _, test, clf, env = batch_setup
    tr = env.episode(test[0], PassiveSelector(), K=0)
    hat = np.clip(env.gmm.weights @ env.gmm.means, 0, 1).reshape(env.N, env.V).max(axis=1)
    assert not tr.steps
    assert tr.initial_prediction == clf.predict(hat)


def test_batch_never_repeats(batch_setup):
    _, test, _, env = batch_setup
    rng = np.random.default_rng(0)
    for i in range(1000):
        v = test[i % len(test)]
        K = int(rng.integers(0, env.n_actions + 1))
        tr = env.episode(v, RandomSelector(), np.random.default_rng(i), K=K)
        acts = [s.action for s in tr.steps]
        assert len(set(acts)) == len(acts) == K


def test_batch_rejects_bad_k_and_repeats(batch_setup):
    _, test, _, env = batch_setup
    with pytest.raises(ValueError):
        env.episode(test[0], RandomSelector(), K=env.n_actions + 1)
    with pytest.raises(RuntimeError):
        env.episode(test[0], Scripted([0, 0]), K=2)


def _telescopes(tr):
    return abs(tr.rewards.sum() - (tr.final_posterior - tr.initial_posterior)) < 1e-9


def test_batch_telescoping(batch_setup):
    _, test, _, env = batch_setup
    for i, v in enumerate(test):
        assert _telescopes(env.episode(v, RandomSelector(), np.random.default_rng(i)))


def test_batch_determinism(batch_setup):
    _, test, _, env = batch_setup
    a = env.episode(test[3], RandomSelector(), np.random.default_rng(7))
    b = env.episode(test[3], RandomSelector(), np.random.default_rng(7))
    assert a.to_dict(True) == b.to_dict(True)


# -- streaming ------------------------------------------------------------------------------

def _stream_clf(N):
    return LinearClassifier(np.zeros((2, N + 1)), 1.0)


def test_streaming_action_set():
    acts = make_streaming_actions(5)
    assert len(acts) == 6 and isinstance(acts[5], Skip) and acts.skip_index == 5
    assert [a.obj for a in acts.actions[:5]] == list(range(5))
    mp = make_streaming_actions(5, MEAN_POOL)
    assert len(mp) == 2


def test_detect_cost_and_clock():
    # B=4 full buffer at speed 2: a detect costs 4 units and advances 2 frames
    v = toy_video(np.full((10, 2), 0.5))
    env = StreamingEnv(_stream_clf(2), 2, 4)
    tr = env.episode(v, Scripted([2, 2, 2, 0, 0], fallback=2))
    det = [s for s in tr.steps if s.action == 0]
    assert det[0].t == 3 and det[0].cost == 4
    assert det[1].t == 5 and det[1].cost == 4


def test_skip_semantics():
    v = toy_video(np.random.default_rng(0).random((5, 2)))
    env = StreamingEnv(_stream_clf(2), 1, 3)
    tr = env.episode(v, Scripted([], fallback=2))
    assert [s.t for s in tr.steps] == [0, 1, 2, 3, 4]
    assert all(s.cost == 0 and s.reward == 0 for s in tr.steps)
    np.testing.assert_array_equal(tr.final_psi, v.scores[0])


def test_fractional_clock_buffer_growth():
    # speed 2, growing buffer: detects at frame 0 (b=1) then 0.5 -> still frame 0
    v = toy_video(np.full((3, 1), 0.2))
    env = StreamingEnv(_stream_clf(1), 2, 8)
    tr = env.episode(v, Scripted([0, 0, 0, 0, 0], fallback=1))
    assert [s.t for s in tr.steps[:4]] == [0, 0, 1, 2]
    assert [s.cost for s in tr.steps[:4]] == [1, 1, 2, 3]


@given(st.integers(0, 10 ** 6), st.integers(1, 6), st.integers(1, 4))
def test_fast_exhaustive_recovers_full_descriptor(seed, T, N):
    rng = np.random.default_rng(seed)
    v = toy_video(rng.random((T, N)))
    env = StreamingEnv(_stream_clf(N), N * T, max(1, T))
    tr = env.episode(v, exhaustive_selector(env.actions))
    np.testing.assert_array_equal(tr.final_psi, v.scores.max(axis=0))


def test_streaming_telescoping_and_determinism(small_data):
    train, test = small_data
    clf = train_classifier(train.full_descriptors(), train.labels)
    env = StreamingEnv(clf, 3, default_buffer(train))
    for i, v in enumerate(test):
        tr = env.episode(v, RandomSelector(), np.random.default_rng(i))
        assert _telescopes(tr)
    a = env.episode(test[0], RandomSelector(), np.random.default_rng(1))
    b = env.episode(test[0], RandomSelector(), np.random.default_rng(1))
    assert a.to_dict(True) == b.to_dict(True)


def test_streaming_causality_probe(small_data):
    train, test = small_data
    clf = train_classifier(train.full_descriptors(), train.labels)
    seen = []
    env = StreamingEnv(clf, 2.5, 4, probe=lambda c, lo: seen.append((c, lo)))
    tr = env.episode(test[0], RandomSelector(), np.random.default_rng(0))
    assert len(seen) == len(tr.steps)
    for (c, lo), s in zip(seen, tr.steps):
        assert s.t == c and 0 <= c - lo < 4


def test_mean_pool_extracts_each_frame_once():
    rng = np.random.default_rng(0)
    v = make_record("d", 0, np.zeros((6, 1)), dense=rng.random((6, 3)))
    clf = LinearClassifier(np.zeros((2, 4)), 1.0)
    env = StreamingEnv(clf, 0.5, 4, MEAN_POOL, n_channels=1)
    tr = env.episode(v, Scripted([], fallback=0), np.random.default_rng(0))
    extracted = [s.t for s in tr.steps if s.action == 0]
    assert len(extracted) == len(set(extracted))
    # frame 0 is folded in for free; ExtractFrame costs 1 unit and, at speed
    # 0.5, takes two frame periods
    assert extracted == [1, 3, 5]
    assert all(s.cost == 1 for s in tr.steps if s.action == 0)


def test_default_buffer():
    vids = [toy_video(np.zeros((T, 1))) for T in (10, 20, 50)]
    assert default_buffer(vids) == 10
    assert default_buffer([toy_video(np.zeros((1, 1)))]) == 1


def test_streaming_rejects_bad_parameters():
    with pytest.raises(ValueError):
        StreamingEnv(_stream_clf(1), 0, 3)
    with pytest.raises(ValueError):
        StreamingEnv(_stream_clf(1), 1, 0)
