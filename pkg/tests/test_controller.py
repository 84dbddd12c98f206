import json

import numpy as np
import pytest

from synth import hidden_reward, make_episodes
from vrs.controller import (
    Action, ControllerState, EmptyBufferError, Episode, ReplayBuffer, RewardDecompositionRegressor,
    RewardDivergenceError, Step, act, adjust_up_difference, build_state, compute_terminal_reward,
    learned_reward, preprocess,
)
from vrs.core import GENDER, RACE
from vrs.nn import central_difference, relative_error
from vrs.pipeline import split_buffer


class Const:
    """Stand-in model returning a fixed value."""

    def __init__(self, value):
        self.value_ = value
        self.calls = 0

    def value(self, state):
        self.calls += 1
        return self.value_


# states and rewards --------------------------------------------------------------

def test_build_state_sign_blocks():
    e = np.zeros(8)
    assert build_state(e, (0.07, -0.07), GENDER).variance_signs == (-1,)
    assert build_state(e, (0.02, -0.01, 0.0, 0.03), RACE).variance_signs == (1, -1, 0, 1)
    assert build_state(e, (0.0, 0.0, 0.0, 0.0), RACE).variance_signs == (0, 0, 0, 0)
    with pytest.raises(ValueError):
        build_state(e, (np.nan, 0.0), GENDER)


def test_state_features_are_embedding_then_signs():
    s = build_state(np.arange(3.0), (0.1, -0.1), GENDER)
    assert s.features().tolist() == [0.0, 1.0, 2.0, -1.0]


def test_terminal_reward_examples():
    v0 = (0.1, -0.1)
    assert compute_terminal_reward((0, 0), (0, 3), v0) == 3
    assert compute_terminal_reward((5, 5), (6, 7), v0) == 1
    assert compute_terminal_reward((0, 0), (2, 4), (0.0, 0.0)) == 0


# preprocessing ---------------------------------------------------------------------

def _episode(actions, impressed, v0=(0.1, -0.1), delta=(0.0, 3.0)):
    steps = [Step(ControllerState((0.0,), (int(np.sign(v0[1])),)), a, i) for a, i in zip(actions, impressed)]
    return Episode(GENDER, steps, v0, delta, compute_terminal_reward((0, 0), delta, v0))


def test_preprocess_examples():
    up = Action.ADJUST_UP
    kept = _episode([up] * 3, [True] * 3)
    buf = preprocess([kept], 3)
    assert len(buf) == 2
    assert buf.episodes[0].terminal_reward == 3
    assert buf.episodes[1].terminal_reward == -3
    assert buf.episodes[1].steps[0].state.variance_signs == (1,)
    dropped = _episode([up, Action.NO_ADJUSTMENT, up], [True] * 3)
    assert len(preprocess([kept, dropped], 3)) == 2


def test_preprocess_drops_steps_without_impressions_then_checks_length():
    up, no = Action.ADJUST_UP, Action.NO_ADJUSTMENT
    # non-impressed steps vanish whatever their action
    ep = _episode([up, no, up, up, no], [True, False, True, True, False])
    buf = preprocess([ep], 3)
    assert [s.action for s in buf.episodes[0].steps] == [up] * 3
    assert buf.stats["dropped_length"] == 0
    with pytest.raises(EmptyBufferError, match="collect more"):
        preprocess([ep], 4)


def test_preprocess_invariants_on_random_logs():
    raw = make_episodes(400, k=6, seed=1, noadj_prob=0.08, drop_impression_prob=0.1)
    buf = preprocess(raw, 6)
    assert all(e.k == 6 for e in buf)
    assert all(s.action is Action.ADJUST_UP and s.impressed for e in buf for s in e.steps)
    for under, over in buf.sign_counts().values():
        assert under == over
    st = buf.stats
    assert st["kept"] * 2 == len(buf) == st["kept"] + st["mirrored"]
    assert st["raw"] == st["kept"] + st["dropped_no_adjustment"] + st["dropped_length"]


def test_preprocess_empty_is_error():
    with pytest.raises(EmptyBufferError):
        preprocess([], 3)


# adjust-up difference -------------------------------------------------------------------

@pytest.mark.parametrize("pred,R,k,d", [(2, 1, 3, 0.0), (3, 3, 3, 0.0), (0, -3, 3, 0.0), (5, 1.4, 10, -0.7)])
def test_adjust_up_difference(pred, R, k, d):
    assert adjust_up_difference(pred, R, k) == pytest.approx(d)


def test_adjust_up_difference_range_check():
    with pytest.raises(ValueError):
        adjust_up_difference(4, 0, 3)


# policy ---------------------------------------------------------------------------------

@pytest.mark.parametrize("f,expected", [(0.4, Action.ADJUST_UP), (-0.2, Action.NO_ADJUSTMENT),
                                        (0.0, Action.NO_ADJUSTMENT)])
def test_act(f, expected):
    assert act(Const(f), ControllerState((0.0,), (1,))) is expected


def test_no_adjustment_bypasses_the_net():
    m = Const(123.0)
    assert learned_reward(m, ControllerState((0.0,), (1,)), Action.NO_ADJUSTMENT) == 0.0
    assert m.calls == 0


# reward net -------------------------------------------------------------------------------

def _fitted(max_updates=1, **kw):
    buf = preprocess(make_episodes(20, k=4, seed=2), 4)
    return RewardDecompositionRegressor(max_updates=max_updates, random_state=0, **kw).fit(buf), buf


def test_reward_net_gradient_check():
    rng = np.random.default_rng(3)
    for trial in range(5):
        m, _ = _fitted(hidden=(5, 4))
        states = rng.normal(size=(3, 4, 9))
        rewards = rng.normal(size=3) * 2
        theta = m.net_.get_flat()
        _, gW, gb = m.episode_loss_and_grad(states, rewards)

        def loss(t):
            m.net_.set_flat(t)
            return m.episode_loss_and_grad(states, rewards)[0]

        num = central_difference(loss, theta)
        m.net_.set_flat(theta)
        assert relative_error(m.net_.flatten_grads(gW, gb), num) < 1e-4


def test_shared_weights_batched_equals_stepwise():
    m, buf = _fitted()
    states, _ = buf.arrays()
    batched = m.return_estimate(states)
    stepwise = np.array([sum(m.value(s.state) for s in e.steps) for e in buf])
    assert np.max(np.abs(batched - stepwise)) < 1e-9


def test_one_point_regression():
    ep = Episode(GENDER, [Step(ControllerState((0.3, -0.2), (1,)), Action.ADJUST_UP, True)],
                 (0.1, -0.1), (0.0, 1.0), 1.0)
    buf = ReplayBuffer([ep], 1)
    m = RewardDecompositionRegressor(learning_rate=0.05, update_frequency=1, max_updates=400,
                                     tol=0, random_state=0).fit(buf)
    assert m.value(ep.steps[0].state) == pytest.approx(1.0, abs=1e-3)


def test_recovers_hidden_per_step_reward():
    buf = preprocess(make_episodes(800, seed=4), 10)
    train, val = split_buffer(buf, 0.25, 0)
    m = RewardDecompositionRegressor(learning_rate=0.003, max_updates=3000, random_state=0)
    m.fit(train, validation=val)
    states = [s.state for e in val for s in e.steps]
    pred = np.sign(m.predict(np.array([s.features() for s in states])))
    truth = np.array([hidden_reward(s) for s in states])
    assert np.mean(pred == truth) >= 0.95
    assert m.curve_[-1][1] < m.curve_[0][1]
    third = max(1, len(m.curve_) // 3)
    assert np.mean([c[2] for c in m.curve_[-third:]]) < np.mean([c[2] for c in m.curve_[:third]])


def test_mirrored_pair_gets_opposite_values():
    buf = preprocess(make_episodes(800, seed=5), 10)
    m = RewardDecompositionRegressor(learning_rate=0.003, max_updates=2000, random_state=0).fit(buf)
    e = np.random.default_rng(6).normal(size=8)
    e[0] = abs(e[0]) + 0.5
    up = m.value(ControllerState(tuple(e), (1,)))
    down = m.value(ControllerState(tuple(e), (-1,)))
    assert up < 0 < down


def test_divergence_is_reported():
    buf = preprocess(make_episodes(40, k=10, seed=7), 10)
    with pytest.raises(RewardDivergenceError, match="too large"):
        RewardDecompositionRegressor(learning_rate=5.0, max_updates=200, divergence_limit=1e6).fit(buf)


def test_checkpoint_roundtrip(tmp_path):
    m, buf = _fitted(max_updates=30)
    path = tmp_path / "ck.json"
    m.save(path, config={"seed": 1})
    back = RewardDecompositionRegressor.load(path)
    X = buf.arrays()[0].reshape(-1, 9)
    assert np.array_equal(back.predict(X), m.predict(X))
    assert json.loads(path.read_text())["config"] == {"seed": 1}
    assert back.get_params() == m.get_params()


def test_fit_is_deterministic():
    a, buf = _fitted(max_updates=50)
    b, _ = _fitted(max_updates=50)
    assert np.array_equal(a.net_.get_flat(), b.net_.get_flat())
