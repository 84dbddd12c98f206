"""Synthetic gender episodes with a known per-step reward.

Each step's user is female iff the first embedding coordinate is positive.
An impression to the underserved bucket is worth +1, to the overserved -1,
so the hidden per-step reward is -sign_female * (+1 female / -1 male).
"""

import numpy as np

from vrs.controller import Action, ControllerState, Episode, Step, compute_terminal_reward
from vrs.core import GENDER


def hidden_reward(state: ControllerState) -> int:
    female = 1 if state.embedding[0] > 0 else -1
    return -state.variance_signs[0] * female


def make_episode(rng, k, sigma, dim=8, noadj_prob=0.0, drop_impression_prob=0.0):
    s = int(rng.choice([-1, 1]))
    v0 = (-0.05 * s, 0.05 * s)
    steps = []
    delta = np.zeros(2)
    for _ in range(k):
        e = rng.normal(size=dim)
        action = Action.NO_ADJUSTMENT if rng.random() < noadj_prob else Action.ADJUST_UP
        impressed = rng.random() >= drop_impression_prob
        steps.append(Step(ControllerState(tuple(e), (s,)), action, impressed))
        if impressed:
            delta[1 if e[0] > 0 else 0] += 1
    delta = delta + rng.normal(0, sigma, 2)
    reward = compute_terminal_reward(np.zeros(2), delta, v0)
    return Episode(GENDER, steps, v0, tuple(delta), reward)


def make_episodes(n, k=10, sigma=0.7, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return [make_episode(rng, k, sigma, **kw) for _ in range(n)]
