"""Single-objective controller trained by return decomposition.

Episodes are the controller steps for one ad between two consecutive DP
counter flushes; only the aggregated terminal reward is observed. A shared
MLP ``f(S)`` is regressed so that its sum over an episode's steps matches the
terminal reward, and the policy adjusts up exactly when ``f(S) > 0``.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import GENDER, GROUND_TRUTH_PC, PCAttribute, get_pc, sign_vector
from .nn import MLP

logger = logging.getLogger(__name__)


class Action(str, enum.Enum):
    ADJUST_UP = "adjust_up"
    NO_ADJUSTMENT = "no_adjustment"


def n_sign_features(pc: PCAttribute | str) -> int:
    pc = get_pc(pc)
    return 1 if pc is GENDER else pc.n_buckets


def sign_block(variance_vector: Sequence[float], pc: PCAttribute | str) -> tuple[int, ...]:
    """Gender: the sign of the female entry only. Race: one sign per bucket."""
    pc = get_pc(pc)
    v = np.asarray(variance_vector, dtype=float)
    if v.shape != (pc.n_buckets,):
        raise ValueError(f"{pc.name} needs {pc.n_buckets} variance entries, got {v.shape}")
    signs = sign_vector(v)
    if pc is GENDER:
        return (signs[pc.index("female")],)
    return signs


@dataclass(frozen=True)
class ControllerState:
    embedding: tuple[float, ...]
    variance_signs: tuple[int, ...]

    @property
    def provenance(self) -> tuple[str, ...]:
        return ("user-embedding",) * len(self.embedding) + ("delivery-variance-sign",) * len(self.variance_signs)

    def features(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.embedding, float), np.asarray(self.variance_signs, float)])

    def mirrored(self) -> "ControllerState":
        return ControllerState(self.embedding, tuple(-s for s in self.variance_signs))


def build_state(embedding, variance_vector, pc) -> ControllerState:
    state = ControllerState(tuple(float(x) for x in embedding), sign_block(variance_vector, pc))
    assert GROUND_TRUTH_PC not in state.provenance
    return state


def compute_terminal_reward(counts_before, counts_after, v0) -> float:
    """Impressions to underserved buckets (v0 < 0) count +1, to overserved -1."""
    before = np.asarray(counts_before, float)
    after = np.asarray(counts_after, float)
    return float(np.sum((after - before) * np.sign(np.asarray(v0, float)) * -1.0))


@dataclass(frozen=True)
class Step:
    state: ControllerState
    action: Action
    impressed: bool


@dataclass
class Episode:
    pc: PCAttribute
    steps: list[Step]
    v0: tuple[float, ...]
    count_delta: tuple[float, ...]
    terminal_reward: float
    ad_id: int = -1

    @property
    def k(self) -> int:
        return len(self.steps)

    def mirrored(self) -> "Episode":
        v0 = tuple(-x for x in self.v0)
        steps = [Step(s.state.mirrored(), s.action, s.impressed) for s in self.steps]
        reward = compute_terminal_reward(np.zeros(len(v0)), self.count_delta, v0)
        return Episode(self.pc, steps, v0, self.count_delta, reward, self.ad_id)

    def state_matrix(self) -> np.ndarray:
        return np.array([s.state.features() for s in self.steps])

    def to_dict(self) -> dict:
        return {
            "ad_id": self.ad_id,
            "pc": self.pc.name,
            "k": self.k,
            "v0": list(self.v0),
            "count_delta": list(self.count_delta),
            "reward": self.terminal_reward,
            "steps": [
                {
                    "embedding": list(s.state.embedding),
                    "signs": list(s.state.variance_signs),
                    "action": s.action.value,
                    "impressed": s.impressed,
                }
                for s in self.steps
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        steps = [
            Step(ControllerState(tuple(s["embedding"]), tuple(int(x) for x in s["signs"])),
                 Action(s["action"]), bool(s["impressed"]))
            for s in d["steps"]
        ]
        return cls(get_pc(d["pc"]), steps, tuple(d["v0"]), tuple(d["count_delta"]),
                   float(d["reward"]), int(d.get("ad_id", -1)))


class EmptyBufferError(ValueError):
    pass


@dataclass
class ReplayBuffer:
    episodes: list[Episode] = field(default_factory=list)
    k: int = 0
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    @property
    def pc(self) -> PCAttribute:
        return self.episodes[0].pc

    def sign_counts(self) -> dict[int, tuple[int, int]]:
        """Per bucket: (#episodes where it is underserved, #overserved)."""
        out = {}
        n = len(self.episodes[0].v0) if self.episodes else 0
        for i in range(n):
            under = sum(1 for e in self.episodes if e.v0[i] < 0)
            over = sum(1 for e in self.episodes if e.v0[i] > 0)
            out[i] = (under, over)
        return out

    def arrays(self):
        """(states (n, k, d), rewards (n,))."""
        return (np.stack([e.state_matrix() for e in self.episodes]),
                np.array([e.terminal_reward for e in self.episodes]))


def preprocess(raw_episodes: Iterable[Episode], k: int) -> ReplayBuffer:
    """Filter and mirror raw random-policy episodes.

    Steps that cannot have moved the counters (adjust-up without an
    impression, no-adjustment without an impression) are dropped. An episode
    that still holds a no-adjustment step, i.e. one of its impressions came
    from an unadjusted bid, is discarded, as is any episode whose length is
    not ``k``. Survivors are kept together with their mirror image.
    """
    stats = {"raw": 0, "dropped_no_adjustment": 0, "dropped_length": 0, "kept": 0, "mirrored": 0}
    out: list[Episode] = []
    for ep in raw_episodes:
        stats["raw"] += 1
        steps = [s for s in ep.steps if s.impressed]
        if any(s.action is Action.NO_ADJUSTMENT for s in steps):
            stats["dropped_no_adjustment"] += 1
            continue
        if len(steps) != k:
            stats["dropped_length"] += 1
            continue
        kept = Episode(ep.pc, steps, ep.v0, ep.count_delta, ep.terminal_reward, ep.ad_id)
        out.append(kept)
        out.append(kept.mirrored())
        stats["kept"] += 1
        stats["mirrored"] += 1
    if not out:
        raise EmptyBufferError(
            "no episode survived preprocessing; collect more random-policy data "
            "(more requests or a higher housing share)"
        )
    return ReplayBuffer(out, k, stats)


def adjust_up_difference(predicted_count: float, episode_reward: float, k: int) -> float:
    """Predicted adjust-ups minus the expected count x = (R + k) / 2."""
    if not 0 <= predicted_count <= k:
        raise ValueError("predicted_count must lie in [0, k]")
    return float(predicted_count - (episode_reward + k) / 2.0)


class RewardDivergenceError(RuntimeError):
    pass


class RewardDecompositionRegressor(RegressorMixin, BaseEstimator):
    """Learns the per-step value ``f(S)`` of an adjust-up action.

    ``fit`` consumes a :class:`ReplayBuffer`; ``predict`` maps state feature
    rows to ``f``. Each update samples ``update_frequency`` trajectories with
    replacement, sums the shared network's outputs per trajectory and takes
    one gradient step on the mean squared gap to the terminal rewards.
    """

    def __init__(self, hidden=(32, 16), learning_rate=0.01, update_frequency=32,
                 max_updates=3000, tol=1e-4, patience=10, eval_every=25,
                 random_state=0, divergence_limit=1e6):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.update_frequency = update_frequency
        self.max_updates = max_updates
        self.tol = tol
        self.patience = patience
        self.eval_every = eval_every
        self.random_state = random_state
        self.divergence_limit = divergence_limit

    def _init_net(self, n_features, rng):
        self.net_ = MLP([n_features, *self.hidden, 1], rng=rng)

    def episode_loss_and_grad(self, states: np.ndarray, rewards: np.ndarray):
        """Loss mean_tau (sum_S f(S) - R)^2 and flat gradient.

        ``states`` has shape (n_traj, k, d).
        """
        n, k, d = states.shape
        f, cache = self.net_.forward(states.reshape(n * k, d), True)
        g_hat = f.reshape(n, k).sum(axis=1)
        resid = g_hat - rewards
        loss = float(np.mean(resid ** 2))
        d_f = np.repeat(2.0 * resid / n, k)[:, None]
        gW, gb, _ = self.net_.backward(cache, d_f)
        return loss, gW, gb

    def return_estimate(self, states: np.ndarray) -> np.ndarray:
        """Batched estimate of each trajectory's return, sum of f over its steps."""
        n, k, d = states.shape
        return self.net_.forward(states.reshape(n * k, d)).reshape(n, k).sum(axis=1)

    def fit(self, X, y=None, validation: ReplayBuffer | None = None):
        buffer = X if isinstance(X, ReplayBuffer) else ReplayBuffer(list(X), k=0)
        if len(buffer) == 0:
            raise EmptyBufferError("empty replay buffer")
        states, rewards = buffer.arrays()
        self.pc_ = buffer.pc.name
        self.k_ = states.shape[1]
        rng = np.random.default_rng(self.random_state)
        self._init_net(states.shape[2], rng)
        self.n_features_in_ = states.shape[2]
        val = validation.arrays() if validation is not None and len(validation) else None

        self.curve_ = []
        best = np.inf
        stale = 0
        self.n_updates_ = 0
        self.converged_ = False
        for update in range(1, int(self.max_updates) + 1):
            idx = rng.integers(0, len(rewards), size=self.update_frequency)
            loss, gW, gb = self.episode_loss_and_grad(states[idx], rewards[idx])
            if not np.isfinite(loss) or loss > self.divergence_limit:
                raise RewardDivergenceError(
                    f"loss {loss:.3g} at update {update}: learning rate {self.learning_rate} is too large"
                )
            self.net_.step(gW, gb, self.learning_rate)
            self.n_updates_ = update
            if update % self.eval_every == 0 or update == 1:
                full = float(np.mean((self.return_estimate(states) - rewards) ** 2))
                mad = self._mean_abs_d(*val) if val is not None else float("nan")
                self.curve_.append((update, full, mad))
                if update > 1:
                    if (best - full) / max(best, 1e-12) < self.tol:
                        stale += 1
                    else:
                        stale = 0
                    if stale >= self.patience:
                        self.converged_ = True
                        break
                best = min(best, full)
        return self

    def _mean_abs_d(self, states, rewards) -> float:
        n, k, d = states.shape
        f = self.net_.forward(states.reshape(n * k, d)).reshape(n, k)
        predicted = (f > 0).sum(axis=1)
        x = (rewards + k) / 2.0
        return float(np.mean(np.abs(predicted - x)))

    def mean_abs_adjust_up_difference(self, buffer: ReplayBuffer) -> float:
        check_is_fitted(self, "net_")
        return self._mean_abs_d(*buffer.arrays())

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=float)
        return self.net_.forward(X)[:, 0]

    def value(self, state: ControllerState) -> float:
        return float(self.predict(state.features()[None, :])[0])

    def act(self, state: ControllerState) -> Action:
        return act(self, state)

    # checkpoints
    def to_dict(self, config: dict | None = None) -> dict:
        check_is_fitted(self, "net_")
        return {
            "kind": "reward_decomposition",
            "pc": self.pc_,
            "k": self.k_,
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "net": self.net_.to_dict(),
            "curve": [list(c) for c in self.curve_],
            "config": config or {},
        }

    def save(self, path, config: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(config), fh, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RewardDecompositionRegressor":
        params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d["params"].items()}
        m = cls(**params)
        m.net_ = MLP.from_dict(d["net"])
        m.pc_ = d["pc"]
        m.k_ = int(d["k"])
        m.curve_ = [tuple(c) for c in d.get("curve", [])]
        m.n_features_in_ = m.net_.n_in
        return m

    @classmethod
    def load(cls, path) -> "RewardDecompositionRegressor":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def learned_reward(model, state: ControllerState, action: Action) -> float:
    """No-adjustment is worth exactly 0 and never touches the network."""
    if action is Action.NO_ADJUSTMENT:
        return 0.0
    return model.value(state)


def act(model, state: ControllerState) -> Action:
    """Greedy policy; a tie at f(S) == 0 resolves to no-adjustment."""
    return Action.ADJUST_UP if learned_reward(model, state, Action.ADJUST_UP) > 0 else Action.NO_ADJUSTMENT


def predicted_adjust_up_count(model, episode: Episode) -> int:
    return int(np.sum(model.predict(episode.state_matrix()) > 0))
