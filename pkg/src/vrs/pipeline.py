"""End-to-end steps shared by the CLI and the acceptance suite: embeddings,
random-policy collection, controller training and multi-seed evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .controller import Episode, ReplayBuffer, RewardDecompositionRegressor, preprocess
from .core import World
from .embedding import EmbeddingStore, TwoTowerClickModel, make_clickthrough, refresh_store
from .metrics import ncac_reduction
from .simulator import ARMS, ControllerBank, ExperimentResult, SimulationConfig, request_stream, run_experiment

logger = logging.getLogger(__name__)


def train_embeddings(world: World, config: SimulationConfig):
    """Fit the two-tower click model and precompute every user's embedding."""
    X, y = make_clickthrough(world, config.click_examples, np.random.SeedSequence([world.seed, 10]))
    model = TwoTowerClickModel(
        user_dim=world.user_features().shape[1],
        embedding_dim=config.embedding_dim,
        learning_rate=config.click_learning_rate,
        epochs=config.click_epochs,
        random_state=world.seed,
    ).fit(X, y)
    store = refresh_store(model, [u.user_id for u in world.users], world.user_features())
    return model, store


def embedding_matrix(world: World, store: EmbeddingStore) -> np.ndarray:
    return store.matrix([u.user_id for u in world.users])


# keeps collection traffic disjoint from evaluation seeds 0, 1, 2, ...
COLLECT_SEED_OFFSET = 1000


def collect(world: World, config: SimulationConfig, embeddings: np.ndarray, seed: int | None = None,
            n_requests: int | None = None) -> ExperimentResult:
    """Uniform-random-policy run that logs raw episodes for every tracked ad."""
    seed = config.seed if seed is None else seed
    return run_experiment(world, config, "random", "test2", embeddings=embeddings,
                          seed=seed + COLLECT_SEED_OFFSET,
                          n_requests=n_requests or config.collect_requests)


def buffers_by_pc(episodes: list[Episode], config: SimulationConfig) -> dict[str, ReplayBuffer]:
    out = {}
    for pc in config.pcs:
        raw = [e for e in episodes if e.pc.name == pc]
        out[pc] = preprocess(raw, config.episode_length[pc])
    return out


def split_buffer(buffer: ReplayBuffer, holdout: float = 0.2, seed: int = 0):
    """Hold out whole mirrored pairs so a pair never straddles the split."""
    n_pairs = len(buffer) // 2
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_pairs)
    n_val = int(round(n_pairs * holdout))
    val_pairs, train_pairs = set(order[:n_val].tolist()), order[n_val:]
    train = [buffer.episodes[2 * p + j] for p in sorted(train_pairs) for j in (0, 1)]
    val = [buffer.episodes[2 * p + j] for p in sorted(val_pairs) for j in (0, 1)]
    return ReplayBuffer(train, buffer.k, buffer.stats), ReplayBuffer(val, buffer.k, buffer.stats)


def train_controller(buffer: ReplayBuffer, config: SimulationConfig, seed: int = 0,
                     holdout: float = 0.2) -> RewardDecompositionRegressor:
    train, val = split_buffer(buffer, holdout, seed)
    model = RewardDecompositionRegressor(
        learning_rate=config.reward_learning_rate,
        update_frequency=config.reward_update_frequency,
        max_updates=config.reward_max_updates,
        random_state=seed,
    )
    return model.fit(train, validation=val if len(val) else None)


@dataclass
class EvaluationResult:
    seeds: list[int]
    arms: list[str]
    pcs: list[str]
    runs: dict  # (seed, arm) -> ExperimentResult

    def ncac(self, seed, arm, pc) -> list[float | None]:
        return self.runs[(seed, arm)].ncac_series(pc)

    def reduction_series(self, seed, arm, pc) -> list[float | None]:
        test = self.ncac(seed, arm, pc)
        ctrl = self.ncac(seed, "control", pc)
        return [ncac_reduction(t, c) for t, c in zip(test, ctrl)]

    def final_reduction(self, seed, arm, pc) -> float | None:
        return self.reduction_series(seed, arm, pc)[-1]

    def mean_reduction_series(self, arm, pc) -> list[float | None]:
        per_seed = [self.reduction_series(s, arm, pc) for s in self.seeds]
        out = []
        for vals in zip(*per_seed):
            vals = [v for v in vals if v is not None]
            out.append(float(np.mean(vals)) if vals else None)
        return out

    def mean_final_reduction(self, arm, pc) -> float | None:
        vals = [self.final_reduction(s, arm, pc) for s in self.seeds]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None


def evaluate(world: World, config: SimulationConfig, bank: ControllerBank | None,
             arms=ARMS, seeds=(0,)) -> EvaluationResult:
    arms = list(dict.fromkeys(["control", *arms]))
    runs = {}
    for seed in seeds:
        events = request_stream(world, config, seed)
        for arm in arms:
            runs[(seed, arm)] = run_experiment(
                world, config, "trained", arm, controllers=bank if arm != "control" else None,
                embeddings=bank.embeddings if bank is not None else None, seed=seed, events=events)
    return EvaluationResult(list(seeds), arms, list(config.pcs), runs)
