"""Variance-reduction system for ad delivery: measurement, privacy-preserving
counting, learned bid controllers and a seeded auction simulator."""

from .controller import Action, Episode, ReplayBuffer, RewardDecompositionRegressor, preprocess
from .core import GENDER, RACE, BucketDistribution, PCAttribute, World
from .metrics import shuffle_distance
from .privacy import DPParams, NoisyBucketCounter
from .simulator import SimulationConfig, generate_world, run_experiment

__version__ = "0.1.0"

__all__ = [
    "Action", "BucketDistribution", "DPParams", "Episode", "GENDER", "NoisyBucketCounter",
    "PCAttribute", "RACE", "ReplayBuffer", "RewardDecompositionRegressor", "SimulationConfig",
    "World", "generate_world", "preprocess", "run_experiment", "shuffle_distance",
]
