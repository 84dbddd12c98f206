"""Rule-based meta-controller combining per-PC controller actions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .controller import Action

SCHEMES = ("equal", "shuffle_weighted", "max_weighted")
_ALIASES = {"shuffle": "shuffle_weighted", "max": "max_weighted"}


@dataclass(frozen=True)
class VoteInput:
    pc: str
    action: Action
    variance: tuple[float, ...]


def _check(inputs: Sequence[VoteInput]) -> None:
    if not inputs:
        raise ValueError("meta-controller needs at least one controller vote")


def equal_vote(inputs: Sequence[VoteInput]) -> Action:
    """Majority of per-PC actions; a tie is resolved conservatively."""
    _check(inputs)
    up = sum(1 for x in inputs if x.action is Action.ADJUST_UP)
    return Action.ADJUST_UP if up > len(inputs) - up else Action.NO_ADJUSTMENT


def _weighted(inputs: Sequence[VoteInput], reduce) -> Action:
    _check(inputs)
    mags = np.array([reduce(np.abs(np.asarray(x.variance, float))) for x in inputs])
    total = mags.sum()
    if total <= 0:
        return Action.NO_ADJUSTMENT
    votes = np.array([1.0 if x.action is Action.ADJUST_UP else 0.0 for x in inputs])
    score = float(np.dot(mags / total, votes))
    # exact halves must fall to no-adjustment despite round-off
    return Action.ADJUST_UP if score > 0.5 + 1e-12 else Action.NO_ADJUSTMENT


def shuffle_weighted_vote(inputs: Sequence[VoteInput]) -> Action:
    """Weights proportional to each PC's summed absolute bucket variance."""
    return _weighted(inputs, np.sum)


def max_weighted_vote(inputs: Sequence[VoteInput]) -> Action:
    """Weights proportional to each PC's largest absolute bucket variance."""
    return _weighted(inputs, np.max)


def normalize_scheme(scheme: str) -> str:
    scheme = _ALIASES.get(scheme, scheme)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown voting scheme {scheme!r}; choose from {SCHEMES}")
    return scheme


def decide(inputs: Sequence[VoteInput], scheme: str = "equal") -> Action:
    scheme = normalize_scheme(scheme)
    if len(inputs) == 1:
        return inputs[0].action
    if scheme == "equal":
        return equal_vote(inputs)
    if scheme == "shuffle_weighted":
        return shuffle_weighted_vote(inputs)
    return max_weighted_vote(inputs)
