"""Bid adjustment: total-bid arithmetic, to-top/to-bottom multipliers and the
percentile calibration of the fixed adjust-up / adjust-down multipliers."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .controller import Action

MIN_HISTORY = 20


class BidLogic(str, enum.Enum):
    ADJUST_UP_ONLY = "adjust_up_only"
    ADJUST_UP_AND_DOWN = "adjust_up_and_down"


@dataclass(frozen=True)
class AuctionCandidate:
    ad_id: int
    advertiser_bid: float
    quality_bid: float
    is_housing: bool = False

    def __post_init__(self):
        if not self.advertiser_bid > 0:
            raise ValueError("advertiser_bid must be positive")


def total_bid(c: AuctionCandidate, multiplier: float = 1.0) -> float:
    if multiplier < 0:
        raise ValueError("multiplier must be nonnegative")
    return c.advertiser_bid * multiplier + c.quality_bid


def multiplier_to_top(c: AuctionCandidate, max_total_bid: float) -> float:
    """Multiplier that lifts ``c`` to the auction's maximum total bid (never below 1)."""
    return max(1.0, (max_total_bid - c.quality_bid) / c.advertiser_bid)


def multiplier_to_bottom(c: AuctionCandidate, min_total_bid: float) -> float:
    """Multiplier that drops ``c`` to the auction's minimum total bid, within [0, 1]."""
    return min(1.0, max(0.0, (min_total_bid - c.quality_bid) / c.advertiser_bid))


@dataclass(frozen=True)
class MultiplierCalibration:
    up_multiplier: float
    down_multiplier: float
    history_window: int

    def __post_init__(self):
        if not (self.up_multiplier >= 1.0 >= self.down_multiplier >= 0.0):
            raise ValueError(f"invalid calibration {self}")

    def to_dict(self) -> dict:
        return asdict(self)


class InsufficientHistoryError(ValueError):
    pass


class MultiplierCalibrator(BaseEstimator):
    """Fits the fixed multipliers as percentiles of historically needed ones.

    ``fit(X)`` takes rows ``(advertiser_bid, quality_bid, auction_max, auction_min)``,
    one per housing candidate seen in a historical auction.
    """

    def __init__(self, up_percentile=40.0, down_percentile=15.0, min_history=MIN_HISTORY):
        self.up_percentile = up_percentile
        self.down_percentile = down_percentile
        self.min_history = min_history

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 4:
            raise ValueError("expected rows (advertiser_bid, quality_bid, auction_max, auction_min)")
        if len(X) < self.min_history:
            raise InsufficientHistoryError(
                f"calibration needs at least {self.min_history} historical housing candidates, got {len(X)}"
            )
        bid, q, hi, lo = X.T
        if np.any(bid <= 0):
            raise ValueError("advertiser bids must be positive")
        self.to_top_ = np.maximum(1.0, (hi - q) / bid)
        self.to_bottom_ = np.clip((lo - q) / bid, 0.0, 1.0)
        self.calibration_ = MultiplierCalibration(
            float(np.percentile(self.to_top_, self.up_percentile, method="linear")),
            float(np.percentile(self.to_bottom_, self.down_percentile, method="linear")),
            len(X),
        )
        return self

    @property
    def up_multiplier_(self) -> float:
        check_is_fitted(self, "calibration_")
        return self.calibration_.up_multiplier

    @property
    def down_multiplier_(self) -> float:
        check_is_fitted(self, "calibration_")
        return self.calibration_.down_multiplier


def calibrate(history: Iterable[tuple[AuctionCandidate, float, float]],
              min_history: int = MIN_HISTORY) -> MultiplierCalibration:
    """``history`` holds (candidate, auction max total bid, auction min total bid)."""
    rows = [(c.advertiser_bid, c.quality_bid, hi, lo) for c, hi, lo in history]
    return MultiplierCalibrator(min_history=min_history).fit(np.array(rows).reshape(-1, 4)).calibration_


def apply_action(action: Action, calibration: MultiplierCalibration,
                 logic: BidLogic | str = BidLogic.ADJUST_UP_ONLY) -> float:
    logic = BidLogic(logic)
    if action is Action.ADJUST_UP:
        return calibration.up_multiplier
    if logic is BidLogic.ADJUST_UP_AND_DOWN:
        return calibration.down_multiplier
    return 1.0


def percentile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation percentile (q in [0, 100])."""
    return float(np.percentile(np.asarray(values, dtype=float), q, method="linear"))
