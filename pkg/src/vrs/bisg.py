"""Race-bucket estimation from surname and zip (BISG) feeding DP counters."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import RACE, BucketDistribution
from .metrics import delivery_ratio
from .privacy import DPParams, NoisyBucketCounter

logger = logging.getLogger(__name__)


def _check_rows(rows: np.ndarray, what: str) -> np.ndarray:
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != RACE.n_buckets:
        raise ValueError(f"{what} must have shape (n, {RACE.n_buckets})")
    if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1) > 1e-9):
        raise ValueError(f"{what} rows must be distributions")
    return rows


@dataclass(frozen=True)
class SurnameTable:
    rows: np.ndarray  # P(race | surname)

    def __post_init__(self):
        object.__setattr__(self, "rows", _check_rows(self.rows, "surname table"))


@dataclass(frozen=True)
class GeoTable:
    rows: np.ndarray  # P(race | zip)
    marginal: np.ndarray  # P(race)

    def __post_init__(self):
        object.__setattr__(self, "rows", _check_rows(self.rows, "geo table"))
        m = _check_rows(np.atleast_2d(self.marginal), "geo marginal")[0]
        if np.any(m <= 0):
            raise ValueError("race marginal entries must be positive")
        object.__setattr__(self, "marginal", m)


def posterior(surname_id: int, zip_id: int, surnames: SurnameTable, geo: GeoTable) -> BucketDistribution:
    """P(race | surname, zip) under conditional independence of surname and zip.

    Combines the surname prior with the geographic likelihood
    P(zip | race) proportional to P(race | zip) / P(race).
    """
    return BucketDistribution(RACE, tuple(_posterior_vec(surname_id, zip_id, surnames, geo)))


def _posterior_vec(surname_id, zip_id, surnames, geo) -> np.ndarray:
    unnorm = surnames.rows[surname_id] * geo.rows[zip_id] / geo.marginal
    z = unnorm.sum()
    if not z > 0:
        logger.warning("zero BISG normalizer for surname=%s zip=%s; using uniform", surname_id, zip_id)
        return np.full(RACE.n_buckets, 1.0 / RACE.n_buckets)
    out = unnorm / z
    return out / out.sum()


class BisgEstimator(TransformerMixin, BaseEstimator):
    """Maps (surname_id, zip_id) rows to race-bucket posteriors.

    The census tables are constructor parameters; ``fit`` only validates them
    so the estimator composes with sklearn pipelines.
    """

    def __init__(self, surname_probs=None, geo_probs=None, geo_marginal=None):
        self.surname_probs = surname_probs
        self.geo_probs = geo_probs
        self.geo_marginal = geo_marginal

    def fit(self, X=None, y=None):
        self.surnames_ = SurnameTable(np.asarray(self.surname_probs))
        self.geo_ = GeoTable(np.asarray(self.geo_probs), np.asarray(self.geo_marginal))
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "surnames_")
        X = check_array(X, dtype=np.int64)
        if X.shape[1] != 2:
            raise ValueError("expected columns (surname_id, zip_id)")
        s, g = X[:, 0], X[:, 1]
        unnorm = self.surnames_.rows[s] * self.geo_.rows[g] / self.geo_.marginal
        z = unnorm.sum(axis=1, keepdims=True)
        bad = ~(z[:, 0] > 0)
        if bad.any():
            logger.warning("zero BISG normalizer on %d rows; using uniform", int(bad.sum()))
            unnorm[bad] = 1.0
            z[bad] = RACE.n_buckets
        return unnorm / z


class BisgGroupState:
    """Per-ad staging batch of (surname, zip) pairs plus a DP race counter.

    When the staging batch reaches ``aggregation_level`` the whole batch is
    turned into posteriors, folded into the counter as soft counts with one
    noise draw, and cleared.
    """

    def __init__(self, ad_id: int, estimator: BisgEstimator, aggregation_level: int = 10,
                 params: DPParams | None = None, rng=None, sigma: float | None = None):
        self.ad_id = ad_id
        self.estimator = estimator
        self.aggregation_level = int(aggregation_level)
        self.counter = NoisyBucketCounter(RACE, params, rng=rng, sigma=sigma, auto_flush=False)
        self.staging: list[tuple[int, int]] = []

    def ingest_impression(self, surname_id: int, zip_id: int) -> bool:
        """Stage one impression. Returns True when a batch was aggregated."""
        self.staging.append((surname_id, zip_id))
        if len(self.staging) >= self.aggregation_level:
            self.aggregate()
            return True
        return False

    def aggregate(self) -> None:
        if self.staging:
            post = self.estimator.transform(np.array(self.staging))
            self.counter.add_event(post.sum(axis=0))
        self.counter.flush_batch()
        self.staging.clear()

    def race_ratios(self) -> BucketDistribution:
        return delivery_ratio(self.counter.read_counts(), RACE)


@dataclass
class ToyTables:
    """Generative toy census: race marginal, P(surname|race), P(zip|race)."""

    race_marginal: np.ndarray
    surname_given_race: np.ndarray  # (n_surnames, n_race), columns sum to 1
    zip_given_race: np.ndarray  # (n_zips, n_race), columns sum to 1
    surnames: SurnameTable = field(init=False)
    geo: GeoTable = field(init=False)

    def __post_init__(self):
        self.surnames = SurnameTable(_bayes_invert(self.surname_given_race, self.race_marginal))
        self.geo = GeoTable(_bayes_invert(self.zip_given_race, self.race_marginal), self.race_marginal)

    def estimator(self) -> BisgEstimator:
        return BisgEstimator(self.surnames.rows, self.geo.rows, self.geo.marginal).fit()


def _bayes_invert(x_given_r: np.ndarray, marginal: np.ndarray) -> np.ndarray:
    joint = x_given_r * marginal
    return joint / joint.sum(axis=1, keepdims=True)


def make_toy_tables(rng, n_surnames: int = 20, n_zips: int = 12,
                    surname_informativeness: float = 2.0, zip_informativeness: float = 1.5,
                    race_marginal=(0.13, 0.18, 0.60, 0.09)) -> ToyTables:
    """Random toy tables; informativeness 0 gives uninformative tables and
    larger values approach deterministic estimation."""
    rng = np.random.default_rng(rng)
    marginal = np.asarray(race_marginal, dtype=float)
    marginal = marginal / marginal.sum()

    s_logits = rng.normal(size=(n_surnames, RACE.n_buckets)) * surname_informativeness
    g_logits = rng.normal(size=(n_zips, RACE.n_buckets)) * zip_informativeness
    s_given_r = np.exp(s_logits - s_logits.max(axis=0))
    s_given_r /= s_given_r.sum(axis=0)
    g_given_r = np.exp(g_logits - g_logits.max(axis=0))
    g_given_r /= g_given_r.sum(axis=0)
    return ToyTables(marginal, s_given_r, g_given_r)


def load_surname_csv(path) -> SurnameTable:
    """CSV columns: surname_id, then one probability column per race bucket."""
    rows = _read_prob_csv(path)
    return SurnameTable(np.array([r for _, r in sorted(rows.items())]))


def load_geo_csv(path) -> GeoTable:
    """CSV columns: zip_id, then one column per race bucket; a row whose id is
    ``marginal`` carries P(race)."""
    rows = _read_prob_csv(path)
    marginal = rows.pop("marginal", None)
    if marginal is None:
        raise ValueError(f"{path}: missing 'marginal' row")
    return GeoTable(np.array([r for _, r in sorted(rows.items())]), marginal)


def _read_prob_csv(path) -> dict:
    out: dict = {}
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != 1 + RACE.n_buckets:
            raise ValueError(f"{path}: expected id column plus {RACE.n_buckets} bucket columns")
        for row in reader:
            if not row:
                continue
            key = row[0].strip()
            out[key if key == "marginal" else int(key)] = [float(x) for x in row[1:]]
    return out


def write_tables_csv(surnames: SurnameTable, geo: GeoTable, surname_path, geo_path) -> None:
    cols = [b for b in RACE.buckets]
    with open(surname_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["surname_id", *cols])
        for i, r in enumerate(surnames.rows):
            w.writerow([i, *(f"{x:.17g}" for x in r)])
    with open(geo_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["zip_id", *cols])
        for i, r in enumerate(geo.rows):
            w.writerow([i, *(f"{x:.17g}" for x in r)])
        w.writerow(["marginal", *(f"{x:.17g}" for x in geo.marginal)])
