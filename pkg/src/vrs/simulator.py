"""Offline auction environment and the variance-aware serving loop.

A run streams pre-generated user requests through candidate scoring, VRS bid
multipliers and a first-k-slots auction. Per-ad trackers count impressions
through DP counters (gender from ground truth, race through BISG), refresh
the signed delivery variance at every flush, close controller episodes and
produce per-day coverage / NCAC snapshots.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .bidding import BidLogic, MultiplierCalibration, MultiplierCalibrator, apply_action
from .bisg import BisgEstimator, BisgGroupState, make_toy_tables
from .controller import (
    Action,
    ControllerState,
    Episode,
    Step,
    compute_terminal_reward,
    n_sign_features,
    sign_block,
)
from .core import (
    GENDER,
    RACE,
    AdRecord,
    BucketDistribution,
    TargetingSpec,
    UserRecord,
    World,
    get_pc,
)
from .metrics import VarianceReport, coverage, delivery_ratio, ncac
from .privacy import DPParams, NoisyBucketCounter
from .voting import VoteInput, decide, normalize_scheme

logger = logging.getLogger(__name__)

ARMS = ("control", "test1", "test2")
ARM_LOGIC = {"test1": BidLogic.ADJUST_UP_ONLY, "test2": BidLogic.ADJUST_UP_AND_DOWN}

# RNG stream identifiers, combined with the run seed via SeedSequence.
_STREAM_REQUESTS = 1
_STREAM_CALIBRATION = 2
_STREAM_POLICY = 3
_STREAM_COUNTER = 4
_STREAM_ELIGIBLE = 5
_STREAM_WARMUP = 6


class ConfigError(ValueError):
    pass


@dataclass
class SimulationConfig:
    seed: int = 0
    # world
    n_users: int = 5000
    n_ads: int = 200
    housing_fraction: float = 0.25
    latent_dim: int = 8
    side_dim: int = 8
    bias: float = 2.0
    n_surnames: int = 20
    n_zips: int = 12
    surname_informativeness: float = 2.5
    zip_informativeness: float = 1.5
    mean_activity: float = 5.0
    bid_sigma: float = 0.1
    quality_scale: float = 0.08
    # request stream
    n_requests: int = 150000
    n_days: int = 14
    candidates_per_request: int = 8
    housing_guarantee_prob: float = 0.6
    slot_count: int = 1
    calibration_requests: int = 2000
    # unadjusted pre-experiment traffic; ads are live before treatment starts
    warmup_requests: int = 50000
    # measurement
    dp: dict = field(default_factory=lambda: DPParams().to_dict())
    eligible_dp: dict = field(default_factory=lambda: DPParams(batch_size=1).to_dict())
    bisg_aggregation_level: int = 10
    variance_threshold: float = 0.10
    min_impressions: float = 300
    pcs: tuple = ("gender", "race")
    # control
    bid_logic: str = "adjust_up_only"
    collection_logic: str = "adjust_up_and_down"
    voting_scheme: str = "equal"
    # learning
    click_examples: int = 20000
    click_epochs: int = 15
    click_learning_rate: float = 0.2
    embedding_dim: int = 8
    reward_learning_rate: float = 0.003
    reward_update_frequency: int = 32
    reward_max_updates: int = 4000
    collect_requests: int = 50000

    def __post_init__(self):
        self.pcs = tuple(self.pcs)
        self.validate()

    def validate(self) -> None:
        positive = ("n_users", "n_ads", "n_requests", "n_days", "candidates_per_request",
                    "slot_count", "latent_dim", "n_surnames", "n_zips", "bisg_aggregation_level",
                    "embedding_dim")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.housing_fraction < 1:
            raise ConfigError("housing_fraction must lie in [0, 1)")
        if not 0 < self.variance_threshold < 1:
            raise ConfigError("variance_threshold must lie in (0, 1)")
        if self.min_impressions < 0:
            raise ConfigError("min_impressions must be nonnegative")
        if self.latent_dim < 8:
            raise ConfigError("latent_dim must be at least 8 (bias and targeting coordinates)")
        if self.slot_count > self.candidates_per_request:
            raise ConfigError("slot_count cannot exceed candidates_per_request")
        for pc in self.pcs:
            get_pc(pc)
        BidLogic(self.bid_logic)
        BidLogic(self.collection_logic)
        normalize_scheme(self.voting_scheme)
        try:
            DPParams.from_dict(self.dp)
            DPParams.from_dict(self.eligible_dp)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def dp_params(self) -> DPParams:
        return DPParams.from_dict(self.dp)

    @property
    def eligible_dp_params(self) -> DPParams:
        return DPParams.from_dict(self.eligible_dp)

    @property
    def episode_length(self) -> dict[str, int]:
        return {"gender": self.dp_params.batch_size, "race": self.bisg_aggregation_level}

    @property
    def requests_per_day(self) -> int:
        return max(1, self.n_requests // self.n_days)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pcs"] = list(self.pcs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"schema_version"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**{k: v for k, v in d.items() if k in known})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


# ---------------------------------------------------------------------------
# world generation


def _bias_offsets(cfg: SimulationConfig):
    """Bucket-dependent latent means. Gender loads on coordinates 0-1, race on
    2-5; the last coordinate is the (unbiased) targeting interest axis."""
    d = cfg.latent_dim
    gender = np.zeros((2, d))
    gender[1, 0:2] = 0.5
    gender[0, 0:2] = -0.5
    race = np.zeros((4, d))
    race[:, 2:6] = 0.9 * (np.eye(4) - 0.25)
    return cfg.bias * gender, cfg.bias * race


def generate_world(config: SimulationConfig, seed: int | None = None) -> World:
    """Deterministic synthetic world for ``seed`` (defaults to ``config.seed``)."""
    cfg = config
    seed = cfg.seed if seed is None else int(seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    tables = make_toy_tables(rng, cfg.n_surnames, cfg.n_zips,
                             cfg.surname_informativeness, cfg.zip_informativeness)
    g_off, r_off = _bias_offsets(cfg)
    n, d = cfg.n_users, cfg.latent_dim

    race = rng.choice(4, size=n, p=tables.race_marginal)
    gender = rng.integers(0, 2, size=n)
    surname = np.array([rng.choice(cfg.n_surnames, p=tables.surname_given_race[:, r]) for r in race])
    zips = np.array([rng.choice(cfg.n_zips, p=tables.zip_given_race[:, r]) for r in race])
    pref = rng.normal(size=(n, d)) + g_off[gender] + r_off[race]
    side = rng.normal(size=(n, cfg.side_dim))
    activity = 1 + rng.poisson(max(cfg.mean_activity - 1, 0), size=n)
    users = [
        UserRecord(i, int(surname[i]), int(zips[i]), int(gender[i]), int(race[i]),
                   tuple(float(x) for x in pref[i]), int(activity[i]),
                   tuple(float(x) for x in side[i]))
        for i in range(n)
    ]

    n_housing = int(round(cfg.n_ads * cfg.housing_fraction))
    housing = np.zeros(cfg.n_ads, bool)
    housing[rng.choice(cfg.n_ads, size=n_housing, replace=False)] = True
    interest = d - 1
    ads = []
    for j in range(cfg.n_ads):
        n_allowed = int(rng.integers(max(1, cfg.n_zips // 2), cfg.n_zips + 1))
        allowed = frozenset(int(z) for z in rng.choice(cfg.n_zips, size=n_allowed, replace=False))
        band = (float(rng.uniform(-3.0, -1.0)), float(rng.uniform(1.0, 3.0)))
        ads.append(AdRecord(
            ad_id=j,
            is_housing=bool(housing[j]),
            targeting=TargetingSpec(allowed, band, interest),
            advertiser_bid_base=float(np.exp(rng.normal(0.0, cfg.bid_sigma))),
            quality_affinity=tuple(float(x) for x in rng.normal(size=d)),
        ))
    world = World(users, ads, tables.surnames.rows, tables.geo.rows, tables.geo.marginal,
                  seed, cfg.to_dict())
    empty = np.nonzero(~world.eligibility().any(axis=0))[0]
    if len(empty):
        raise ConfigError(f"infeasible world: ads {empty.tolist()} have empty audiences")
    return world


def quality_matrix(world: World, config: SimulationConfig) -> np.ndarray:
    """Fixed quality bid per (user, ad): scaled preference-affinity inner product."""
    return config.quality_scale * (world.user_matrix() @ world.ad_features().T)


# ---------------------------------------------------------------------------
# request stream


@dataclass(frozen=True)
class RequestEvent:
    user_id: int
    candidate_ad_ids: tuple[int, ...]
    slot_count: int

    def __post_init__(self):
        if not 0 < self.slot_count <= len(self.candidate_ad_ids):
            raise ValueError("slot_count must lie in [1, number of candidates]")


def generate_requests(world: World, config: SimulationConfig, n_requests: int,
                      rng) -> list[RequestEvent]:
    """Request stream, built before any controller runs so that actions can
    never influence which users arrive or which ads compete."""
    rng = np.random.default_rng(rng)
    elig = world.eligibility()
    is_housing = np.array([a.is_housing for a in world.ads])
    weights = np.array([u.activity_weight for u in world.users], float)
    users = rng.choice(world.n_users, size=n_requests, p=weights / weights.sum())
    per_user = {}
    events = []
    C = config.candidates_per_request
    for u in users:
        u = int(u)
        if u not in per_user:
            ads = np.nonzero(elig[u])[0]
            per_user[u] = (ads, ads[is_housing[ads]])
        ads, housing_ads = per_user[u]
        if len(ads) == 0:
            continue
        if len(ads) <= C:
            cands = ads.copy()
        else:
            cands = ads[np.argpartition(rng.random(len(ads)), C)[:C]]
        if (len(housing_ads) and not is_housing[cands].any()
                and rng.random() < config.housing_guarantee_prob):
            cands[int(rng.integers(len(cands)))] = housing_ads[int(rng.integers(len(housing_ads)))]
        cands = tuple(sorted(int(c) for c in cands))
        events.append(RequestEvent(u, cands, min(config.slot_count, len(cands))))
    return events


def run_auction(candidates: Sequence[tuple[int, float]], slot_count: int) -> list[int]:
    """Winners among (ad_id, adjusted total bid): descending bid, ties to the
    lower ad_id."""
    ranked = sorted(candidates, key=lambda c: (-c[1], c[0]))
    return [ad for ad, _ in ranked[:slot_count]]


# ---------------------------------------------------------------------------
# variance tracking


class AdVarianceTracker:
    """Delivery counters, eligible ratios, signed variance and the open
    episode for one housing ad, per protected-class attribute."""

    def __init__(self, ad_id: int, pcs: Sequence[str], dp: DPParams, bisg: BisgEstimator,
                 aggregation_level: int, seed: int, sigma: float | None = None):
        self.ad_id = ad_id
        self.pcs = tuple(pcs)
        self.gender_counter = None
        self.race_state = None
        if "gender" in self.pcs:
            self.gender_counter = NoisyBucketCounter(
                GENDER, dp, rng=_rng(seed, _STREAM_COUNTER, ad_id, 0), sigma=sigma)
        if "race" in self.pcs:
            self.race_state = BisgGroupState(
                ad_id, bisg, aggregation_level, dp, rng=_rng(seed, _STREAM_COUNTER, ad_id, 1), sigma=sigma)
        self.eligible: dict[str, BucketDistribution] = {
            pc: BucketDistribution.empty_for(get_pc(pc)) for pc in self.pcs}
        self.v: dict[str, np.ndarray] = {pc: np.zeros(get_pc(pc).n_buckets) for pc in self.pcs}
        self.signs: dict[str, tuple[int, ...]] = {
            pc: (0,) * n_sign_features(pc) for pc in self.pcs}
        self.exact_counts: dict[str, np.ndarray] = {pc: np.zeros(get_pc(pc).n_buckets) for pc in self.pcs}
        self.impressions = 0
        self.log_episodes = False
        self.episode_steps: dict[str, list[Step]] = {pc: [] for pc in self.pcs}
        self.episode_v0: dict[str, np.ndarray] = {pc: self.v[pc].copy() for pc in self.pcs}
        self.episode_before: dict[str, np.ndarray] = {pc: np.zeros(get_pc(pc).n_buckets) for pc in self.pcs}
        self.closed_episodes: list[Episode] = []

    @property
    def measured(self) -> bool:
        """True once every attribute has a variance measurement from a flush."""
        return all(self.episode_before[pc].any() for pc in self.pcs)

    def noisy_counts(self, pc: str) -> np.ndarray:
        if pc == "gender":
            return self.gender_counter.read_counts()
        return self.race_state.counter.read_counts()

    def delivery(self, pc: str) -> BucketDistribution:
        return delivery_ratio(self.noisy_counts(pc), pc)

    def set_eligible(self, pc: str, dist: BucketDistribution) -> None:
        self.eligible[pc] = dist

    def _refresh(self, pc: str) -> None:
        deliv = self.delivery(pc)
        elig = self.eligible[pc]
        if deliv.empty or elig.empty:
            v = np.zeros(get_pc(pc).n_buckets)
        else:
            v = deliv.as_array() - elig.as_array()
        self.v[pc] = v
        self.signs[pc] = sign_block(v, pc)

    def record_step(self, pc: str, state: ControllerState, action: Action, impressed: bool) -> None:
        if self.log_episodes:
            self.episode_steps[pc].append(Step(state, action, impressed))

    def update_variance(self, user: UserRecord) -> None:
        """Stage one impression; refresh variance and close episodes at flushes."""
        self.impressions += 1
        for pc in self.pcs:
            if pc == "gender":
                b = user.true_gender
                self.exact_counts[pc][b] += 1
                flushed = self.gender_counter.add_event(b)
            else:
                self.exact_counts[pc][user.true_race] += 1
                flushed = self.race_state.ingest_impression(user.surname_id, user.zip_id)
            if flushed:
                self._close_episode(pc)

    def _close_episode(self, pc: str) -> None:
        after = self.noisy_counts(pc)
        before = self.episode_before[pc]
        v0 = self.episode_v0[pc]
        if self.log_episodes:
            reward = compute_terminal_reward(before, after, v0)
            self.closed_episodes.append(Episode(
                get_pc(pc), self.episode_steps[pc], tuple(float(x) for x in v0),
                tuple(float(x) for x in after - before), reward, self.ad_id))
        self.episode_steps[pc] = []
        self._refresh(pc)
        self.episode_v0[pc] = self.v[pc].copy()
        self.episode_before[pc] = after

    def finish(self) -> None:
        """End-of-run flush so no staged data is silently dropped. The partial
        episode it closes is shorter than k and is filtered in preprocessing."""
        for pc in self.pcs:
            if pc == "gender":
                if self.gender_counter.staged_mass > 0:
                    self.gender_counter.flush_batch()
                    self._close_episode(pc)
            elif self.race_state.staging:
                self.race_state.aggregate()
                self._close_episode(pc)

    def report(self, pc: str) -> VarianceReport:
        counts = np.clip(self.noisy_counts(pc), 0.0, None)
        return VarianceReport.build(self.ad_id, pc, self.eligible[pc], self.delivery(pc),
                                    counts.sum(), True)


# ---------------------------------------------------------------------------
# controllers at serving time


class ControllerBank:
    """Trained per-PC reward models with a per-sign-pattern value cache over
    the embedding matrix (values depend on the user only through the
    embedding, and on the ad only through its sign block)."""

    def __init__(self, models: dict, embeddings: np.ndarray):
        self.models = dict(models)
        self.embeddings = np.asarray(embeddings, float)
        self._cache: dict = {}

    @property
    def pcs(self):
        return tuple(self.models)

    def values(self, pc: str, signs: tuple[int, ...]) -> np.ndarray:
        key = (pc, signs)
        vals = self._cache.get(key)
        if vals is None:
            n = len(self.embeddings)
            X = np.hstack([self.embeddings, np.tile(np.asarray(signs, float), (n, 1))])
            vals = self.models[pc].predict(X)
            self._cache[key] = vals
        return vals

    def action(self, pc: str, user_index: int, signs) -> Action:
        return Action.ADJUST_UP if self.values(pc, signs)[user_index] > 0 else Action.NO_ADJUSTMENT


# ---------------------------------------------------------------------------
# experiment


@dataclass
class DayMetrics:
    day: int
    arm: str
    pc: str
    ncac: float | None
    coverage: float | None
    mean_variance: float | None
    n_qualifying: int


@dataclass
class ExperimentResult:
    arm: str
    policy_mode: str
    seed: int
    daily: list[DayMetrics]
    final_reports: dict[str, list[VarianceReport]]
    episodes: list[Episode]
    calibration: MultiplierCalibration | None
    action_counts: dict[str, int]
    impressions: dict[int, int]
    exact_counts: dict[tuple[int, str], np.ndarray]
    non_housing_multipliers: set
    n_decisions: int

    def ncac_series(self, pc: str) -> list[float | None]:
        return [m.ncac for m in self.daily if m.pc == pc]


def calibrate_from_history(world: World, config: SimulationConfig, seed: int,
                           quality: np.ndarray | None = None) -> MultiplierCalibration:
    """Fit the up/down multipliers on unadjusted historical auctions."""
    if quality is None:
        quality = quality_matrix(world, config)
    events = generate_requests(world, config, config.calibration_requests, _rng(seed, _STREAM_CALIBRATION))
    return MultiplierCalibrator().fit(history_rows(world, quality, events)).calibration_


def history_rows(world: World, quality: np.ndarray, events: Sequence[RequestEvent]) -> np.ndarray:
    """(advertiser_bid, quality_bid, auction max, auction min) per housing candidate."""
    bids = np.array([a.advertiser_bid_base for a in world.ads])
    is_housing = np.array([a.is_housing for a in world.ads])
    rows = []
    for ev in events:
        c = np.asarray(ev.candidate_ad_ids)
        totals = bids[c] + quality[ev.user_id, c]
        hi, lo = totals.max(), totals.min()
        for j in c[is_housing[c]]:
            rows.append((bids[j], quality[ev.user_id, j], hi, lo))
    return np.array(rows).reshape(-1, 4)


class Simulation:
    """One experiment run: mutable trackers plus the fixed world and models."""

    def __init__(self, world: World, config: SimulationConfig, *, arm: str = "control",
                 policy_mode: str = "trained", controllers: ControllerBank | None = None,
                 embeddings: np.ndarray | None = None, seed: int | None = None,
                 calibration: MultiplierCalibration | None = None, log_episodes: bool | None = None,
                 sigma: float | None = None):
        if arm not in ARMS:
            raise ValueError(f"unknown arm {arm!r}; choose from {ARMS}")
        if policy_mode not in ("random", "trained"):
            raise ValueError(f"unknown policy mode {policy_mode!r}")
        self.world = world
        self.config = config
        self.arm = arm
        self.policy_mode = policy_mode
        self.seed = config.seed if seed is None else int(seed)
        self.pcs = tuple(config.pcs)
        self.scheme = normalize_scheme(config.voting_scheme)
        if arm == "control":
            self.logic = None
        elif policy_mode == "random":
            self.logic = BidLogic(config.collection_logic) if arm == "test2" else ARM_LOGIC[arm]
        else:
            self.logic = ARM_LOGIC[arm]
        if arm != "control" and policy_mode == "trained":
            if controllers is None:
                raise ValueError("trained mode needs controller checkpoints")
            if set(controllers.pcs) != set(self.pcs):
                raise ValueError(
                    f"checkpoint PCs {sorted(controllers.pcs)} do not match config PCs {sorted(self.pcs)}")
        self.controllers = controllers
        self.embeddings = embeddings if embeddings is not None else (
            controllers.embeddings if controllers is not None else None)
        if arm != "control" and self.embeddings is None:
            raise ValueError("missing user embeddings")
        if self.embeddings is not None and len(self.embeddings) != world.n_users:
            raise ValueError("embedding store does not cover every user")

        self.quality = quality_matrix(world, config)
        self.bids = np.array([a.advertiser_bid_base for a in world.ads])
        self.is_housing = np.array([a.is_housing for a in world.ads])
        if calibration is None and arm != "control" and self.is_housing.any():
            calibration = calibrate_from_history(world, config, self.seed, self.quality)
        self.calibration = calibration
        self.policy_rng = _rng(self.seed, _STREAM_POLICY)
        self.eligible_rng = _rng(self.seed, _STREAM_ELIGIBLE)

        bisg = BisgEstimator(world.surname_probs, world.geo_probs, world.geo_marginal).fit()
        self._bisg_post = bisg.transform(np.array([[u.surname_id, u.zip_id] for u in world.users]))
        dp = config.dp_params
        self.trackers: dict[int, AdVarianceTracker] = {}
        for a in world.ads:
            if a.is_housing:
                t = AdVarianceTracker(a.ad_id, self.pcs, dp, bisg, config.bisg_aggregation_level,
                                      self.seed, sigma=sigma)
                t.log_episodes = (policy_mode == "random") if log_episodes is None else log_episodes
                self.trackers[a.ad_id] = t
        self._eligible_mass = self._exact_eligible_mass()
        self._eligible_sigma = sigma
        self.action_counts = {a.value: 0 for a in Action}
        self.non_housing_multipliers: set = set()
        self.n_decisions = 0
        self.timestep = 0

    # eligible side ---------------------------------------------------------
    def _exact_eligible_mass(self) -> dict:
        elig = self.world.eligibility()
        w = np.array([u.activity_weight for u in self.world.users], float)
        gender = np.zeros((self.world.n_users, 2))
        gender[np.arange(self.world.n_users), [u.true_gender for u in self.world.users]] = 1.0
        member = {"gender": gender, "race": self._bisg_post}
        out = {}
        for ad_id in self.trackers:
            col = elig[:, ad_id] * w
            if col.sum() <= 0:
                col = elig[:, ad_id].astype(float)
            out[ad_id] = {pc: col @ member[pc] for pc in self.pcs}
        return out

    def refresh_eligible(self) -> None:
        """Re-measure every tracked ad's eligible ratio through a one-batch
        DP counter (once per simulated day)."""
        params = self.config.eligible_dp_params
        for ad_id, t in self.trackers.items():
            for pc in self.pcs:
                c = NoisyBucketCounter(pc, params, rng=self.eligible_rng, sigma=self._eligible_sigma,
                                       auto_flush=False)
                c.add_event(self._eligible_mass[ad_id][pc])
                c.flush_batch()
                # takes effect at the ad's next flush, keeping v fixed within an episode
                t.set_eligible(pc, delivery_ratio(c.read_counts(), pc))

    # serving loop ---------------------------------------------------------
    def _decide(self, user: int, tracker: AdVarianceTracker) -> Action:
        if self.policy_mode == "random":
            return Action.ADJUST_UP if self.policy_rng.random() < 0.5 else Action.NO_ADJUSTMENT
        bank = self.controllers
        if len(self.pcs) == 1:
            pc = self.pcs[0]
            return bank.action(pc, user, tracker.signs[pc])
        votes = [VoteInput(pc, bank.action(pc, user, tracker.signs[pc]), tuple(tracker.v[pc]))
                 for pc in self.pcs]
        return decide(votes, self.scheme)

    def run_request(self, event: RequestEvent) -> list[int]:
        """Score, adjust, auction and track one request. Returns winning ad ids."""
        u = event.user_id
        if self.embeddings is not None and not 0 <= u < len(self.embeddings):
            raise KeyError(f"no precomputed embedding for user {u}")
        adjusted = []
        decisions = []
        for ad in event.candidate_ad_ids:
            m = 1.0
            if self.is_housing[ad] and self.logic is not None:
                t = self.trackers[ad]
                if self.policy_mode == "trained" and not t.measured:
                    # no variance measurement yet: nothing to correct
                    adjusted.append((ad, self.bids[ad] + self.quality[u, ad]))
                    continue
                action = self._decide(u, t)
                m = apply_action(action, self.calibration, self.logic)
                self.action_counts[action.value] += 1
                self.n_decisions += 1
                decisions.append((t, action))
            elif not self.is_housing[ad]:
                self.non_housing_multipliers.add(m)
            adjusted.append((ad, self.bids[ad] * m + self.quality[u, ad]))
        winners = run_auction(adjusted, event.slot_count)
        won = set(winners)
        if decisions and any(t.log_episodes for t, _ in decisions):
            emb = tuple(float(x) for x in self.embeddings[u])
            for t, action in decisions:
                for pc in self.pcs:
                    t.record_step(pc, ControllerState(emb, t.signs[pc]), action, t.ad_id in won)
        user = self.world.users[u]
        for ad in winners:
            self.timestep += 1
            t = self.trackers.get(ad)
            if t is not None:
                t.update_variance(user)
        return winners

    def day_metrics(self, day: int) -> list[DayMetrics]:
        out = []
        cfg = self.config
        for pc in self.pcs:
            reports = [t.report(pc) for t in self.trackers.values()]
            q = [r for r in reports if r.variance is not None and r.total_impressions >= cfg.min_impressions]
            out.append(DayMetrics(
                day, self.arm, pc,
                ncac(reports, cfg.variance_threshold, cfg.min_impressions),
                coverage(reports, cfg.variance_threshold, cfg.min_impressions),
                float(np.mean([r.variance for r in q])) if q else None,
                len(q),
            ))
        return out

    def warm_up(self, events: Sequence[RequestEvent]) -> None:
        """Serve pre-experiment traffic without any adjustment or episode logging."""
        logic, self.logic = self.logic, None
        logging_on = {a: t.log_episodes for a, t in self.trackers.items()}
        for t in self.trackers.values():
            t.log_episodes = False
        self.refresh_eligible()
        for ev in events:
            self.run_request(ev)
        self.logic = logic
        for a, t in self.trackers.items():
            t.log_episodes = logging_on[a]

    def run(self, events: Sequence[RequestEvent],
            warmup_events: Sequence[RequestEvent] = ()) -> ExperimentResult:
        if warmup_events:
            self.warm_up(warmup_events)
        per_day = self.config.requests_per_day
        daily: list[DayMetrics] = []
        n_days = self.config.n_days
        for day in range(n_days):
            self.refresh_eligible()
            stop = len(events) if day == n_days - 1 else (day + 1) * per_day
            for ev in events[day * per_day: stop]:
                self.run_request(ev)
            daily.extend(self.day_metrics(day))
        for t in self.trackers.values():
            t.finish()
        episodes = [e for t in self.trackers.values() for e in t.closed_episodes]
        return ExperimentResult(
            arm=self.arm,
            policy_mode=self.policy_mode,
            seed=self.seed,
            daily=daily,
            final_reports={pc: [t.report(pc) for t in self.trackers.values()] for pc in self.pcs},
            episodes=episodes,
            calibration=self.calibration,
            action_counts=dict(self.action_counts),
            impressions={a: t.impressions for a, t in self.trackers.items()},
            exact_counts={(a, pc): t.exact_counts[pc].copy()
                          for a, t in self.trackers.items() for pc in self.pcs},
            non_housing_multipliers=set(self.non_housing_multipliers),
            n_decisions=self.n_decisions,
        )


def run_experiment(world: World, config: SimulationConfig, policy_mode: str = "trained",
                   arm: str = "control", *, controllers: ControllerBank | None = None,
                   embeddings: np.ndarray | None = None, seed: int | None = None,
                   n_requests: int | None = None, events: Sequence[RequestEvent] | None = None,
                   sigma: float | None = None) -> ExperimentResult:
    seed = config.seed if seed is None else int(seed)
    if events is None:
        events = generate_requests(world, config, n_requests or config.n_requests,
                                   _rng(seed, _STREAM_REQUESTS))
    warmup = warmup_stream(world, config, seed)
    sim = Simulation(world, config, arm=arm, policy_mode=policy_mode, controllers=controllers,
                     embeddings=embeddings, seed=seed, sigma=sigma)
    return sim.run(events, warmup)


def warmup_stream(world: World, config: SimulationConfig, seed: int) -> list[RequestEvent]:
    if config.warmup_requests <= 0:
        return []
    return generate_requests(world, config, config.warmup_requests, _rng(seed, _STREAM_WARMUP))


def request_stream(world: World, config: SimulationConfig, seed: int,
                   n_requests: int | None = None) -> list[RequestEvent]:
    return generate_requests(world, config, n_requests or config.n_requests, _rng(seed, _STREAM_REQUESTS))
