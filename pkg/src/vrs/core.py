"""Domain vocabulary: protected-class attributes, users, ads, targeting, worlds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

# Provenance tag reserved for simulator ground truth. No controller or
# embedding feature may ever carry it.
GROUND_TRUTH_PC = "ground-truth-PC"


@dataclass(frozen=True)
class PCAttribute:
    name: str
    buckets: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.buckets)) != len(self.buckets):
            raise ValueError(f"duplicate bucket labels in {self.name!r}")

    @property
    def n_buckets(self) -> int:
        return len(self.buckets)

    def index(self, label: str) -> int:
        return self.buckets.index(label)


GENDER = PCAttribute("gender", ("male", "female"))
RACE = PCAttribute("race", ("Black", "Hispanic", "White", "Other"))
PC_ATTRIBUTES = {GENDER.name: GENDER, RACE.name: RACE}


def get_pc(name: str | PCAttribute) -> PCAttribute:
    """Resolve an attribute by name; unknown names are configuration bugs."""
    if isinstance(name, PCAttribute):
        name = name.name
    try:
        return PC_ATTRIBUTES[name]
    except KeyError:
        raise ValueError(
            f"unsupported protected-class attribute {name!r}; "
            f"expected one of {sorted(PC_ATTRIBUTES)}"
        ) from None


@dataclass(frozen=True)
class BucketDistribution:
    """Normalized fractions over the buckets of one attribute.

    An empty distribution (no mass observed yet) has ``empty=True`` and
    all-zero values.
    """

    pc: PCAttribute
    values: tuple[float, ...]
    empty: bool = False

    def __post_init__(self):
        if len(self.values) != self.pc.n_buckets:
            raise ValueError(
                f"{self.pc.name} has {self.pc.n_buckets} buckets, got {len(self.values)} values"
            )
        if not self.empty:
            arr = np.asarray(self.values)
            if np.any(arr < 0) or np.any(arr > 1) or abs(arr.sum() - 1.0) > 1e-9:
                raise ValueError(f"not a distribution: {self.values}")

    @classmethod
    def empty_for(cls, pc: PCAttribute) -> "BucketDistribution":
        return cls(pc, (0.0,) * pc.n_buckets, empty=True)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class TargetingSpec:
    allowed_zip_ids: frozenset[int]
    allowed_interest_band: tuple[float, float]
    interest_coordinate: int = 0

    def to_dict(self) -> dict:
        return {
            "allowed_zip_ids": sorted(self.allowed_zip_ids),
            "allowed_interest_band": list(self.allowed_interest_band),
            "interest_coordinate": self.interest_coordinate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TargetingSpec":
        return cls(
            frozenset(int(z) for z in d["allowed_zip_ids"]),
            tuple(float(b) for b in d["allowed_interest_band"]),
            int(d.get("interest_coordinate", 0)),
        )


@dataclass(frozen=True)
class UserRecord:
    user_id: int
    surname_id: int
    zip_id: int
    true_gender: int
    true_race: int
    latent_preference: tuple[float, ...]
    activity_weight: int
    # PC-free side features (benign noise) fed to the user tower.
    side_features: tuple[float, ...] = ()

    def __post_init__(self):
        if not 0 <= self.true_gender < GENDER.n_buckets:
            raise ValueError(f"invalid gender bucket {self.true_gender}")
        if not 0 <= self.true_race < RACE.n_buckets:
            raise ValueError(f"invalid race bucket {self.true_race}")
        if self.activity_weight < 0:
            raise ValueError("activity_weight must be >= 0")


@dataclass(frozen=True)
class AdRecord:
    ad_id: int
    is_housing: bool
    targeting: TargetingSpec
    advertiser_bid_base: float
    quality_affinity: tuple[float, ...]

    def __post_init__(self):
        if not self.advertiser_bid_base > 0:
            raise ValueError("advertiser_bid_base must be positive")


@dataclass(frozen=True)
class ImpressionEvent:
    ad_id: int
    user_id: int
    timestep: int
    action_taken: str
    clicked: bool = False


def matches_targeting(user: UserRecord, spec: TargetingSpec) -> bool:
    lo, hi = spec.allowed_interest_band
    x = user.latent_preference[spec.interest_coordinate]
    return user.zip_id in spec.allowed_zip_ids and lo <= x <= hi


def bucket_of(user: UserRecord, pc: PCAttribute | str) -> int:
    """Ground-truth bucket. Simulator counters and audits only."""
    pc = get_pc(pc)
    if pc is GENDER:
        return user.true_gender
    return user.true_race


@dataclass
class World:
    """A generated synthetic world. Immutable by convention once built."""

    users: list[UserRecord]
    ads: list[AdRecord]
    surname_probs: np.ndarray  # (n_surnames, n_race) P(race | surname)
    geo_probs: np.ndarray  # (n_zips, n_race) P(race | zip)
    geo_marginal: np.ndarray  # (n_race,) P(race)
    seed: int
    config: dict = field(default_factory=dict)

    # Dense views used by the simulator hot loop; built lazily.
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_ads(self) -> int:
        return len(self.ads)

    def user_matrix(self) -> np.ndarray:
        if "pref" not in self._cache:
            self._cache["pref"] = np.array([u.latent_preference for u in self.users], dtype=float)
        return self._cache["pref"]

    def user_features(self) -> np.ndarray:
        """User-tower input: latent preference plus side features. No PC columns."""
        if "ufeat" not in self._cache:
            side = np.array([u.side_features for u in self.users], dtype=float)
            self._cache["ufeat"] = np.hstack([self.user_matrix(), side.reshape(self.n_users, -1)])
        return self._cache["ufeat"]

    def ad_features(self) -> np.ndarray:
        if "afeat" not in self._cache:
            self._cache["afeat"] = np.array([a.quality_affinity for a in self.ads], dtype=float)
        return self._cache["afeat"]

    def eligibility(self) -> np.ndarray:
        """Boolean (n_users, n_ads) targeting matrix."""
        if "elig" not in self._cache:
            pref = self.user_matrix()
            zips = np.array([u.zip_id for u in self.users])
            cols = []
            for ad in self.ads:
                t = ad.targeting
                lo, hi = t.allowed_interest_band
                x = pref[:, t.interest_coordinate]
                in_zip = np.isin(zips, sorted(t.allowed_zip_ids))
                cols.append(in_zip & (x >= lo) & (x <= hi))
            self._cache["elig"] = np.column_stack(cols) if cols else np.zeros((self.n_users, 0), bool)
        return self._cache["elig"]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": 1,
            "seed": self.seed,
            "config": self.config,
            "tables": {
                "surname_probs": self.surname_probs.tolist(),
                "geo_probs": self.geo_probs.tolist(),
                "geo_marginal": self.geo_marginal.tolist(),
            },
            "users": [
                {
                    "user_id": u.user_id,
                    "surname_id": u.surname_id,
                    "zip_id": u.zip_id,
                    "true_gender": u.true_gender,
                    "true_race": u.true_race,
                    "latent_preference": list(u.latent_preference),
                    "activity_weight": u.activity_weight,
                    "side_features": list(u.side_features),
                }
                for u in self.users
            ],
            "ads": [
                {
                    "ad_id": a.ad_id,
                    "is_housing": a.is_housing,
                    "targeting": a.targeting.to_dict(),
                    "advertiser_bid_base": a.advertiser_bid_base,
                    "quality_affinity": list(a.quality_affinity),
                }
                for a in self.ads
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        users = [
            UserRecord(
                user_id=int(u["user_id"]),
                surname_id=int(u["surname_id"]),
                zip_id=int(u["zip_id"]),
                true_gender=int(u["true_gender"]),
                true_race=int(u["true_race"]),
                latent_preference=tuple(float(x) for x in u["latent_preference"]),
                activity_weight=int(u["activity_weight"]),
                side_features=tuple(float(x) for x in u.get("side_features", ())),
            )
            for u in d["users"]
        ]
        ads = [
            AdRecord(
                ad_id=int(a["ad_id"]),
                is_housing=bool(a["is_housing"]),
                targeting=TargetingSpec.from_dict(a["targeting"]),
                advertiser_bid_base=float(a["advertiser_bid_base"]),
                quality_affinity=tuple(float(x) for x in a["quality_affinity"]),
            )
            for a in d["ads"]
        ]
        t = d["tables"]
        return cls(
            users=users,
            ads=ads,
            surname_probs=np.asarray(t["surname_probs"], dtype=float),
            geo_probs=np.asarray(t["geo_probs"], dtype=float),
            geo_marginal=np.asarray(t["geo_marginal"], dtype=float),
            seed=int(d["seed"]),
            config=d.get("config", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "World":
        return cls.from_dict(json.loads(text))


def sign_vector(values: Sequence[float]) -> tuple[int, ...]:
    """Elementwise sign with sign(0) = 0; NaN is rejected."""
    arr = np.asarray(values, dtype=float)
    if np.any(np.isnan(arr)):
        raise ValueError("NaN in variance vector")
    return tuple(int(s) for s in np.sign(arr))
