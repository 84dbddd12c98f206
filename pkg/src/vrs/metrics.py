"""Impression-variance measurement: ratios, shuffle distance, coverage and NCAC.

Undefined quantities (no qualifying ads, a perfect control arm) are returned
as ``None`` rather than raised, so that per-day reporting can carry gaps.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import BucketDistribution, PCAttribute, World, get_pc

DEFAULT_VARIANCE_THRESHOLD = 0.10
DEFAULT_MIN_IMPRESSIONS = 300


def delivery_ratio(counts: Sequence[float], pc: PCAttribute | str) -> BucketDistribution:
    """Normalize per-bucket counts, clamping noisy negatives to zero first."""
    pc = get_pc(pc)
    arr = np.clip(np.asarray(counts, dtype=float), 0.0, None)
    if arr.shape != (pc.n_buckets,):
        raise ValueError(f"expected {pc.n_buckets} counts for {pc.name}, got {arr.shape}")
    total = arr.sum()
    if total <= 0:
        return BucketDistribution.empty_for(pc)
    vals = arr / total
    # Guard the simplex check against round-off in the last ulp.
    vals = vals / vals.sum()
    return BucketDistribution(pc, tuple(float(v) for v in vals))


def eligible_ratio(
    world: World,
    ad_index: int,
    pc: PCAttribute | str,
    memberships: np.ndarray | None = None,
) -> BucketDistribution:
    """Activity-weighted bucket distribution of an ad's targeted audience.

    ``memberships`` is an (n_users, n_buckets) matrix of per-user bucket mass.
    By default it is the one-hot ground truth; the simulator passes BISG
    posteriors for race so that the eligible side is measured the same way as
    the delivery side. When every audience member has zero activity the
    unweighted head count is used instead.
    """
    pc = get_pc(pc)
    audience = world.eligibility()[:, ad_index]
    if not audience.any():
        raise ValueError(f"ad {world.ads[ad_index].ad_id} has an empty audience")
    if memberships is None:
        memberships = ground_truth_memberships(world, pc)
    weights = np.array([u.activity_weight for u in world.users], dtype=float)[audience]
    m = memberships[audience]
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    return delivery_ratio(weights @ m, pc)


def ground_truth_memberships(world: World, pc: PCAttribute | str) -> np.ndarray:
    pc = get_pc(pc)
    attr = "true_gender" if pc.name == "gender" else "true_race"
    idx = np.array([getattr(u, attr) for u in world.users])
    out = np.zeros((world.n_users, pc.n_buckets))
    out[np.arange(world.n_users), idx] = 1.0
    return out


def shuffle_distance(p: BucketDistribution, q: BucketDistribution) -> float:
    """Half the L1 distance: the mass that must move to turn ``p`` into ``q``."""
    if len(p.values) != len(q.values):
        raise ValueError(
            f"bucket count mismatch: {len(p.values)} vs {len(q.values)}"
        )
    if p.empty or q.empty:
        raise ValueError("shuffle distance of an empty distribution is undefined")
    return float(np.abs(p.as_array() - q.as_array()).sum() / 2.0)


@dataclass(frozen=True)
class VarianceReport:
    ad_id: int
    pc: PCAttribute
    eligible: BucketDistribution
    delivery: BucketDistribution
    variance: float | None
    total_impressions: float
    is_housing: bool = True

    @classmethod
    def build(cls, ad_id, pc, eligible, delivery, total_impressions, is_housing=True):
        variance = None
        if not (eligible.empty or delivery.empty):
            variance = shuffle_distance(delivery, eligible)
        return cls(ad_id, get_pc(pc), eligible, delivery, variance,
                   float(total_impressions), is_housing)


def _qualifying(reports: Iterable[VarianceReport], min_impressions: float):
    return [
        r for r in reports
        if r.is_housing and r.variance is not None and r.total_impressions >= min_impressions
    ]


def coverage(
    reports: Iterable[VarianceReport],
    threshold: float = DEFAULT_VARIANCE_THRESHOLD,
    min_impressions: float = DEFAULT_MIN_IMPRESSIONS,
) -> float | None:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    qualifying = _qualifying(reports, min_impressions)
    if not qualifying:
        return None
    under = sum(1 for r in qualifying if r.variance < threshold)
    return under / len(qualifying)


def ncac(
    reports: Iterable[VarianceReport],
    threshold: float = DEFAULT_VARIANCE_THRESHOLD,
    min_impressions: float = DEFAULT_MIN_IMPRESSIONS,
) -> float | None:
    """Non-conforming ad coverage, ``1 - coverage``."""
    cov = coverage(reports, threshold, min_impressions)
    return None if cov is None else 1.0 - cov


def ncac_reduction(ncac_test: float | None, ncac_control: float | None) -> float | None:
    """Relative NCAC drop of a treatment arm versus control, in percent."""
    if ncac_test is None or ncac_control is None or ncac_control <= 0:
        return None
    return (1.0 - ncac_test / ncac_control) * 100.0


def reports_to_csv(reports: Sequence[VarianceReport]) -> str:
    """CSV rows: ad_id, pc, variance, total_impressions, eligible_*, delivery_*.

    Reports for different attributes get their own bucket columns, left blank
    where an attribute lacks them.
    """
    labels: list[str] = []
    for r in reports:
        for b in r.pc.buckets:
            if b not in labels:
                labels.append(b)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ad_id", "pc", "variance", "total_impressions"]
               + [f"eligible_{b}" for b in labels] + [f"delivery_{b}" for b in labels])
    for r in reports:
        elig = dict(zip(r.pc.buckets, r.eligible.values))
        deliv = dict(zip(r.pc.buckets, r.delivery.values))
        w.writerow(
            [r.ad_id, r.pc.name, "" if r.variance is None else f"{r.variance:.10g}",
             f"{r.total_impressions:.10g}"]
            + [f"{elig[b]:.10g}" if b in elig else "" for b in labels]
            + [f"{deliv[b]:.10g}" if b in deliv else "" for b in labels]
        )
    return buf.getvalue()
