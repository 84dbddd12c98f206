import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vrs.core import GENDER, RACE, AdRecord, BucketDistribution, TargetingSpec, UserRecord, World
from vrs.metrics import (
    VarianceReport, coverage, delivery_ratio, eligible_ratio, ncac, ncac_reduction, reports_to_csv,
    shuffle_distance,
)


def dist(pc, values):
    return BucketDistribution(pc, tuple(values))


def tiny_world(users):
    """users: list of (gender bucket, activity weight); one ad targeting everyone."""
    recs = [UserRecord(i, 0, 0, g, 0, (0.0,) * 8, w) for i, (g, w) in enumerate(users)]
    ad = AdRecord(0, True, TargetingSpec(frozenset({0}), (-1.0, 1.0), 7), 1.0, (0.0,) * 8)
    flat = np.full((1, 4), 0.25)
    return World(recs, [ad], flat, flat, np.full(4, 0.25), 0)


@st.composite
def simplex(draw, n):
    raw = draw(st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=n, max_size=n))
    if sum(raw) <= 0:
        raw = [1.0] + [0.0] * (n - 1)
    arr = np.array(raw) / sum(raw)
    return arr / arr.sum()


# delivery / eligible ratios ------------------------------------------------------

def test_delivery_ratio_examples():
    assert delivery_ratio([30, 70], GENDER).values == pytest.approx((0.3, 0.7))
    assert delivery_ratio([0, 0], GENDER).empty
    assert delivery_ratio([25, 25, 25, 25], RACE).values == pytest.approx((0.25,) * 4)


def test_delivery_ratio_clamps_noisy_negatives():
    assert delivery_ratio([-3.0, 6.0], GENDER).values == (0.0, 1.0)
    assert delivery_ratio([-3.0, -1.0], GENDER).empty


def test_eligible_ratio_examples():
    assert eligible_ratio(tiny_world([(0, 2), (1, 2)]), 0, GENDER).values == pytest.approx((0.5, 0.5))
    assert eligible_ratio(tiny_world([(0, 3), (1, 1)]), 0, GENDER).values == pytest.approx((0.75, 0.25))
    assert eligible_ratio(tiny_world([(0, 3), (0, 1)]), 0, GENDER).values == pytest.approx((1.0, 0.0))


def test_eligible_ratio_zero_activity_falls_back_to_head_count():
    w = tiny_world([(0, 0), (0, 0), (1, 0)])
    assert eligible_ratio(w, 0, GENDER).values == pytest.approx((2 / 3, 1 / 3))


# shuffle distance -----------------------------------------------------------------

def test_shuffle_distance_examples():
    assert shuffle_distance(dist(GENDER, (0.6, 0.4)), dist(GENDER, (0.5, 0.5))) == pytest.approx(0.10, abs=1e-15)
    p = dist(RACE, (0.25,) * 4)
    assert shuffle_distance(p, p) == 0.0
    assert shuffle_distance(p, dist(RACE, (0.4, 0.3, 0.2, 0.1))) == pytest.approx(0.20, abs=1e-15)


def test_shuffle_distance_errors():
    with pytest.raises(ValueError):
        shuffle_distance(dist(GENDER, (0.5, 0.5)), dist(RACE, (0.25,) * 4))
    with pytest.raises(ValueError):
        shuffle_distance(BucketDistribution.empty_for(GENDER), dist(GENDER, (0.5, 0.5)))


@settings(max_examples=200, deadline=None)
@given(simplex(4), simplex(4), simplex(4))
def test_shuffle_distance_is_a_metric(a, b, c):
    p, q, r = dist(RACE, a), dist(RACE, b), dist(RACE, c)
    d = shuffle_distance(p, q)
    assert 0.0 <= d <= 1.0 + 1e-12
    assert d == pytest.approx(shuffle_distance(q, p), abs=1e-15)
    assert shuffle_distance(p, p) == 0.0
    assert d <= shuffle_distance(p, r) + shuffle_distance(r, q) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_two_bucket_collapse(x, y):
    d = shuffle_distance(dist(GENDER, (x, 1 - x)), dist(GENDER, (y, 1 - y)))
    assert d == pytest.approx(abs(x - y), abs=1e-12)


def test_disjoint_support_distance_is_one():
    assert shuffle_distance(dist(RACE, (0.5, 0.5, 0, 0)), dist(RACE, (0, 0, 0.3, 0.7))) == 1.0


# coverage / ncac ----------------------------------------------------------------------

def reports(variances, imps=500.0, housing=True):
    e = dist(GENDER, (0.5, 0.5))
    out = []
    for i, v in enumerate(variances):
        d = dist(GENDER, (0.5 + v, 0.5 - v))
        out.append(VarianceReport.build(i, GENDER, e, d, imps, housing))
    return out


def test_report_variance_is_shuffle_distance():
    r = reports([0.2])[0]
    assert r.variance == pytest.approx(0.2)
    empty = VarianceReport.build(0, GENDER, dist(GENDER, (0.5, 0.5)), BucketDistribution.empty_for(GENDER), 0)
    assert empty.variance is None


def test_coverage_examples():
    assert coverage(reports([0.05] * 7 + [0.2] * 3)) == pytest.approx(0.7)
    assert coverage(reports([0.05, 0.2], imps=10)) is None
    assert coverage(reports([0.05, 0.15]), threshold=0.10) == 0.5


def test_floor_and_vertical_filter():
    rs = reports([0.05]) + reports([0.3], imps=299) + reports([0.3], housing=False)
    assert coverage(rs, 0.1, 300) == 1.0
    assert coverage(rs, 0.1, 299) == 0.5


def test_ncac_examples():
    assert ncac(reports([0.05] * 7 + [0.2] * 3)) == pytest.approx(0.3)
    assert ncac(reports([0.01, 0.02])) == 0.0
    assert ncac(reports([0.2], imps=1)) is None


def test_ncac_reduction_examples():
    assert ncac_reduction(0.1, 0.4) == pytest.approx(75.0)
    assert ncac_reduction(0.4, 0.4) == 0.0
    assert ncac_reduction(0.0, 0.4) == 100.0
    assert ncac_reduction(0.1, 0.0) is None
    assert ncac_reduction(None, 0.4) is None


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 0.5), min_size=1, max_size=30))
def test_ncac_plus_coverage_is_one(vs):
    rs = reports(vs)
    assert ncac(rs) + coverage(rs) == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0.01, 1), st.floats(0.01, 0.99))
def test_ncac_reduction_scale_invariant(t, c, s):
    assert ncac_reduction(t * s, c * s) == pytest.approx(ncac_reduction(t, c), abs=1e-9)


def test_reports_csv_columns():
    text = reports_to_csv(reports([0.1]))
    header = text.splitlines()[0].split(",")
    assert header == ["ad_id", "pc", "variance", "total_impressions",
                      "eligible_male", "eligible_female", "delivery_male", "delivery_female"]
