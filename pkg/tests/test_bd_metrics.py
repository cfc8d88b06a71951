import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lambdatune.bd_metrics import (
    CurveFit,
    DuplicateRate,
    FitFailure,
    NonMonotone,
    NoOverlap,
    RDCurve,
    RDPoint,
    TooFewPoints,
    bd_from_fits,
    bd_psnr,
    bd_rate,
    bd_rate_pct,
    read_curve_csv,
    validate_curve,
    write_curve_csv,
)

from conftest import make_curve, random_curve


def scale_rates(curve: RDCurve, factor: float) -> RDCurve:
    return make_curve([p.rate * factor for p in curve.points], [p.quality for p in curve.points])


def shift_quality(curve: RDCurve, delta: float) -> RDCurve:
    return make_curve([p.rate for p in curve.points], [p.quality + delta for p in curve.points])


def test_identity_is_exactly_zero(simple_curve):
    assert abs(bd_rate(simple_curve, simple_curve).bd_rate) < 1e-12


def test_rate_doubling_is_plus_100(simple_curve):
    res = bd_rate(simple_curve, scale_rates(simple_curve, 2.0))
    assert res.bd_rate == pytest.approx(100.0, abs=1e-6)


def test_rate_halving_is_minus_50(simple_curve):
    res = bd_rate(simple_curve, scale_rates(simple_curve, 0.5))
    assert res.bd_rate == pytest.approx(-50.0, abs=1e-6)


def test_quality_shift_gives_nonzero_bd_psnr(simple_curve):
    res = bd_rate(simple_curve, shift_quality(simple_curve, 1.5))
    assert res.bd_psnr == pytest.approx(1.5, abs=1e-6)
    assert res.bd_rate < 0  # same rates at better quality = a saving


def test_overlap_interval_reported(simple_curve):
    res = bd_rate(simple_curve, simple_curve)
    assert (res.overlap_low, res.overlap_high) == (32.0, 44.0)


def test_disjoint_quality_ranges_raise():
    a = make_curve([1000, 2000, 4000, 8000], [30, 32, 34, 36])
    b = make_curve([1000, 2000, 4000, 8000], [40, 42, 44, 46])
    with pytest.raises(NoOverlap):
        bd_rate(a, b)


def test_disjoint_rate_ranges_leave_bd_psnr_nan(simple_curve):
    # quality ranges still overlap, so bd_rate is defined
    res = bd_rate(simple_curve, scale_rates(simple_curve, 64.0))
    assert math.isnan(res.bd_psnr)
    assert res.bd_rate == pytest.approx(6300.0, rel=1e-6)
    with pytest.raises(NoOverlap):
        bd_psnr(simple_curve, scale_rates(simple_curve, 64.0))


def test_too_few_points():
    with pytest.raises(TooFewPoints):
        validate_curve([RDPoint(1000, 32), RDPoint(2000, 35), RDPoint(4000, 38)])


def test_duplicate_rate():
    pts = [RDPoint(1000, 32), RDPoint(1000, 33), RDPoint(4000, 38), RDPoint(8000, 41)]
    with pytest.raises(DuplicateRate):
        validate_curve(pts)


def test_non_monotone():
    pts = [RDPoint(1000, 32), RDPoint(2000, 31), RDPoint(4000, 38), RDPoint(8000, 41)]
    with pytest.raises(NonMonotone):
        validate_curve(pts)


def test_validate_sorts_by_rate():
    pts = [RDPoint(8000, 41), RDPoint(1000, 32), RDPoint(4000, 38), RDPoint(2000, 35)]
    curve = validate_curve(pts)
    assert [p.rate for p in curve.points] == [1000, 2000, 4000, 8000]


def test_nonfinite_point_rejected():
    with pytest.raises(ValueError):
        RDPoint(float("inf"), 32.0)
    with pytest.raises(ValueError):
        RDPoint(1000.0, float("nan"))


def test_fit_failure_on_coincident_quality():
    pts = tuple(RDPoint(r, 30.0) for r in (1000.0, 2000.0, 4000.0, 8000.0))
    curve = RDCurve(pts)  # bypasses validate_curve on purpose
    with pytest.raises(FitFailure):
        CurveFit(curve).rate_fit  # noqa: B018 - lazy property forces the fit


def test_curve_csv_round_trip(tmp_path, simple_curve):
    path = tmp_path / "curve.csv"
    write_curve_csv(simple_curve, path)
    back = read_curve_csv(path)
    assert back.points == simple_curve.points  # values survive bit-exact
    assert back.label == "curve"  # filename stem unless overridden


def test_curve_csv_header_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("rate,psnr\n1000,32\n")
    with pytest.raises(ValueError):
        read_curve_csv(path)


def test_bd_rate_pct_matches_full_result(simple_curve):
    test = scale_rates(simple_curve, 1.3)
    fast = bd_rate_pct(CurveFit(simple_curve), CurveFit(test))
    assert fast == bd_rate(simple_curve, test).bd_rate


# -- randomized properties ---------------------------------------------------

seeds = st.integers(min_value=0, max_value=2**32 - 1)


@settings(max_examples=150, deadline=None)
@given(seed=seeds)
def test_antisymmetry(seed):
    # swapping anchor and test inverts the rate ratio: (1+f)(1+r) = 1
    rng = np.random.default_rng(seed)
    a, b = random_curve(rng), random_curve(rng)
    lo = max(a.qualities.min(), b.qualities.min())
    hi = min(a.qualities.max(), b.qualities.max())
    if not lo < hi:
        return
    fwd = bd_rate(a, b).bd_rate
    rev = bd_rate(b, a).bd_rate
    assert (1 + fwd / 100) * (1 + rev / 100) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(seed=seeds, delta=st.floats(min_value=-5.0, max_value=5.0))
def test_offset_invariance(seed, delta):
    # shifting both curves' quality by the same amount cannot change bd_rate
    rng = np.random.default_rng(seed)
    a, b = random_curve(rng), random_curve(rng)
    lo = max(a.qualities.min(), b.qualities.min())
    hi = min(a.qualities.max(), b.qualities.max())
    if not lo < hi:
        return
    base = bd_rate(a, b).bd_rate
    moved = bd_rate(shift_quality(a, delta), shift_quality(b, delta)).bd_rate
    assert moved == pytest.approx(base, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(seed=seeds, factor=st.floats(min_value=0.1, max_value=10.0))
def test_common_rate_scale_invariance(seed, factor):
    rng = np.random.default_rng(seed)
    a, b = random_curve(rng), random_curve(rng)
    lo = max(a.qualities.min(), b.qualities.min())
    hi = min(a.qualities.max(), b.qualities.max())
    if not lo < hi:
        return
    base = bd_rate(a, b).bd_rate
    scaled = bd_rate(scale_rates(a, factor), scale_rates(b, factor)).bd_rate
    assert scaled == pytest.approx(base, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(seed=seeds, factor=st.floats(min_value=0.3, max_value=3.0))
def test_pure_rate_scaling_recovered(seed, factor):
    # test curve = anchor with rates scaled; bd_rate must report the factor
    rng = np.random.default_rng(seed)
    a = random_curve(rng)
    res = bd_rate(a, scale_rates(a, factor))
    assert res.bd_rate == pytest.approx((factor - 1) * 100, abs=1e-6)
