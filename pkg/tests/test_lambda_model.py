import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lambdatune.lambda_model import (
    FRAME_TYPES,
    Q_MAX,
    Q_MIN,
    LambdaSpec,
    default_lambda,
    legacy_lambda,
    scaled_lambda,
)


def test_reference_values_at_q12():
    assert default_lambda(12, "I") == 0.57
    assert default_lambda(12, "P") == 0.85
    assert default_lambda(12, "B") == pytest.approx(1.36, abs=1e-12)


def test_b_frame_at_q30():
    # factor clamps to 3 at q=30, doubling term is 2^6
    assert default_lambda(30, "B") == pytest.approx(130.56, abs=1e-12)


def test_b_frame_factor_clamps():
    # (q-12)/6 saturates at 2 below q=24 and at 4 above q=36
    assert default_lambda(18, "B") == pytest.approx(0.68 * 2 * 4.0, rel=1e-12)
    assert default_lambda(48, "B") == pytest.approx(0.68 * 4 * 2.0**12, rel=1e-12)


def test_doubles_every_three_qp_steps():
    for ft in FRAME_TYPES:
        assert default_lambda(21, ft) == pytest.approx(2 * default_lambda(18, ft), rel=1e-12)


def test_scaled_lambda_is_linear_in_k():
    base = scaled_lambda(LambdaSpec(q=26, frame_type="P", k=1.0))
    assert scaled_lambda(LambdaSpec(q=26, frame_type="P", k=2.5)) == pytest.approx(
        2.5 * base, rel=1e-12
    )


def test_legacy_quadratic():
    assert legacy_lambda(10) == pytest.approx(85.0, rel=1e-12)
    assert legacy_lambda(0) == 0.0


@pytest.mark.parametrize("q", [Q_MIN - 1, Q_MAX + 1])
def test_q_range_enforced(q):
    with pytest.raises(ValueError):
        default_lambda(q, "P")


def test_unknown_frame_type():
    with pytest.raises(ValueError):
        default_lambda(20, "X")


def test_nonpositive_k_rejected():
    with pytest.raises(ValueError):
        scaled_lambda(LambdaSpec(q=20, frame_type="P", k=0.0))


@given(
    q=st.integers(min_value=Q_MIN, max_value=Q_MAX - 1),
    ft=st.sampled_from(sorted(FRAME_TYPES)),
)
def test_monotone_in_q(q, ft):
    assert default_lambda(q + 1, ft) > default_lambda(q, ft)


@given(
    q=st.integers(min_value=Q_MIN, max_value=Q_MAX),
    ft=st.sampled_from(sorted(FRAME_TYPES)),
    k=st.floats(min_value=0.2, max_value=3.0),
)
def test_scale_factor_exact(q, ft, k):
    want = k * default_lambda(q, ft)
    got = scaled_lambda(LambdaSpec(q=q, frame_type=ft, k=k))
    assert math.isclose(got, want, rel_tol=1e-12)
