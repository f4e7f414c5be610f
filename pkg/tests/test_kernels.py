import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eventgrad.kernels import (
    KernelKind, KernelSpec, is_jump_point, psp, psp_deriv, psp_deriv_flagged,
)

CAUSAL = KernelSpec.causal(20.0)
DOUBLE = KernelSpec.double(20.0, 5.0)
TAU_STAR = (20.0 * 5.0 / 15.0) * math.log(4.0)


def test_causal_values():
    assert psp(CAUSAL, 0.0) == 1.0
    assert psp(CAUSAL, -5.0) == 0.0
    assert psp(CAUSAL, 20.0) == pytest.approx(0.367879441, abs=1e-9)


def test_double_peak_is_one():
    assert DOUBLE.peak_time == pytest.approx(TAU_STAR, rel=1e-15)
    assert psp(DOUBLE, TAU_STAR) == pytest.approx(1.0, abs=1e-15)
    assert psp_deriv(DOUBLE, TAU_STAR) == pytest.approx(0.0, abs=1e-15)
    # normalization constant from the closed form
    raw = math.exp(-TAU_STAR / 20) - math.exp(-TAU_STAR / 5)
    assert DOUBLE.norm == pytest.approx(1 / raw, rel=1e-14)


def test_causal_derivative_values():
    assert psp_deriv(CAUSAL, 20.0) == pytest.approx(-math.exp(-1) / 20, rel=1e-12)
    assert psp_deriv(CAUSAL, -1.0) == 0.0
    assert psp_deriv(DOUBLE, -1.0) == 0.0


def test_causal_jump_point_is_flagged():
    value, jump = psp_deriv_flagged(CAUSAL, 0.0)
    assert jump and value == pytest.approx(-1 / 20)
    assert is_jump_point(CAUSAL, 0.0)
    assert not is_jump_point(DOUBLE, 0.0)
    assert psp_deriv_flagged(CAUSAL, 3.0)[1] is False


def test_double_continuous_at_zero():
    assert psp(DOUBLE, 0.0) == 0.0
    assert psp(DOUBLE, 1e-12) == pytest.approx(0.0, abs=1e-12)


def test_vectorized_matches_scalar():
    tau = np.array([-3.0, 0.0, 1.5, 40.0])
    for k in (CAUSAL, DOUBLE):
        np.testing.assert_array_equal(psp(k, tau), [psp(k, x) for x in tau])
        np.testing.assert_array_equal(psp_deriv(k, tau), [psp_deriv(k, x) for x in tau])


@pytest.mark.parametrize("kw", [
    dict(kind=KernelKind.CAUSAL_EXP, tau_m=0.0),
    dict(kind=KernelKind.DOUBLE_EXP, tau_m=20.0, tau_s=20.0),
    dict(kind=KernelKind.DOUBLE_EXP, tau_m=20.0, tau_s=25.0),
    dict(kind=KernelKind.DOUBLE_EXP, tau_m=20.0, tau_s=-1.0),
])
def test_invalid_specs_rejected(kw):
    with pytest.raises(ValueError):
        KernelSpec(**kw)


def test_spec_round_trip():
    for k in (CAUSAL, DOUBLE):
        assert KernelSpec.from_dict(k.to_dict()) == k


@given(tau=st.floats(-1e3, -1e-9))
def test_causality(tau):
    for k in (CAUSAL, DOUBLE):
        assert psp(k, tau) == 0.0 and psp_deriv(k, tau) == 0.0


@given(tau=st.floats(1e-3, 200.0), tm=st.floats(5.0, 50.0), ratio=st.floats(0.1, 0.8))
def test_derivative_consistency(tau, tm, ratio):
    h = 1e-6
    for k in (KernelSpec.causal(tm), KernelSpec.double(tm, tm * ratio)):
        fd = (psp(k, tau + h) - psp(k, tau - h)) / (2 * h)
        ana = psp_deriv(k, tau)
        # the 1e-8 relative floor is met except where the derivative is
        # near zero, where roundoff in the difference dominates
        assert abs(fd - ana) <= 1e-8 * abs(ana) + 1e-9


@given(a=st.floats(0.0, 300.0), b=st.floats(0.0, 300.0))
def test_causal_monotone(a, b):
    if a < b:
        assert psp(CAUSAL, a) > psp(CAUSAL, b) or psp(CAUSAL, b) == 0.0
