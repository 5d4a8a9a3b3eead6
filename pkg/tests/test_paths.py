import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowguide import paths
from flowguide.errors import ConfigError, RangeError

SCHEDULES = [paths.cond_ot(), paths.variance_preserving()]


@pytest.mark.parametrize("sch", SCHEDULES, ids=lambda s: s.kind)
def test_boundaries(sch):
    assert abs(sch.alpha(0.0)) < 1e-12
    assert abs(sch.sigma(1.0)) < 1e-12
    assert abs(sch.alpha(1.0) - 1) < 1e-12
    assert abs(sch.sigma(0.0) - 1) < 1e-12


@pytest.mark.parametrize("sch", SCHEDULES, ids=lambda s: s.kind)
def test_monotone_and_gamma_increasing(sch):
    t = np.linspace(0.001, 0.999, 500)
    assert np.all(sch.alpha_dot(t) > 0)
    assert np.all(sch.sigma_dot(t) < 0)
    g = sch.gamma(np.linspace(1e-4, sch.t_end, 500))
    assert np.all(np.diff(g) > 0)


@pytest.mark.parametrize("sch", SCHEDULES, ids=lambda s: s.kind)
@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.01, 0.999))
def test_t_of_gamma_inverts(sch, t):
    assert abs(sch.t_of_gamma(sch.gamma(t)) - t) < 1e-10


@pytest.mark.parametrize("sch", SCHEDULES, ids=lambda s: s.kind)
@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.0, 0.999))
def test_gamma_dot_matches_b_over_sigma(sch, t):
    a, b = paths.coeffs(sch, t)
    assert sch.gamma_dot(t) == pytest.approx(b / sch.sigma(t), rel=1e-12)
    assert sch.gamma(t) >= 0


def test_cond_ot_coeffs():
    sch = paths.cond_ot()
    assert paths.coeffs(sch, 0.5) == pytest.approx((-2.0, 2.0), abs=1e-12)
    assert paths.coeffs(sch, 0.0) == pytest.approx((-1.0, 1.0), abs=1e-12)


def _fd_coeffs(alpha, sigma, t, h=1e-6):
    ad = (alpha(t + h) - alpha(t - h)) / (2 * h)
    sd = (sigma(t + h) - sigma(t - h)) / (2 * h)
    return sd / sigma(t), ad - alpha(t) * sd / sigma(t)


def test_vp_coeffs_against_finite_differences():
    # frozen from a finite-difference oracle on alpha = sin(pi t/2), sigma = cos(pi t/2)
    a_ref, b_ref = _fd_coeffs(lambda t: math.sin(math.pi * t / 2), lambda t: math.cos(math.pi * t / 2), 0.5)
    assert a_ref == pytest.approx(-1.5707963267948966, abs=1e-8)
    assert b_ref == pytest.approx(2.221441469079183, abs=1e-8)
    a, b = paths.coeffs(paths.variance_preserving(), 0.5)
    assert a == pytest.approx(-1.5707963267948966, abs=1e-9)
    assert b == pytest.approx(2.221441469079183, abs=1e-9)


def test_snr_examples():
    sch = paths.cond_ot()
    assert paths.snr(sch, 0.5).gamma == pytest.approx(1.0)
    assert paths.snr_inverse(sch, 1.0) == pytest.approx(0.5, abs=1e-12)
    p = paths.snr(sch, 0.9)
    assert p.gamma == pytest.approx(9.0)
    assert p.gamma_dot == pytest.approx(100.0)


def test_out_of_domain():
    sch = paths.cond_ot()
    with pytest.raises(RangeError):
        paths.coeffs(sch, 1.0)
    with pytest.raises(RangeError):
        paths.coeffs(sch, -0.1)
    with pytest.raises(RangeError):
        paths.snr_inverse(sch, 1e9)


def test_bad_schedule_name():
    with pytest.raises(ConfigError):
        paths.make_schedule("cosine")
