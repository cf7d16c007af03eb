from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgprotect.errors import ConfigurationError
from mgprotect.inverters import (GflParams, GflState, GfmParams, GfmState, InverterSpec, PllParams,
                                 gfl_step, gfl_steady_state, gfm_step, limit_current, pll_step,
                                 wrap_angle)
from mgprotect.netmodel import OMEGA_NOM, ThreePhasePhasor

DT = 1e-4


def run_pll(delta, n_steps, params=PllParams(), magnitude=1.0):
    v = ThreePhasePhasor.balanced(magnitude * np.exp(1j * delta))
    state = GflState()
    theta = []
    for _ in range(n_steps):
        state = pll_step(state, v, DT, params)
        theta.append(float(state.pll_theta))
    return np.unwrap(theta), state


def pll_small_signal(delta, t, params=PllParams()):
    """Angle of the continuous loop e'' + kp e' + ki e = 0, e = delta - theta."""
    sigma = params.kp / 2
    wd = np.sqrt(params.ki - sigma**2)
    c2 = (sigma - params.kp) * delta / wd
    err = np.exp(-sigma * t) * (delta * np.cos(wd * t) + c2 * np.sin(wd * t))
    return delta - err


def test_pll_follows_second_order_response():
    delta = 0.01
    t = np.arange(1, 801) * DT
    theta, _ = run_pll(delta, len(t))
    np.testing.assert_allclose(theta, pll_small_signal(delta, t), atol=0.02 * delta)


def test_pll_settles_within_100ms():
    delta = 0.5
    theta, state = run_pll(delta, 1500)
    t = np.arange(1, 1501) * DT
    outside = np.abs(theta - delta) > 0.02 * delta
    settle = t[np.flatnonzero(outside)[-1] + 1]
    assert settle < 0.1
    assert abs(float(state.pll_vq)) < 1e-5
    assert float(state.pll_omega) == pytest.approx(OMEGA_NOM, abs=1e-3)


def test_pll_tracks_frequency_offset():
    # a source 0.5 Hz fast: its phasor rotates in the nominal frame
    state = GflState()
    dw = 2 * np.pi * 0.5
    for k in range(3000):
        v = ThreePhasePhasor.balanced(np.exp(1j * dw * k * DT))
        state = pll_step(state, v, DT)
    assert float(state.pll_omega) == pytest.approx(OMEGA_NOM + dw, abs=1e-3)


def test_pll_holds_frequency_when_voltage_collapses():
    state = GflState(pll_omega=OMEGA_NOM + 3.0, pll_theta=1.0)
    state = pll_step(state, ThreePhasePhasor.balanced(0.01 + 0j), DT)
    assert float(state.pll_omega) == OMEGA_NOM + 3.0
    assert float(state.pll_theta) == pytest.approx(1.0 + 3.0 * DT)
    with pytest.raises(ConfigurationError):
        pll_step(state, ThreePhasePhasor.balanced(1 + 0j), 0.0)


@given(re=st.floats(-5, 5), im=st.floats(-5, 5), i_max=st.floats(0.1, 3.0))
def test_limit_current_properties(re, im, i_max):
    x = complex(re, im)
    y = complex(limit_current(x, i_max))
    assert abs(y) <= i_max * (1 + 1e-12)
    assert complex(limit_current(y, i_max)) == y
    if abs(x) > i_max * (1 + 1e-12):
        assert np.angle(y) == pytest.approx(np.angle(x), abs=1e-12)
    else:
        assert y == x


def test_limit_current_per_phase():
    ph = ThreePhasePhasor(2.0 + 0j, 0.5j, -1.3 + 0j)
    out = limit_current(ph, 1.2)
    np.testing.assert_allclose(out.magnitudes(), [1.2, 0.5, 1.2])
    with pytest.raises(ConfigurationError):
        limit_current(ph, 0.0)


def test_gfl_steady_state_is_stationary():
    p = GflParams()
    v = ThreePhasePhasor.balanced(1.01 * np.exp(0.2j))
    state = gfl_steady_state(p, v)
    expected = np.conj(complex(p.p_ref, p.q_ref) / (1.01 * np.exp(0.2j)))
    for _ in range(500):
        state, inj = gfl_step(state, p, v, DT)
    assert complex(inj.a) == pytest.approx(expected, abs=1e-9)


def test_gfl_current_loop_first_order_response():
    p = GflParams()
    v = ThreePhasePhasor.balanced(1.0 + 0j)
    start = gfl_steady_state(p, v)
    state = GflState(pll_theta=start.pll_theta, pll_omega=start.pll_omega)
    i_ref = complex(p.p_ref, -p.q_ref)
    z = p.z_filter_pu
    a = DT * OMEGA_NOM / z.imag
    expected = 0j
    for _ in range(20):
        state, inj = gfl_step(state, p, v, DT)
        expected = (expected + a * p.kp * i_ref) / (1 + a * (p.kp + z.real))
    # the oracle leaves out the slow integrator, worth at most ki * |i_ref| * t
    assert complex(state.i_dq) == pytest.approx(expected, abs=p.ki * abs(i_ref) * 20 * DT)
    assert abs(expected - p.kp / (p.kp + z.real) * i_ref) < 1e-6


def test_gfl_current_is_limited_in_a_voltage_sag():
    p = GflParams(p_ref=0.9, q_ref=0.2)
    v = ThreePhasePhasor.balanced(0.2 + 0j)
    state = gfl_steady_state(p, ThreePhasePhasor.balanced(1.0 + 0j))
    for _ in range(200):
        state, inj = gfl_step(state, p, v, DT)
        assert np.all(inj.magnitudes() <= p.i_max + 1e-12)
    # the reference is clamped to I_max; the proportional loop alone would
    # settle at kp / (kp + R) of it and the integrator closes part of the gap
    z = p.z_filter_pu
    assert p.kp / (p.kp + z.real) * p.i_max - 1e-9 <= inj.magnitudes()[0] <= p.i_max
    assert bool(state.limited)


def test_gfm_at_setpoint_is_nominal():
    p = GfmParams(p_ref=0.2, q_ref=0.1)
    st0 = GfmState(theta=0.3)
    st1, e = gfm_step(st0, p, 0.2, 0.1, DT)
    assert float(st1.omega) == pytest.approx(OMEGA_NOM)
    assert float(st1.theta) == pytest.approx(0.3)
    assert complex(e.a) == pytest.approx(np.exp(0.3j))


def test_gfm_droop_directions():
    p = GfmParams()
    st1, _ = gfm_step(GfmState(), p, 0.5, 0.0, DT)
    assert float(st1.omega) < OMEGA_NOM
    expected = OMEGA_NOM * (1 - p.m_p * (p.pf_kp * 0.5 + p.pf_ki * 0.5 * DT))
    assert float(st1.omega) == pytest.approx(expected)
    st2, _ = gfm_step(GfmState(), p, 0.0, 0.5, DT)
    assert float(st2.v_cmd) < 1.0


def test_gfm_integrators_freeze_while_limited():
    p = GfmParams()
    st0 = GfmState(pf_integrator=0.01, qv_integrator=-0.02)
    st1, _ = gfm_step(st0, p, 1.0, 1.0, DT, limited=True)
    assert float(st1.pf_integrator) == 0.01 and float(st1.qv_integrator) == -0.02
    st2, _ = gfm_step(GfmState(pf_integrator=0.5), p, -100.0, 0.0, 1.0)
    assert float(st2.pf_integrator) == p.integrator_limit


def test_batched_steps_match_scalar_steps():
    p = GflParams()
    mags = np.array([1.0, 0.6, 0.2])
    v_batch = ThreePhasePhasor.balanced(mags * np.exp(0.1j))
    s_batch = gfl_steady_state(p, ThreePhasePhasor.balanced(np.ones(3) + 0j))
    s_one = [gfl_steady_state(p, ThreePhasePhasor.balanced(1.0 + 0j)) for _ in mags]
    for _ in range(50):
        s_batch, inj = gfl_step(s_batch, p, v_batch, DT)
        s_one = [gfl_step(s, p, ThreePhasePhasor.balanced(m * np.exp(0.1j)), DT)[0]
                 for s, m in zip(s_one, mags)]
    for k, s in enumerate(s_one):
        assert complex(s_batch.i_dq[k]) == complex(s.i_dq)


def test_wrap_angle():
    assert float(wrap_angle(2 * np.pi)) == 0.0
    assert float(wrap_angle(-0.1)) == pytest.approx(2 * np.pi - 0.1)


def test_inverter_spec_validation():
    with pytest.raises(ConfigurationError):
        InverterSpec("x", 1, "gfm", GflParams())
    with pytest.raises(ConfigurationError):
        InverterSpec("x", 1, "pv", GflParams())
    with pytest.raises(ConfigurationError):
        GfmParams(m_p=0.0)
