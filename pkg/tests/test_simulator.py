from __future__ import annotations

import numpy as np
import pytest

from mgprotect.inverters import GfmParams, InverterSpec, default_roster
from mgprotect.netmodel import (Bases, FaultShunt, LineData, LoadData, NetworkDescription,
                                TransformerData, default_microgrid)
from mgprotect.simulator import SimSettings, simulate


def one_gfm_network():
    desc = NetworkDescription(buses=(1, 2), lines=(LineData(1, 2, 1.4, 2.0),),
                              transformers=(TransformerData(1), TransformerData(2)),
                              loads=(LoadData(2, 0.35, 0.035),), relay_bus=1,
                              relay_line=(1, 2)).validate()
    params = GfmParams(pf_ki=0.0, qv_ki=0.0)
    return desc, (InverterSpec("g", 1, "gfm", params),), params


def test_single_gfm_matches_droop_fixed_point(short_settings):
    desc, roster, p = one_gfm_network()
    res = simulate(desc, roster, [None], [(0.0, 0.0)], [(0.35, 0.035)], short_settings)

    # E = V_cmd behind z_f + z_tr; the rest of the circuit is series line + load
    z_f = p.z_filter_pu
    z_tr = complex(0.002, 0.05)
    z_line = complex(1.4, 2.0) / Bases().z_base_mv
    z_load = 1 / complex(0.35, -0.035)
    z_tot = z_f + z_tr + z_line + z_load
    # Q at the inverter terminal is V_cmd^2 * q0; V_cmd = 1 - m_q kp Q
    q0 = (z_tr + z_line + z_load).imag / abs(z_tot) ** 2
    c = p.m_q * p.qv_kp * q0
    v_cmd = (-1 + np.sqrt(1 + 4 * c)) / (2 * c)
    v_relay = v_cmd * abs(z_line + z_load) / abs(z_tot)
    current = v_cmd / abs(z_tot)

    np.testing.assert_allclose(np.abs(res.v_relay[0, -1]), v_relay, rtol=1e-9)
    np.testing.assert_allclose(np.abs(res.i_relay[0, -1]), current, rtol=1e-9)
    assert res.s_relay[0, -1].real == pytest.approx(current**2 * (z_line + z_load).real, rel=1e-9)
    assert res.inverter_s[0, -1, 0].imag == pytest.approx(v_cmd**2 * q0, rel=1e-9)


def test_single_gfm_current_limit_in_bolted_fault(short_settings):
    desc, roster, p = one_gfm_network()
    fault = FaultShunt(2, frozenset("abc"), 1e-3)
    res = simulate(desc, roster, [fault], [(0.05, 0.1)], [(0.35, 0.035)], short_settings)
    inside = res.fault_active[0]
    assert np.abs(res.i_relay[0, inside]).max() == pytest.approx(p.i_max, abs=1e-9)
    assert res.gfm_limited[0, inside].all()
    assert res.max_inverter_current[0] <= p.i_max + 1e-9


@pytest.fixture(scope="module")
def default_runs(short_settings):
    faults = [None, FaultShunt(1, frozenset("a"), 1e-3), FaultShunt(3, frozenset("abc"), 0.1),
              FaultShunt(2, frozenset("bc"), 10.0)]
    windows = [(0.05, 0.1)] * 4
    loads = [(0.35, 0.035), (0.1, 0.01), (0.6, 0.06), (0.25, 0.04)]
    return faults, windows, loads, simulate(default_microgrid(), default_roster(), faults, windows,
                                            loads, short_settings)


def test_no_fault_steady_state(default_runs):
    _, _, _, res = default_runs
    names = res.inverter_names
    s = res.inverter_s[0, -1]
    gfl = [k for k, n in enumerate(names) if n in ("inv2", "inv4")]
    for k in gfl:
        # the current-loop integrator (ki = 0.0025) removes the last 1e-5 only slowly
        assert s[k].real == pytest.approx(0.3, abs=1e-4)
        assert s[k].imag == pytest.approx(0.05, abs=1e-4)
    gfm = [k for k, n in enumerate(names) if n in ("inv1", "inv3")]
    # equal droop slopes share the remaining demand equally
    assert s[gfm[0]].real == pytest.approx(s[gfm[1]].real, rel=1e-3)
    v = np.abs(res.v_relay[0])
    np.testing.assert_allclose(v, np.broadcast_to(v[:1], v.shape), rtol=1e-6)
    assert np.abs(res.pll_vq[0]).max() < 1e-5


def test_sanity_diagnostics(default_runs):
    _, _, _, res = default_runs
    assert res.max_residual.max() <= 1e-9
    assert res.max_inverter_current.max() <= 1.2 + 1e-9
    assert (res.failed_at < 0).all()
    # integrators at rest before inception: under 0.1 per second
    assert res.prefault_integrator_step.max() / SimSettings().dt < 0.1


def test_prefault_check_detects_a_cold_start():
    cold = SimSettings(sim_length=0.06, preroll=0.0, init_iterations=0)
    res = simulate(default_microgrid(), default_roster(), [None], [(0.0, 0.0)],
                   [(0.35, 0.035)], cold)
    assert res.prefault_integrator_step[0] / cold.dt > 0.1


def test_bolted_phase_a_fault_at_relay_bus(default_runs):
    _, _, _, res = default_runs
    v = np.abs(res.v_relay[1])
    inside = res.fault_active[1]
    assert v[inside, 0].max() < 0.01
    assert v[inside, 1:].min() > 0.8 and v[inside, 1:].max() < 1.2
    assert v[~inside & (res.t < 0.05), 0].min() > 0.99
    # the phase recovers after clearance
    assert v[res.t > 0.2, 0].min() > 0.95


def test_fault_window_is_half_open(default_runs):
    _, _, _, res = default_runs
    t_ms = np.rint(res.t * 1e3).astype(int)
    for row in res.fault_active[1:]:
        np.testing.assert_array_equal(t_ms[row], np.arange(50, 150))
    assert not res.fault_active[0].any()


def test_scenarios_do_not_interact_in_a_batch(default_runs, short_settings):
    faults, windows, loads, res = default_runs
    alone = simulate(default_microgrid(), default_roster(), faults[2:3], windows[2:3], loads[2:3],
                     short_settings)
    for name in ("v_relay", "i_relay", "s_relay", "inverter_s"):
        np.testing.assert_array_equal(getattr(alone, name)[0], getattr(res, name)[2])


def test_mismatched_inputs_raise(short_settings):
    with pytest.raises(ValueError):
        simulate(default_microgrid(), default_roster(), [None, None], [(0, 0)], [(0.3, 0.03)],
                 short_settings)
