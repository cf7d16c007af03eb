"""Discrete-time controllers of the grid-following and grid-forming inverters.

All step functions are written with numpy broadcasting, so every state field
may be a scalar (one inverter, one scenario) or an array holding the same
inverter across a batch of scenarios.

Angles are measured in the frame rotating at nominal frequency, the frame the
network phasors live in.  A locked PLL at nominal frequency therefore keeps a
constant ``pll_theta``; it advances by ``(pll_omega - OMEGA_NOM) * dt``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError
from .netmodel import OMEGA_NOM, ThreePhasePhasor, positive_sequence

TWO_PI = 2.0 * np.pi
# below this positive-sequence magnitude (pu) the PLL holds its frequency
V_HOLD = 0.05
V_CMD_MAX = 1.5


def wrap_angle(theta):
    theta = np.mod(theta, TWO_PI)
    return np.where(theta >= TWO_PI, 0.0, theta)


def limit_current(requested, i_max: float):
    """Clamp each phase magnitude to ``i_max`` keeping its angle.

    Accepts a :class:`ThreePhasePhasor` or any complex array.  Values already
    within ``i_max`` (to 1e-12 relative) pass through untouched, which keeps
    the clamp exactly idempotent.
    """
    if not i_max > 0:
        raise ConfigurationError(f"I_max must be positive, got {i_max}")
    if isinstance(requested, ThreePhasePhasor):
        return ThreePhasePhasor.from_array(limit_current(requested.as_array(), i_max))
    x = np.asarray(requested, dtype=complex)
    mag = np.abs(x)
    over = mag > i_max * (1.0 + 1e-12)
    scale = np.where(over, i_max / np.where(over, mag, 1.0), 1.0)
    return x * scale


@dataclass(frozen=True)
class PllParams:
    kp: float = 150.0
    ki: float = 10000.0
    v_hold: float = V_HOLD


@dataclass(frozen=True)
class GflParams:
    kp: float = 2.0
    ki: float = 0.0025
    r_filter: float = 1.5e-3      # ohm
    l_filter: float = 20e-6       # H
    p_ref: float = 0.3
    q_ref: float = 0.05
    i_max: float = 1.2
    integrator_limit: float = 1.0
    v_base: float = 480.0
    s_base: float = 1.5e6

    def __post_init__(self):
        if not (self.kp > 0 and self.ki > 0 and self.i_max > 0):
            raise ConfigurationError("GFL gains and I_max must be positive")

    @property
    def z_filter_pu(self) -> complex:
        z_base = self.v_base**2 / self.s_base
        return complex(self.r_filter, OMEGA_NOM * self.l_filter) / z_base


@dataclass(frozen=True)
class GfmParams:
    pf_kp: float = 0.6
    pf_ki: float = 0.003
    qv_kp: float = 0.6
    qv_ki: float = 0.002
    m_p: float = 0.02
    m_q: float = 0.02
    v_nom: float = 1.0
    f_nom: float = 60.0
    p_ref: float = 0.0
    q_ref: float = 0.0
    i_max: float = 1.2
    integrator_limit: float = 0.5
    r_filter: float = 1.5e-3
    l_filter: float = 20e-6
    v_base: float = 480.0
    s_base: float = 1.5e6

    def __post_init__(self):
        if not (self.m_p > 0 and self.m_q > 0):
            raise ConfigurationError("droop slopes must be positive")
        if min(self.pf_kp, self.pf_ki, self.qv_kp, self.qv_ki) < 0 or not self.i_max > 0:
            raise ConfigurationError("GFM gains must be non-negative and I_max positive")

    @property
    def z_filter_pu(self) -> complex:
        z_base = self.v_base**2 / self.s_base
        return complex(self.r_filter, OMEGA_NOM * self.l_filter) / z_base


@dataclass(frozen=True)
class GflState:
    pll_theta: float = 0.0
    pll_omega: float = OMEGA_NOM
    pll_integrator: float = 0.0
    pll_vq: float = 0.0
    id_integrator: float = 0.0
    iq_integrator: float = 0.0
    i_dq: complex = 0j
    last_injection: ThreePhasePhasor = ThreePhasePhasor(0j, 0j, 0j)
    limited: bool = False


@dataclass(frozen=True)
class GfmState:
    theta: float = 0.0
    v_cmd: float = 1.0
    pf_integrator: float = 0.0
    qv_integrator: float = 0.0
    omega: float = OMEGA_NOM
    limited: bool = False


def pll_step(state: GflState, v_terminal: ThreePhasePhasor, dt: float,
             params: PllParams = PllParams()) -> GflState:
    """One forward-Euler step of the synchronous-reference-frame PLL.

    The q-axis component of the positive-sequence voltage, normalised by its
    magnitude, drives a PI whose output is the frequency estimate.  Under a
    collapsed voltage the frequency is held and the angle keeps advancing.
    """
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    vp = positive_sequence(v_terminal.as_array())
    mag = np.abs(vp)
    held = mag < params.v_hold
    vq = np.where(held, 0.0,
                  np.imag(vp * np.exp(-1j * state.pll_theta)) / np.maximum(mag, params.v_hold))
    integrator = state.pll_integrator + params.ki * vq * dt
    omega = np.where(held, state.pll_omega, OMEGA_NOM + params.kp * vq + integrator)
    theta = wrap_angle(state.pll_theta + (omega - OMEGA_NOM) * dt)
    return replace(state, pll_theta=theta, pll_omega=omega,
                   pll_integrator=integrator, pll_vq=vq)


def gfl_reference(p_ref, q_ref, v_dq, i_max):
    """Current reference ``conj(S / v)`` in the PLL frame, clamped to ``i_max``."""
    mag = np.abs(v_dq)
    floor = np.where(mag < V_HOLD, V_HOLD / np.where(mag > 0, mag, 1.0), 1.0)
    v = np.where(mag > 0, v_dq * floor, V_HOLD)
    raw = (p_ref - 1j * q_ref) / np.conj(v)
    return raw, limit_current(raw, i_max)


def gfl_step(state: GflState, params: GflParams, v_terminal: ThreePhasePhasor, dt: float,
             pll: PllParams = PllParams()) -> tuple[GflState, ThreePhasePhasor]:
    """Advance the grid-following inverter by ``dt`` and return its injection.

    The d/q PI loops act on the filter current in the PLL frame.  The
    feed-forward of the terminal voltage and the ``+/- omega L`` decoupling
    terms cancel the matching plant terms of the RL filter, leaving the
    first-order loop ``L di/dt = kp e + integ - R i``.  That loop is integrated
    implicitly: ``kp * omega * dt / X`` is about 1.5 at 100 us, where forward
    Euler rings.  The PI integrators themselves use forward Euler.
    """
    st = pll_step(state, v_terminal, dt, pll)
    rot = np.exp(1j * st.pll_theta)
    v_dq = positive_sequence(v_terminal.as_array()) / rot
    raw, i_ref = gfl_reference(params.p_ref, params.q_ref, v_dq, params.i_max)

    integ = state.id_integrator + 1j * state.iq_integrator
    integ = integ + params.ki * (i_ref - state.i_dq) * dt
    integ = limit_current(integ, params.integrator_limit)

    z = params.z_filter_pu
    a = dt * OMEGA_NOM / z.imag
    i_new = (state.i_dq + a * (params.kp * i_ref + integ)) / (1.0 + a * (params.kp + z.real))
    i_new = limit_current(i_new, params.i_max)
    injection = ThreePhasePhasor.balanced(i_new * rot)
    limited = np.abs(raw) > params.i_max
    st = replace(st, id_integrator=np.real(integ), iq_integrator=np.imag(integ),
                 i_dq=i_new, last_injection=injection, limited=limited)
    return st, injection


def gfl_steady_state(params: GflParams, v_terminal: ThreePhasePhasor) -> GflState:
    """Locked, converged controller state for a given terminal voltage."""
    vp = positive_sequence(v_terminal.as_array())
    theta = wrap_angle(np.angle(vp))
    v_dq = vp * np.exp(-1j * theta)
    _, i_ref = gfl_reference(params.p_ref, params.q_ref, v_dq, params.i_max)
    integ = params.z_filter_pu.real * i_ref
    return GflState(pll_theta=theta, pll_omega=OMEGA_NOM * np.ones_like(theta),
                    pll_integrator=np.zeros_like(theta), pll_vq=np.zeros_like(theta),
                    id_integrator=np.real(integ), iq_integrator=np.imag(integ),
                    i_dq=i_ref, last_injection=ThreePhasePhasor.balanced(i_ref * np.exp(1j * theta)),
                    limited=np.zeros_like(theta, dtype=bool))


def gfm_step(state: GfmState, params: GfmParams, p_t, q_t, dt: float,
             limited=False) -> tuple[GfmState, ThreePhasePhasor]:
    """Advance the droop controllers and return the internal source voltage.

    P-f: ``omega = omega_nom (1 + m_p (kp e_P + int e_P))`` integrated into the
    angle.  Q-V: ``V_cmd = V_nom + m_q (kp e_Q + int e_Q)``.  Both integrators
    are clamped and frozen while the current limit is active.
    """
    e_p = params.p_ref - p_t
    e_q = params.q_ref - q_t
    live = np.logical_not(limited)
    lim = params.integrator_limit
    pf_int = np.clip(state.pf_integrator + live * params.pf_ki * e_p * dt, -lim, lim)
    qv_int = np.clip(state.qv_integrator + live * params.qv_ki * e_q * dt, -lim, lim)
    omega_nom = TWO_PI * params.f_nom
    omega = omega_nom * (1.0 + params.m_p * (params.pf_kp * e_p + pf_int))
    theta = wrap_angle(state.theta + (omega - omega_nom) * dt)
    v_cmd = np.clip(params.v_nom + params.m_q * (params.qv_kp * e_q + qv_int), 0.0, V_CMD_MAX)
    new = GfmState(theta=theta, v_cmd=v_cmd, pf_integrator=pf_int, qv_integrator=qv_int,
                   omega=omega, limited=np.asarray(limited, dtype=bool))
    return new, gfm_source(new)


def gfm_source(state: GfmState) -> ThreePhasePhasor:
    return ThreePhasePhasor.balanced(state.v_cmd * np.exp(1j * state.theta))


@dataclass(frozen=True)
class InverterSpec:
    """One roster entry: an inverter of ``kind`` ('gfm' or 'gfl') at ``bus``."""

    name: str
    bus: int
    kind: str
    params: object

    def __post_init__(self):
        if self.kind not in ("gfm", "gfl"):
            raise ConfigurationError(f"inverter kind must be 'gfm' or 'gfl', got {self.kind!r}")
        expected = GfmParams if self.kind == "gfm" else GflParams
        if not isinstance(self.params, expected):
            raise ConfigurationError(f"{self.name}: params must be {expected.__name__}")


def default_roster() -> tuple[InverterSpec, ...]:
    """Inverters 1 and 3 grid-forming, 2 and 4 grid-following."""
    return (InverterSpec("inv1", 1, "gfm", GfmParams()),
            InverterSpec("inv2", 2, "gfl", GflParams()),
            InverterSpec("inv3", 3, "gfm", GfmParams()),
            InverterSpec("inv4", 4, "gfl", GflParams()))
