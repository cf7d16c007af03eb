"""Quasi-static phasor simulation of the microgrid, batched over scenarios.

The network is algebraic at every step; inverter controllers carry the
dynamics.  Grid-forming units enter the network as a source voltage behind
filter plus transformer impedance (a Norton pair), grid-following units as
current sources.  A grid-forming phase whose current would exceed ``I_max``
is switched to a current source of magnitude ``I_max`` at the angle of the
unlimited solution; the compensation solve handles this without refactoring.

Every array carries a leading scenario axis.  Only element-wise arithmetic and
per-matrix linear algebra touch it, so a scenario's trajectory does not
depend on which other scenarios share its batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import inverters as inv
from .netmodel import (PHASES, FaultShunt, NetworkDescription, ThreePhasePhasor,
                       build_admittance, phase_blocks)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimSettings:
    dt: float = 1e-4
    sample_every: int = 10
    sim_length: float = 1.0
    preroll: float = 0.3
    init_iterations: int = 30
    pll: inv.PllParams = field(default_factory=inv.PllParams)

    @property
    def n_steps(self) -> int:
        return int(round(self.sim_length / self.dt))

    @property
    def n_samples(self) -> int:
        return self.n_steps // self.sample_every

    @property
    def sample_period(self) -> float:
        return self.dt * self.sample_every

    def step_index(self, t: float) -> int:
        return int(round(t / self.dt))


@dataclass
class SimResult:
    """Sampled relay signals and diagnostics for a batch of scenarios.

    Arrays are ``(S, T, ...)`` with ``T = settings.n_samples``.
    """

    t: np.ndarray
    v_relay: np.ndarray
    i_relay: np.ndarray
    s_relay: np.ndarray
    fault_active: np.ndarray
    inverter_s: np.ndarray
    inverter_names: tuple
    pll_vq: np.ndarray
    gfm_limited: np.ndarray
    max_residual: np.ndarray
    max_inverter_current: np.ndarray
    prefault_integrator_step: np.ndarray
    failed_at: np.ndarray


class _Network:
    """Per-scenario, per-phase impedance matrices for the healthy and faulted network."""

    def __init__(self, desc, roster, faults, loads):
        self.desc = desc
        self.gfm = [u for u in roster if u.kind == "gfm"]
        self.gfl = [u for u in roster if u.kind == "gfl"]
        self.gfm_idx = np.array([desc.bus_index(u.bus) for u in self.gfm], dtype=int)
        self.gfl_idx = np.array([desc.bus_index(u.bus) for u in self.gfl], dtype=int)
        self.z_tr_gfm = np.array([desc.transformer(u.bus).z_pu for u in self.gfm])
        self.z_tr_gfl = np.array([desc.transformer(u.bus).z_pu for u in self.gfl])
        self.y_src = 1.0 / (np.array([u.params.z_filter_pu for u in self.gfm]) + self.z_tr_gfm)
        sources = {u.bus: y for u, y in zip(self.gfm, self.y_src)}
        load_bus = desc.loads[0].bus if desc.loads else None

        S, n = len(faults), desc.n_bus
        Y = np.empty((S, 2, 3, n, n), dtype=complex)
        for s, (fault, (p_load, q_load)) in enumerate(zip(faults, loads)):
            d = desc.with_load(load_bus, p_load, q_load) if load_bus is not None else desc
            Y[s, 0] = phase_blocks(build_admittance(d, (), sources))
            Y[s, 1] = phase_blocks(build_admittance(d, [fault] if fault else (), sources))
        self.Y = Y
        self.Z = np.linalg.inv(Y)

        ri, rj = desc.bus_index(desc.relay_line[0]), desc.bus_index(desc.relay_line[1])
        if desc.relay_line[0] != desc.relay_bus:
            ri, rj = rj, ri
        self.relay = (ri, rj)
        self.y_relay = desc.line_admittance_pu(desc.line(*desc.relay_line))

    def select(self, active):
        sel = active[:, None, None, None]
        return np.where(sel, self.Z[:, 1], self.Z[:, 0]), np.where(sel, self.Y[:, 1], self.Y[:, 0])


def _matvec(M, x):
    return (M @ x[..., None])[..., 0]


def _solve(net: _Network, Z, Y, J, E):
    """Network solve with grid-forming current limiting.

    ``J`` (S, 3, n) holds every source's Norton current; ``E`` (S, 3, G) the
    grid-forming internal voltages.  Returns voltages, grid-forming output
    currents, the limited mask and the actual injection vector.
    """
    g = net.gfm_idx
    y = net.y_src
    V = _matvec(Z, J)
    I_g = (E - V[..., g]) * y
    limited = np.zeros(I_g.shape, dtype=bool)
    clamp = np.zeros_like(I_g)
    i_max = np.array([u.params.i_max for u in net.gfm])
    J_act = J
    for _ in range(len(g) * 3 + 1):
        mag = np.abs(I_g)
        new = ~limited & (mag > i_max * (1.0 + 1e-12))
        if not new.any():
            break
        clamp = np.where(new, I_g * (i_max / np.where(new, mag, 1.0)), clamp)
        limited |= new
        # limited source: current clamp plus a compensating y*V_g for the stamped shunt
        J1 = J.copy()
        J1[..., g] += np.where(limited, clamp - E * y, 0.0)
        V1 = _matvec(Z, J1)
        D = limited * y
        Zgg = Z[..., g[:, None], g[None, :]]
        M = np.eye(len(g)) - Zgg * D[..., None, :]
        Vg = np.linalg.solve(M, V1[..., g][..., None])[..., 0]
        V = V1 + _matvec(Z[..., :, g], D * Vg)
        J_act = J1.copy()
        J_act[..., g] += D * Vg
        I_g = np.where(limited, clamp, (E - V[..., g]) * y)
    return V, I_g, limited, J_act


def _gfm_state(n, params_list):
    return [inv.GfmState(theta=np.zeros(n), v_cmd=np.full(n, p.v_nom), pf_integrator=np.zeros(n),
                         qv_integrator=np.zeros(n), omega=np.full(n, 2 * np.pi * p.f_nom),
                         limited=np.zeros(n, dtype=bool)) for p in params_list]


def simulate(desc: NetworkDescription, roster, faults, windows, loads,
             settings: SimSettings = SimSettings()) -> SimResult:
    """Run a batch of scenarios side by side.

    Parameters
    ----------
    faults : list of FaultShunt or None
        Fault stamped during each scenario's window (``None`` = no fault).
    windows : list of (t_start, duration)
        Fault window in seconds; the stamp is present for steps with
        ``t_start <= t < t_start + duration``.
    loads : list of (P, Q)
        Load at the network's switchable load bus, pu.
    """
    S = len(faults)
    if not (len(windows) == len(loads) == S):
        raise ValueError("faults, windows and loads must have equal length")
    net = _Network(desc, roster, faults, loads)
    G, F = len(net.gfm), len(net.gfl)
    n = desc.n_bus
    dt = settings.dt
    k_start = np.array([settings.step_index(w[0]) for w in windows])
    k_end = np.array([settings.step_index(w[0] + w[1]) for w in windows])
    no_fault = np.array([f is None for f in faults])
    k_start[no_fault] = k_end[no_fault] = 0

    gfm_params = [u.params for u in net.gfm]
    gfl_params = [u.params for u in net.gfl]
    gfm = _gfm_state(S, gfm_params)
    E = np.stack([inv.gfm_source(st).as_array() for st in gfm], axis=-1) if G else np.zeros((S, 3, 0))

    # initial grid-following state: fixed point of injection <- terminal voltage
    Z0, Y0 = net.select(np.zeros(S, dtype=bool))
    gfl = [inv.gfl_steady_state(p, ThreePhasePhasor.balanced(np.ones(S, dtype=complex)))
           for p in gfl_params]
    for _ in range(settings.init_iterations):
        J = _assemble(net, S, n, E, gfl)
        V, _, _, _ = _solve(net, Z0, Y0, J, E)
        gfl = [inv.gfl_steady_state(p, _gfl_terminal(net, V, st, f))
               for f, (p, st) in enumerate(zip(gfl_params, gfl))]

    n_pre = settings.step_index(settings.preroll)
    T = settings.n_samples
    every = settings.sample_every
    out_v = np.zeros((S, T, 3), dtype=complex)
    out_i = np.zeros((S, T, 3), dtype=complex)
    out_s = np.zeros((S, T), dtype=complex)
    out_active = np.zeros((S, T), dtype=bool)
    out_inv = np.zeros((S, T, G + F), dtype=complex)
    out_vq = np.zeros((S, T, F))
    out_lim = np.zeros((S, T, G), dtype=bool)
    max_res = np.zeros(S)
    max_cur = np.zeros(S)
    pre_step = np.zeros(S)
    failed_at = np.full(S, -1, dtype=int)
    ri, rj = net.relay
    # pre-fault window in which controller integrators must be at rest
    k_pre = np.where(no_fault, settings.n_steps, k_start)
    k_pre_max = k_pre.max(initial=0)

    for k in range(-n_pre, settings.n_steps):
        active = (k >= k_start) & (k < k_end)
        Z, Y = net.select(active)
        J = _assemble(net, S, n, E, gfl)
        V, I_g, limited, J_act = _solve(net, Z, Y, J, E)

        max_res = np.maximum(max_res, np.max(np.abs(_matvec(Y, V) - J_act), axis=(1, 2)))
        bad = ~np.all(np.isfinite(V), axis=(1, 2)) & (failed_at < 0)
        if bad.any():
            failed_at[bad] = max(k, 0)
            log.warning("scenarios %s diverged at step %d", np.flatnonzero(bad).tolist(), k)

        # grid-forming measurements and control
        s_inv = []
        new_gfm = []
        for g, (p, st) in enumerate(zip(gfm_params, gfm)):
            cur = I_g[:, :, g]
            vt = V[:, :, net.gfm_idx[g]] + net.z_tr_gfm[g] * cur
            s_g = np.mean(vt * np.conj(cur), axis=1)
            s_inv.append(s_g)
            lim_g = limited[:, :, g].any(axis=1)
            st2, _ = inv.gfm_step(st, p, s_g.real, s_g.imag, dt, lim_g)
            new_gfm.append(st2)
            max_cur = np.maximum(max_cur, np.abs(cur).max(axis=1))

        # grid-following measurements and control
        new_gfl = []
        vq = []
        for f, (p, st) in enumerate(zip(gfl_params, gfl)):
            cur = st.last_injection.as_array()
            vt = _gfl_terminal(net, V, st, f)
            s_inv.append(np.mean(vt.as_array() * np.conj(cur), axis=1))
            st2, _ = inv.gfl_step(st, p, vt, dt, settings.pll)
            new_gfl.append(st2)
            vq.append(st2.pll_vq)
            max_cur = np.maximum(max_cur, np.abs(cur).max(axis=1))

        if 0 <= k < k_pre_max:
            pre = k < k_pre
            step = np.zeros(S)
            for a, b in zip(gfm, new_gfm):
                step = np.maximum(step, np.abs(b.pf_integrator - a.pf_integrator))
                step = np.maximum(step, np.abs(b.qv_integrator - a.qv_integrator))
            for a, b in zip(gfl, new_gfl):
                step = np.maximum(step, np.abs(b.pll_integrator - a.pll_integrator))
                step = np.maximum(step, np.abs(b.id_integrator - a.id_integrator))
                step = np.maximum(step, np.abs(b.iq_integrator - a.iq_integrator))
            pre_step = np.where(pre, np.maximum(pre_step, step), pre_step)

        if k >= 0 and k % every == 0:
            m = k // every
            v1 = V[:, :, ri]
            i1 = (v1 - V[:, :, rj]) * net.y_relay
            out_v[:, m] = v1
            out_i[:, m] = i1
            out_s[:, m] = np.mean(v1 * np.conj(i1), axis=1)
            out_active[:, m] = active
            if s_inv:
                out_inv[:, m] = np.stack(s_inv, axis=-1)
            if vq:
                out_vq[:, m] = np.abs(np.stack(vq, axis=-1))
            out_lim[:, m] = limited.any(axis=1)

        gfm, gfl = new_gfm, new_gfl
        if G:
            E = np.stack([inv.gfm_source(st).as_array() for st in gfm], axis=-1)

    t = np.arange(T) * settings.sample_period
    return SimResult(t=t, v_relay=out_v, i_relay=out_i, s_relay=out_s, fault_active=out_active,
                     inverter_s=out_inv,
                     inverter_names=tuple(u.name for u in net.gfm + net.gfl),
                     pll_vq=out_vq, gfm_limited=out_lim, max_residual=max_res,
                     max_inverter_current=max_cur, prefault_integrator_step=pre_step,
                     failed_at=failed_at)


def _assemble(net, S, n, E, gfl):
    J = np.zeros((S, 3, n), dtype=complex)
    if len(net.gfm_idx):
        J[..., net.gfm_idx] += E * net.y_src
    for f, st in enumerate(gfl):
        J[..., net.gfl_idx[f]] += st.last_injection.as_array()
    return J


def _gfl_terminal(net, V, st, f) -> ThreePhasePhasor:
    cur = st.last_injection.as_array()
    return ThreePhasePhasor.from_array(V[:, :, net.gfl_idx[f]] + net.z_tr_gfl[f] * cur)


def fault_phase_names(fault: FaultShunt | None) -> str:
    if fault is None:
        return ""
    return "".join(p for p in PHASES if p in fault.faulted_phases).upper() + "G"
