"""Three-phase phasor network of the microgrid.

Phasors use the RMS convention: a balanced 1.0 pu set has per-phase magnitude
1.0.  Per-phase quantities are in per-unit of the per-phase base, so the
three-phase complex power in pu of ``S_base`` is the *mean* of the per-phase
products ``V * conj(I)``.

Admittance matrices are ordered bus-major: row ``3 * k + p`` is phase ``p``
(0=a, 1=b, 2=c) of the ``k``-th bus in ``NetworkDescription.buses``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalError, TopologyError

F_NOM = 60.0
OMEGA_NOM = 2.0 * np.pi * F_NOM
PHASES = ("a", "b", "c")
# a = 1/120 deg; positive sequence is a, b = a*A**2, c = a*A
A = np.exp(2j * np.pi / 3)
ROTATION = np.array([1.0, A**2, A])

COND_LIMIT = 1e12


@dataclass(frozen=True)
class ThreePhasePhasor:
    """Per-phase complex phasors.  Fields may be scalars or equal-shape arrays."""

    a: complex
    b: complex
    c: complex

    @classmethod
    def balanced(cls, phase_a: complex) -> "ThreePhasePhasor":
        phase_a = np.asarray(phase_a, dtype=complex)
        return cls(phase_a, phase_a * A**2, phase_a * A)

    @classmethod
    def from_array(cls, values) -> "ThreePhasePhasor":
        values = np.asarray(values, dtype=complex)
        return cls(values[..., 0], values[..., 1], values[..., 2])

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(
            np.asarray(self.a, dtype=complex),
            np.asarray(self.b, dtype=complex),
            np.asarray(self.c, dtype=complex)), axis=-1)

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.as_array())

    def positive_sequence(self) -> complex:
        return positive_sequence(self.as_array())

    def __iter__(self):
        return iter((self.a, self.b, self.c))


def positive_sequence(abc) -> np.ndarray:
    """Phase-a referred positive-sequence component of ``abc[..., 3]``."""
    abc = np.asarray(abc)
    return (abc[..., 0] + A * abc[..., 1] + A**2 * abc[..., 2]) / 3.0


def three_phase_power(v, i) -> np.ndarray:
    """Complex three-phase power in pu of the system base."""
    return np.mean(np.asarray(v) * np.conj(np.asarray(i)), axis=-1)


@dataclass(frozen=True)
class Bases:
    s_base: float = 1.5e6
    v_base_lv: float = 480.0
    v_base_mv: float = 12.47e3
    f_nom: float = F_NOM

    @property
    def z_base_mv(self) -> float:
        return self.v_base_mv**2 / self.s_base

    @property
    def z_base_lv(self) -> float:
        return self.v_base_lv**2 / self.s_base

    def z_base(self, level: str = "mv") -> float:
        if level == "mv":
            return self.z_base_mv
        if level == "lv":
            return self.z_base_lv
        raise ConfigurationError(f"unknown voltage level {level!r}")

    def ohm_to_pu(self, z, level: str = "mv"):
        return z / self.z_base(level)

    def pu_to_ohm(self, z, level: str = "mv"):
        return z * self.z_base(level)


@dataclass(frozen=True)
class LineData:
    from_bus: int
    to_bus: int
    r_ohm: float
    x_ohm: float

    @property
    def key(self) -> tuple[int, int]:
        return (self.from_bus, self.to_bus)


@dataclass(frozen=True)
class TransformerData:
    """Inverter step-up transformer, modelled as per-phase series leakage."""

    bus: int
    r_pu: float = 0.002
    x_pu: float = 0.05
    v_lv: float = 480.0
    v_mv: float = 12.47e3

    @property
    def z_pu(self) -> complex:
        return complex(self.r_pu, self.x_pu)


@dataclass(frozen=True)
class LoadData:
    bus: int
    p_pu: float
    q_pu: float

    def admittance_pu(self, v_nom: float = 1.0) -> complex:
        """Constant-impedance equivalent, per phase."""
        return complex(self.p_pu, -self.q_pu) / v_nom**2


@dataclass(frozen=True)
class FaultShunt:
    bus: int
    faulted_phases: frozenset
    rf_ohm: float

    def __post_init__(self):
        phases = frozenset(self.faulted_phases)
        if not phases or not phases <= set(PHASES):
            raise ConfigurationError(f"bad faulted phase set {sorted(phases)}")
        object.__setattr__(self, "faulted_phases", phases)
        if not self.rf_ohm > 0:
            raise ConfigurationError(f"fault resistance must be > 0, got {self.rf_ohm}")


@dataclass(frozen=True)
class NetworkDescription:
    buses: tuple = (1, 2, 3, 4)
    lines: tuple = ()
    transformers: tuple = ()
    loads: tuple = ()
    bases: Bases = field(default_factory=Bases)
    relay_bus: int = 1
    relay_line: tuple = (1, 2)

    def __post_init__(self):
        for name in ("buses", "lines", "transformers", "loads", "relay_line"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self, bus: int) -> int:
        try:
            return self.buses.index(bus)
        except ValueError:
            raise ConfigurationError(f"bus {bus} is not in the network") from None

    def line(self, from_bus: int, to_bus: int) -> LineData:
        for ln in self.lines:
            if ln.key == (from_bus, to_bus) or ln.key == (to_bus, from_bus):
                return ln
        raise ConfigurationError(f"no line between buses {from_bus} and {to_bus}")

    def transformer(self, bus: int) -> TransformerData:
        for tr in self.transformers:
            if tr.bus == bus:
                return tr
        return TransformerData(bus, v_lv=self.bases.v_base_lv, v_mv=self.bases.v_base_mv)

    def line_admittance_pu(self, line: LineData) -> complex:
        return 1.0 / self.bases.ohm_to_pu(complex(line.r_ohm, line.x_ohm))

    def with_load(self, bus: int, p_pu: float, q_pu: float) -> "NetworkDescription":
        loads = [ld for ld in self.loads if ld.bus != bus] + [LoadData(bus, p_pu, q_pu)]
        return NetworkDescription(self.buses, self.lines, self.transformers,
                                  tuple(sorted(loads, key=lambda ld: ld.bus)),
                                  self.bases, self.relay_bus, self.relay_line)

    def validate(self) -> "NetworkDescription":
        if len(set(self.buses)) != len(self.buses) or not self.buses:
            raise ConfigurationError("bus ids must be unique and non-empty")
        for ln in self.lines:
            self.bus_index(ln.from_bus)
            self.bus_index(ln.to_bus)
            if ln.from_bus == ln.to_bus:
                raise ConfigurationError(f"line {ln.key} connects a bus to itself")
            if not (ln.r_ohm >= 0 and ln.x_ohm >= 0 and (ln.r_ohm > 0 or ln.x_ohm > 0)):
                raise ConfigurationError(f"line {ln.key} has non-positive impedance")
        for tr in self.transformers:
            self.bus_index(tr.bus)
            if not (tr.r_pu >= 0 and tr.x_pu >= 0 and abs(tr.z_pu) > 0):
                raise ConfigurationError(f"transformer at bus {tr.bus} has non-positive leakage")
        for ld in self.loads:
            self.bus_index(ld.bus)
            if ld.p_pu < 0:
                raise ConfigurationError(f"load at bus {ld.bus} has negative P")
        self.bus_index(self.relay_bus)
        if self.relay_bus not in self.relay_line:
            raise ConfigurationError("relay line must start or end at the relay bus")
        self.line(*self.relay_line)
        _check_connected(self)
        return self


def _check_connected(desc: NetworkDescription) -> None:
    adj = {b: set() for b in desc.buses}
    for ln in desc.lines:
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)
    seen = {desc.buses[0]}
    queue = deque(seen)
    while queue:
        for nb in adj[queue.popleft()] - seen:
            seen.add(nb)
            queue.append(nb)
    missing = sorted(set(desc.buses) - seen)
    if missing:
        raise TopologyError(f"buses {missing} are disconnected from bus {desc.buses[0]}")


def default_microgrid() -> NetworkDescription:
    """The 4-bus, 1.5 MVA microgrid with the load at bus 3 and relay R1 at bus 1."""
    bases = Bases()
    return NetworkDescription(
        buses=(1, 2, 3, 4),
        lines=(LineData(1, 2, 1.4, 2.0),
               LineData(2, 3, 2.2, 3.16),
               LineData(3, 4, 0.6, 3.16)),
        transformers=tuple(TransformerData(b) for b in (1, 2, 3, 4)),
        loads=(LoadData(3, 0.35, 0.035),),
        bases=bases,
        relay_bus=1,
        relay_line=(1, 2),
    ).validate()


def _stamp_shunt(Y, k, phase, y):
    Y[3 * k + phase, 3 * k + phase] += y


def build_admittance(desc: NetworkDescription, faults: Iterable[FaultShunt] = (),
                     source_admittances: Mapping[int, complex] | None = None) -> np.ndarray:
    """Assemble the ``3n x 3n`` nodal admittance matrix in pu.

    ``source_admittances`` maps a bus id to the per-phase Norton admittance of
    a voltage-source inverter (filter plus transformer leakage) connected there.
    """
    desc.validate()
    n = desc.n_bus
    Y = np.zeros((3 * n, 3 * n), dtype=complex)
    for ln in desc.lines:
        y = desc.line_admittance_pu(ln)
        i, j = desc.bus_index(ln.from_bus), desc.bus_index(ln.to_bus)
        for p in range(3):
            Y[3 * i + p, 3 * i + p] += y
            Y[3 * j + p, 3 * j + p] += y
            Y[3 * i + p, 3 * j + p] -= y
            Y[3 * j + p, 3 * i + p] -= y
    for ld in desc.loads:
        k = desc.bus_index(ld.bus)
        for p in range(3):
            _stamp_shunt(Y, k, p, ld.admittance_pu())
    for bus, y in (source_admittances or {}).items():
        k = desc.bus_index(bus)
        for p in range(3):
            _stamp_shunt(Y, k, p, y)
    for ft in faults:
        k = desc.bus_index(ft.bus)
        g = 1.0 / desc.bases.ohm_to_pu(ft.rf_ohm)
        for ph in ft.faulted_phases:
            _stamp_shunt(Y, k, PHASES.index(ph), g)
    return Y


def phase_blocks(Y: np.ndarray) -> np.ndarray:
    """Split a bus-major admittance matrix into its three ``n x n`` phase blocks.

    Raises if the phases are coupled; the line and transformer models here
    carry no mutual terms, so each phase network is independent.
    """
    n = Y.shape[0] // 3
    blocks = np.stack([Y[p::3, p::3] for p in range(3)])
    mask = np.ones_like(Y, dtype=bool)
    for p in range(3):
        mask[p::3, p::3] = False
    if np.any(Y[mask] != 0):
        raise ConfigurationError("admittance matrix has inter-phase coupling")
    assert blocks.shape == (3, n, n)
    return blocks


def _injection_array(injections, n: int, buses: Sequence[int] | None) -> np.ndarray:
    if isinstance(injections, Mapping):
        buses = list(buses) if buses is not None else list(range(1, n + 1))
        arr = np.zeros((n, 3), dtype=complex)
        for bus, ph in injections.items():
            arr[buses.index(bus)] = ph.as_array() if isinstance(ph, ThreePhasePhasor) else ph
        return arr
    arr = np.asarray(injections, dtype=complex)
    if arr.shape != (n, 3):
        raise ConfigurationError(f"injections must have shape ({n}, 3), got {arr.shape}")
    return arr


def solve_network(Y: np.ndarray, injections, buses: Sequence[int] | None = None) -> np.ndarray:
    """Solve ``Y V = I`` for bus voltages, returned as an ``(n_bus, 3)`` array.

    ``injections`` is either an ``(n_bus, 3)`` array or a mapping from bus id
    to :class:`ThreePhasePhasor` (bus ids resolved through ``buses``).
    """
    Y = np.asarray(Y, dtype=complex)
    n = Y.shape[0] // 3
    current = _injection_array(injections, n, buses).reshape(-1)
    cond = np.linalg.cond(Y)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalError(f"admittance matrix is singular (cond={cond:.3g}); "
                             f"floating pattern: {_null_pattern(Y, buses)}")
    V = np.linalg.solve(Y, current)
    # one step of iterative refinement keeps the KCL residual at round-off
    V += np.linalg.solve(Y, current - Y @ V)
    return V.reshape(n, 3)


def _null_pattern(Y, buses) -> str:
    n = Y.shape[0] // 3
    buses = list(buses) if buses is not None else list(range(1, n + 1))
    _, _, vh = np.linalg.svd(Y)
    null = np.abs(vh[-1].conj())
    idx = np.flatnonzero(null > 1e-3 * null.max())
    return ", ".join(f"bus {buses[i // 3]} phase {PHASES[i % 3]}" for i in idx)


def kcl_residual(Y: np.ndarray, V, injections) -> float:
    V = np.asarray(V).reshape(-1)
    n = Y.shape[0] // 3
    return float(np.max(np.abs(Y @ V - _injection_array(injections, n, None).reshape(-1)),
                        initial=0.0))


@dataclass
class BranchFlows:
    """Line currents (sending end, per phase) and bus power injections (pu)."""

    line_currents: dict
    line_power: dict
    bus_injection: dict
    bus_power: dict


def branch_flows(V, desc: NetworkDescription, Y: np.ndarray | None = None) -> BranchFlows:
    """Per-line currents ``(V_from - V_to) y`` and per-bus ``P + jQ`` injections.

    ``Y`` must be the matrix the voltages were solved against (it carries the
    load, source and fault shunts); defaults to the line-and-load network.
    """
    V = np.asarray(V, dtype=complex).reshape(desc.n_bus, 3)
    if Y is None:
        Y = build_admittance(desc)
    line_currents, line_power = {}, {}
    for ln in desc.lines:
        i, j = desc.bus_index(ln.from_bus), desc.bus_index(ln.to_bus)
        cur = (V[i] - V[j]) * desc.line_admittance_pu(ln)
        line_currents[ln.key] = ThreePhasePhasor.from_array(cur)
        line_power[ln.key] = complex(three_phase_power(V[i], cur))
    inj = (Y @ V.reshape(-1)).reshape(desc.n_bus, 3)
    bus_injection = {b: ThreePhasePhasor.from_array(inj[k]) for k, b in enumerate(desc.buses)}
    bus_power = {b: complex(three_phase_power(V[k], inj[k])) for k, b in enumerate(desc.buses)}
    return BranchFlows(line_currents, line_power, bus_injection, bus_power)


def shunt_dissipation(V, desc: NetworkDescription, faults: Iterable[FaultShunt] = ()) -> dict:
    """Three-phase real power absorbed by loads, faults and line resistance."""
    V = np.asarray(V, dtype=complex).reshape(desc.n_bus, 3)
    load = sum(float(np.mean(np.abs(V[desc.bus_index(ld.bus)]) ** 2)) * ld.admittance_pu().real
               for ld in desc.loads)
    fault = 0.0
    for ft in faults:
        g = 1.0 / desc.bases.ohm_to_pu(ft.rf_ohm)
        k = desc.bus_index(ft.bus)
        fault += sum(g * abs(V[k, PHASES.index(ph)]) ** 2 for ph in ft.faulted_phases) / 3.0
    losses = 0.0
    for ln in desc.lines:
        i, j = desc.bus_index(ln.from_bus), desc.bus_index(ln.to_bus)
        cur = (V[i] - V[j]) * desc.line_admittance_pu(ln)
        losses += float(np.mean(np.abs(cur) ** 2)) * desc.bases.ohm_to_pu(ln.r_ohm)
    return {"load": load, "fault": fault, "lines": losses}
