"""Scenario grid, single-scenario runs and deterministic batch execution."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ProvenanceError, SimulationError
from .inverters import default_roster
from .netmodel import FaultShunt, NetworkDescription, default_microgrid
from .simulator import SimSettings, simulate

log = logging.getLogger(__name__)

# fault type number -> faulted phases
FAULT_PHASES = {
    0: "",
    1: "a",
    2: "b",
    3: "c",
    4: "ab",
    5: "ac",
    6: "bc",
    7: "abc",
}
FAULT_NAMES = {0: "none", 1: "AG", 2: "BG", 3: "CG", 4: "ABG", 5: "ACG", 6: "BCG", 7: "ABCG"}

LOAD_P_RANGE = (0.1, 0.6)
LOAD_Q_RANGE = (0.01, 0.06)
FIXED_LOAD = (0.35, 0.035)
MAX_FAILED_FRACTION = 0.05
DEFAULT_CHUNK = 140


@dataclass(frozen=True)
class FaultScenario:
    type_code: int
    bus: int = 1
    rf: float = 1.0
    t_start: float = 0.05
    duration: float = 0.1
    load_p: float = FIXED_LOAD[0]
    load_q: float = FIXED_LOAD[1]
    seed: int = 0

    def __post_init__(self):
        if self.type_code not in FAULT_PHASES:
            raise ConfigurationError(f"fault type must be 0-7, got {self.type_code}")
        if self.type_code and not self.rf > 0:
            raise ConfigurationError(f"fault resistance must be > 0, got {self.rf}")
        if self.t_start < 0 or self.duration < 0:
            raise ConfigurationError("fault window must be non-negative")
        if not (LOAD_P_RANGE[0] <= self.load_p <= LOAD_P_RANGE[1]
                and LOAD_Q_RANGE[0] <= self.load_q <= LOAD_Q_RANGE[1]):
            raise ConfigurationError(f"load ({self.load_p}, {self.load_q}) pu outside the allowed range")

    @property
    def name(self) -> str:
        return FAULT_NAMES[self.type_code]

    def fault_shunt(self) -> FaultShunt | None:
        if self.type_code == 0:
            return None
        return FaultShunt(self.bus, frozenset(FAULT_PHASES[self.type_code]), self.rf)

    def label(self) -> str:
        if self.type_code == 0:
            return "no fault"
        return (f"{self.name} bus {self.bus} Rf={self.rf:g} ohm "
                f"t={self.t_start * 1e3:g}-{(self.t_start + self.duration) * 1e3:g} ms")


@dataclass(frozen=True)
class ScenarioGrid:
    types: tuple = (1, 2, 3, 4, 5, 6, 7)
    resistances: tuple = (100.0, 10.0, 1.0, 0.1, 0.001)
    buses: tuple = (1, 2, 3, 4)
    durations: tuple = (0.05, 0.1, 0.2)
    t_start: float = 0.05
    sim_length: float = 1.0

    @property
    def size(self) -> int:
        return len(self.types) * len(self.resistances) * len(self.buses) * len(self.durations)


@dataclass(frozen=True)
class LoadPolicy:
    """``uniform``: per-scenario draw from the allowed ranges; ``fixed``: midpoints."""

    mode: str = "uniform"
    master_seed: int = 20

    def __post_init__(self):
        if self.mode not in ("uniform", "fixed"):
            raise ConfigurationError(f"load mode must be 'uniform' or 'fixed', got {self.mode!r}")

    def draw(self, seed: int) -> tuple[float, float]:
        if self.mode == "fixed":
            return FIXED_LOAD
        rng = np.random.default_rng([self.master_seed, seed])
        return float(rng.uniform(*LOAD_P_RANGE)), float(rng.uniform(*LOAD_Q_RANGE))


def enumerate_scenarios(grid: ScenarioGrid = ScenarioGrid(),
                        load_policy: LoadPolicy = LoadPolicy()) -> list[FaultScenario]:
    """Cartesian product ordered by (type, resistance, bus, duration)."""
    for name in ("types", "resistances", "buses", "durations"):
        if not getattr(grid, name):
            raise ConfigurationError(f"scenario grid dimension {name!r} is empty")
    out = []
    for index, (tc, rf, bus, dur) in enumerate(itertools.product(
            grid.types, grid.resistances, grid.buses, grid.durations)):
        p, q = load_policy.draw(index)
        out.append(FaultScenario(tc, bus, float(rf), grid.t_start, float(dur), p, q, seed=index))
    return out


@dataclass
class RawRun:
    """Relay-bus signals of one scenario, one record per sample period.

    ``v`` and ``i`` are complex per-phase phasors (pu) of the relay-bus
    voltage and relay-line current; ``p`` and ``q`` the three-phase power
    through the relay.
    """

    scenario: FaultScenario
    index: int
    t_ms: np.ndarray
    v: np.ndarray
    i: np.ndarray
    p: np.ndarray
    q: np.ndarray
    fault_active: np.ndarray
    diagnostics: dict
    extras: dict = field(default_factory=dict)
    provenance: str = ""

    @property
    def ok(self) -> bool:
        return self.diagnostics["failed_at_ms"] is None

    def __len__(self):
        return len(self.t_ms)


def _jsonable(obj):
    if is_dataclass(obj):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (frozenset, set)):
        return sorted(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def config_hash(desc, roster, settings) -> str:
    payload = json.dumps(_jsonable({"network": desc, "roster": roster, "settings": settings}),
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def _defaults(desc, roster, settings):
    return (desc or default_microgrid(), tuple(roster or default_roster()),
            settings or SimSettings())


def _run_chunk(args):
    scenarios, indices, desc, roster, settings, provenance = args
    res = simulate(desc, roster, [s.fault_shunt() for s in scenarios],
                   [(s.t_start, s.duration) for s in scenarios],
                   [(s.load_p, s.load_q) for s in scenarios], settings)
    t_ms = np.rint(res.t * 1e3).astype(np.int64)
    runs = []
    for j, (s, index) in enumerate(zip(scenarios, indices)):
        failed = int(res.failed_at[j])
        diag = {
            "max_residual": float(res.max_residual[j]),
            "max_inverter_current": float(res.max_inverter_current[j]),
            "prefault_integrator_step": float(res.prefault_integrator_step[j]),
            "failed_at_ms": None if failed < 0 else round(failed * settings.dt * 1e3, 6),
        }
        extras = {"inverter_names": res.inverter_names, "inverter_s": res.inverter_s[j],
                  "pll_vq": res.pll_vq[j], "gfm_limited": res.gfm_limited[j]}
        runs.append(RawRun(s, index, t_ms, res.v_relay[j], res.i_relay[j],
                           res.s_relay[j].real.copy(), res.s_relay[j].imag.copy(),
                           res.fault_active[j], diag, extras, provenance))
    return runs


def run_scenario(s: FaultScenario, desc: NetworkDescription | None = None, roster=None,
                 settings: SimSettings | None = None) -> RawRun:
    """Simulate one scenario.  Relay signals are recorded at the relay bus."""
    desc, roster, settings = _defaults(desc, roster, settings)
    return _run_chunk(([s], [s.seed], desc, roster, settings,
                       config_hash(desc, roster, settings)))[0]


@dataclass
class BatchManifest:
    config_hash: str
    master_seed: int | None
    load_mode: str | None
    n_scenarios: int
    scenarios_digest: str
    failures: list

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def write(self, path) -> None:
        doc = dict(self.to_dict(), manifest_hash=self.hash, format="mgprotect-manifest/1")
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "BatchManifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        try:
            out = cls(**{k: doc[k] for k in ("config_hash", "master_seed", "load_mode",
                                             "n_scenarios", "scenarios_digest", "failures")})
        except KeyError as exc:
            raise ProvenanceError(f"{path}: manifest lacks {exc.args[0]!r}") from None
        if "manifest_hash" in doc and doc["manifest_hash"] != out.hash:
            raise ProvenanceError(f"{path}: manifest_hash does not match its contents")
        return out


def run_batch(scenarios, desc=None, roster=None, settings=None, parallelism: int = 1,
              chunk_size: int = DEFAULT_CHUNK, load_policy: LoadPolicy | None = None):
    """Simulate ``scenarios`` and return ``(runs, manifest)``.

    Scenarios are simulated in fixed chunks of ``chunk_size`` consecutive
    entries; ``parallelism`` only decides how many chunks run at once, so the
    output does not depend on it.
    """
    desc, roster, settings = _defaults(desc, roster, settings)
    scenarios = list(scenarios)
    cfg = config_hash(desc, roster, settings)
    digest = hashlib.sha256(json.dumps(_jsonable(scenarios), sort_keys=True).encode()).hexdigest()
    chunks = [(scenarios[i:i + chunk_size], list(range(i, min(i + chunk_size, len(scenarios)))),
               desc, roster, settings, cfg)
              for i in range(0, len(scenarios), chunk_size)]
    if parallelism > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            parts = list(pool.map(_run_chunk, chunks))
    else:
        parts = [_run_chunk(c) for c in chunks]
    runs = [r for part in parts for r in part]
    failures = [{"index": r.index, "failed_at_ms": r.diagnostics["failed_at_ms"]}
                for r in runs if not r.ok]
    manifest = BatchManifest(cfg, load_policy.master_seed if load_policy else None,
                             load_policy.mode if load_policy else None,
                             len(scenarios), digest, failures)
    for r in runs:
        r.provenance = manifest.hash
    if failures:
        log.warning("%d of %d runs failed: %s", len(failures), len(runs), failures)
    if runs and len(failures) > MAX_FAILED_FRACTION * len(runs):
        raise SimulationError(f"{len(failures)} of {len(runs)} runs failed (limit 5%)")
    return runs, manifest

