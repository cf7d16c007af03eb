"""INI configuration for the network, inverter roster and simulation settings.

Sections: ``[bases]``, ``[network]``, ``[line A-B]``, ``[transformer N]``,
``[load N]``, ``[inverter NAME]`` and ``[simulation]``.  Inverter sections
take ``bus``, ``kind`` and any controller parameter as an override.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from importlib import resources
from pathlib import Path

from .errors import ConfigurationError
from .inverters import GflParams, GfmParams, InverterSpec
from .netmodel import Bases, LineData, LoadData, NetworkDescription, TransformerData
from .simulator import SimSettings

ENV_CONFIG_DIR = "MGPROTECT_CONFIG_DIR"
CONFIG_NAME = "microgrid.ini"
_SIM_FIELDS = ("dt", "sample_every", "sim_length", "preroll", "init_iterations")


def _floats(section, names):
    try:
        return {k: section.getfloat(k) for k in names if k in section}
    except ValueError as exc:
        raise ConfigurationError(f"[{section.name}]: {exc}") from None


def _ints(text, what):
    try:
        return tuple(int(tok) for tok in text.split())
    except ValueError:
        raise ConfigurationError(f"{what} must be whitespace-separated integers, got {text!r}") from None


def _suffix(name, prefix):
    return name[len(prefix):].strip()


def _param_overrides(section, cls):
    known = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in section.items():
        if key in ("bus", "kind"):
            continue
        if key not in known:
            raise ConfigurationError(f"[{section.name}]: unknown parameter {key!r}")
        try:
            out[key] = float(raw)
        except ValueError:
            raise ConfigurationError(f"[{section.name}]: {key} must be a number") from None
    return out


def parse_config(text: str, source: str = "<string>"):
    """Parse INI text into ``(NetworkDescription, roster, SimSettings)``."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None

    bases = Bases(**_floats(cp["bases"], ("s_base", "v_base_lv", "v_base_mv", "f_nom"))) \
        if cp.has_section("bases") else Bases()
    net = cp["network"] if cp.has_section("network") else {}
    buses = _ints(net.get("buses", "1 2 3 4"), "buses")
    relay_bus = _ints(net.get("relay_bus", "1"), "relay_bus")[0]
    relay_line = _ints(net.get("relay_line", "1 2"), "relay_line")

    lines, transformers, loads, roster = [], [], [], []
    for name in cp.sections():
        sec = cp[name]
        if name.startswith("line "):
            ends = _suffix(name, "line ").split("-")
            if len(ends) != 2:
                raise ConfigurationError(f"line section must be named 'line A-B', got [{name}]")
            a, b = _ints(" ".join(ends), name)
            vals = _floats(sec, ("r_ohm", "x_ohm"))
            if set(vals) != {"r_ohm", "x_ohm"}:
                raise ConfigurationError(f"[{name}] needs r_ohm and x_ohm")
            lines.append(LineData(a, b, **vals))
        elif name.startswith("transformer "):
            bus = _ints(_suffix(name, "transformer "), name)[0]
            transformers.append(TransformerData(bus, **_floats(sec, ("r_pu", "x_pu")),
                                                v_lv=bases.v_base_lv, v_mv=bases.v_base_mv))
        elif name.startswith("load "):
            bus = _ints(_suffix(name, "load "), name)[0]
            loads.append(LoadData(bus, **_floats(sec, ("p_pu", "q_pu"))))
        elif name.startswith("inverter "):
            kind = sec.get("kind", "")
            cls = {"gfm": GfmParams, "gfl": GflParams}.get(kind)
            if cls is None:
                raise ConfigurationError(f"[{name}]: kind must be 'gfm' or 'gfl'")
            params = cls(v_base=bases.v_base_lv, s_base=bases.s_base,
                         **_param_overrides(sec, cls))
            roster.append(InverterSpec(_suffix(name, "inverter "),
                                       _ints(sec.get("bus", ""), f"[{name}] bus")[0], kind, params))
        elif name not in ("bases", "network", "simulation"):
            raise ConfigurationError(f"unknown section [{name}]")

    desc = NetworkDescription(buses, lines, transformers, loads, bases, relay_bus,
                              relay_line).validate()
    if not roster:
        raise ConfigurationError("configuration defines no inverters")
    for inv in roster:
        desc.bus_index(inv.bus)

    settings = SimSettings()
    if cp.has_section("simulation"):
        sec = cp["simulation"]
        unknown = set(sec) - set(_SIM_FIELDS)
        if unknown:
            raise ConfigurationError(f"[simulation]: unknown keys {sorted(unknown)}")
        vals = _floats(sec, _SIM_FIELDS)
        for k in ("sample_every", "init_iterations"):
            if k in vals:
                vals[k] = int(vals[k])
        settings = dataclasses.replace(settings, **vals)
        if not (settings.dt > 0 and settings.sample_every >= 1 and settings.sim_length > 0):
            raise ConfigurationError("[simulation]: dt, sample_every and sim_length must be positive")
    return desc, tuple(roster), settings


def default_config_text() -> str:
    return (resources.files(__package__) / "data" / "default_microgrid.ini").read_text("utf-8")


def load_config(path=None):
    """Load ``path``; without one, ``$MGPROTECT_CONFIG_DIR/microgrid.ini`` or the built-in default."""
    if path is None:
        env = os.environ.get(ENV_CONFIG_DIR)
        if env:
            path = Path(env) / CONFIG_NAME
            if not path.is_file():
                raise ConfigurationError(f"{ENV_CONFIG_DIR} is set but {path} does not exist")
    if path is None:
        return parse_config(default_config_text(), "default_microgrid.ini")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
