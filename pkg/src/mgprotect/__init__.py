"""Simulation, feature extraction and decision-tree relaying for a 4-bus inverter microgrid."""

from .errors import (ConfigurationError, DataError, MgProtectError, ModelError, NumericalError,
                     ParseError, ProvenanceError, SimulationError, TopologyError)

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DataError", "MgProtectError", "ModelError", "NumericalError",
           "ParseError", "ProvenanceError", "SimulationError", "TopologyError", "__version__"]
