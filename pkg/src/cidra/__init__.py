"""Discrete state-space realisation of lithium-ion cell transfer functions.

The pipeline goes from cell parameters (:mod:`cidra.cellparams`) through
closed-form transfer functions (:mod:`cidra.tfgen`) to discrete models on a
(soc, temperature) grid (:mod:`cidra.realisation`), which are then run
against drive cycles (:mod:`cidra.simulate`). :mod:`cidra.harness` times the
pipeline and :mod:`cidra.cli` wires it to the command line.
"""

__version__ = "0.1.0"

from .cellparams import CellParams, example_cell, load_params, setpoint
from .realisation import ModelGrid, RealisationConfig, StateSpaceModel, realise_grid, realise_setpoint
from .simulate import DriveCycle, SimulationTrace, run_drive_cycle

__all__ = [
    "__version__",
    "CellParams",
    "DriveCycle",
    "ModelGrid",
    "RealisationConfig",
    "SimulationTrace",
    "StateSpaceModel",
    "example_cell",
    "load_params",
    "realise_grid",
    "realise_setpoint",
    "run_drive_cycle",
    "setpoint",
]
