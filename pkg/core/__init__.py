"""
Core module - fractured-domain geometry, mixed finite element assembly,
backward Euler forward model, fracture observations and the direct filter
"""

from .assembly import (BoundaryConditions, ModelCoefficients, SystemMatrices,
                       assemble_system, initial_state)
from .config_manager import ConfigManager
from .constants import DEFAULT_CONFIG, OUTPUT_FILES, PRESETS
from .direct_filter import (EstimateTrace, FilterConfig, ParticleEnsemble,
                            PriorSpec, estimate, run_filter)
from .exceptions import FractureFilterError
from .forward import (BlockSystem, DiscreteState, LowRankUpdate,
                      SystemAssembler, build_system, simulate, step)
from .geometry import FractureGeometry, TriangularMesh, build_geometry, generate_mesh
from .observation import CompanionModel, ObservationSeries, make_synthetic, observe

__all__ = [
    'DEFAULT_CONFIG',
    'PRESETS',
    'OUTPUT_FILES',
    'ConfigManager',
    'FractureFilterError',
    'FractureGeometry',
    'TriangularMesh',
    'build_geometry',
    'generate_mesh',
    'ModelCoefficients',
    'BoundaryConditions',
    'SystemMatrices',
    'assemble_system',
    'initial_state',
    'DiscreteState',
    'BlockSystem',
    'SystemAssembler',
    'LowRankUpdate',
    'build_system',
    'step',
    'simulate',
    'ObservationSeries',
    'CompanionModel',
    'make_synthetic',
    'observe',
    'ParticleEnsemble',
    'PriorSpec',
    'FilterConfig',
    'EstimateTrace',
    'run_filter',
    'estimate',
]
