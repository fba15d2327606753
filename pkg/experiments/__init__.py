"""
Experiments module - twin experiments, sweeps and reports
"""

from .twin import (ExperimentConfig, SweepReport, TwinReport, config_from_dict,
                   load_config, run_forward, run_mesh_dump, run_twin, sweep)

__all__ = [
    'ExperimentConfig',
    'TwinReport',
    'SweepReport',
    'config_from_dict',
    'load_config',
    'run_twin',
    'run_forward',
    'run_mesh_dump',
    'sweep',
]
