"""
Constants and default values for Fracture Width Filter
Centralized configuration defaults and the built-in test-case presets.
"""

from typing import Any, Dict

# Edge kinds used by the mesh
EDGE_INTERIOR = 0
EDGE_BOUNDARY = 1
EDGE_FRACTURE = 2

EDGE_KIND_NAMES = {
    EDGE_INTERIOR: "interior",
    EDGE_BOUNDARY: "boundary",
    EDGE_FRACTURE: "fracture",
}

# Outer boundary sides, in the order used by boundary-piece matching
BOUNDARY_SIDES = ("left", "right", "bottom", "top")

GEOMETRY_KINDS = ("plain", "single", "parallel", "intersecting")
PRIOR_KINDS = ("uniform", "point", "normal")
RESAMPLING_SCHEMES = ("multinomial", "systematic", "residual")
STATE_MODES = ("companion", "fracture_only")
ORDERINGS = ("colamd", "rcm", "natural")
PARTICLE_SOLVES = ("low_rank", "refactor")
NOISE_INTERPRETATIONS = ("variance", "std")
SWEEP_AXES = ("epsilon", "particles", "seed")

# Stage labels for random streams; each stage draws from its own key so
# runs are independent of thread scheduling.
STREAM_PRIOR = 1
STREAM_JITTER = 2
STREAM_RESAMPLE = 3
STREAM_NOISE = 4

# Widths must stay well below the domain diameter
MAX_WIDTH_FRACTION = 0.05

SOLVER_TOLERANCE = 1e-10
PIVOT_TOLERANCE = 1e-14

# Harness stage labels
STAGE_CONFIG = "config"
STAGE_MESH = "mesh"
STAGE_ASSEMBLY = "assembly"
STAGE_TRUTH = "truth"
STAGE_OBSERVATION = "observation"
STAGE_FILTER = "filter"
STAGE_OUTPUT = "output"

# Output file names inside a run directory
OUTPUT_FILES = {
    "echo": "config.echo.txt",
    "log": "run.log",
    "truth": "truth_fracture.csv",
    "observations": "observations.csv",
    "trace": "estimate_trace.csv",
    "summary": "summary.json",
    "report": "report.txt",
    "sweep": "sweep.csv",
    "mesh": "mesh.txt",
    "field": "final_field.txt",
}

# Lower fifth of the lateral sides carries the driving pressure difference
_LATERAL_DIRICHLET = [
    {"side": "right", "range": [0.0, 0.2], "value": 1.0},
    {"side": "left", "range": [0.0, 0.2], "value": 0.0},
]

# Every key the config file may set, with its default
DEFAULT_CONFIG: Dict[str, Any] = {
    "case": "case1",
    "geometry": {
        "kind": "single",
        "x_range": [0.0, 2.0],
        "y_range": [0.0, 1.0],
        "fractures": [
            {"orientation": "vertical", "position": 1.0, "width": 1e-3},
        ],
    },
    "mesh": {
        "h": 0.02,
    },
    "time": {
        "dt": 0.1,
        "T": 5.0,
    },
    "coefficients": {
        "K": [[1.0, 0.0], [0.0, 1.0]],
        "phi": 1.0,
        "K_gamma": 100.0,
        "phi_gamma": 1e-3,
        "source": 0.0,
        "fracture_source": 0.0,
        "p0": 0.0,
    },
    "boundary": {
        "default": "no_flow",
        "default_value": 0.0,
        "dirichlet": _LATERAL_DIRICHLET,
        "no_flow": [],
        "tips": [
            {"fracture": 0, "end": "start", "value": 1.0},
            {"fracture": 0, "end": "end", "value": 0.0},
        ],
        "a": None,
        "b": None,
    },
    "observation": {
        "noise_variance": 500.0,
        "interpretation": "variance",
        "scale": 1e-6,
    },
    "filter": {
        "particles": 80,
        "exploration": [400.0],
        "likelihood_variance": None,
        "burn_in": 10,
        "prior": {
            "kind": "uniform",
            "guess": [1600.0],
            "bracket": [0.5, 2.0],
            "low": None,
            "high": None,
            "value": None,
            "mean": None,
            "std": None,
            "truncate": False,
        },
        "theta_floor": 1.0,
        "resampling": "multinomial",
        "state_mode": "companion",
    },
    "solver": {
        "ordering": "colamd",
        "particle_solve": "low_rank",
        "tolerance": SOLVER_TOLERANCE,
    },
    "run": {
        "seed": 1,
        "threads": 1,
        "out": "runs/case1",
    },
    "acceptance": {
        "tolerance": None,
        "band": 0.1,
    },
}

# Built-in test cases; each overlays DEFAULT_CONFIG.
# Widths, time step, mesh size, particle counts and exploration variances
# are the reference values. Boundary placements for cases 2 and 3, the
# coefficient values and the prior guesses are assumptions.
PRESETS: Dict[str, Dict[str, Any]] = {
    "case1": {
        "case": "case1",
        "run": {"out": "runs/case1"},
    },
    "case2": {
        "case": "case2",
        "geometry": {
            "kind": "parallel",
            "x_range": [0.0, 2.0],
            "y_range": [0.0, 1.0],
            "fractures": [
                {"orientation": "vertical", "position": 0.5, "width": 2.5e-3},
                {"orientation": "vertical", "position": 1.5, "width": 5e-3},
            ],
        },
        "boundary": {
            "tips": [
                {"fracture": 0, "end": "start", "value": 1.0},
                {"fracture": 0, "end": "end", "value": 0.0},
                {"fracture": 1, "end": "start", "value": 1.0},
                {"fracture": 1, "end": "end", "value": 0.0},
            ],
        },
        "filter": {
            "particles": 80,
            "exploration": [2000.0, 7000.0],
            "prior": {"guess": [640.0, 320.0]},
        },
        "run": {"out": "runs/case2"},
    },
    "case3a": {
        "case": "case3a",
        "geometry": {
            "kind": "intersecting",
            "x_range": [0.0, 1.0],
            "y_range": [0.0, 1.0],
            "fractures": [
                {"orientation": "horizontal", "position": 0.5, "width": 1e-3},
                {"orientation": "vertical", "position": 0.5, "width": 6e-4},
            ],
        },
        "boundary": {
            "a": 1.0,
            "b": 0.0,
            "tips": [
                {"fracture": 0, "end": "start", "value": "a"},
                {"fracture": 0, "end": "end", "value": "b"},
                {"fracture": 1, "end": "start", "value": 1.0},
                {"fracture": 1, "end": "end", "value": 0.0},
            ],
        },
        "filter": {
            "particles": 120,
            "exploration": [8000.0, 10000.0],
            "prior": {"guess": [1600.0, 1000.0]},
        },
        "run": {"out": "runs/case3a"},
    },
    "case3b": {
        "case": "case3b",
        "geometry": {
            "kind": "intersecting",
            "x_range": [0.0, 1.0],
            "y_range": [0.0, 1.0],
            "fractures": [
                {"orientation": "horizontal", "position": 0.5, "width": 1e-3},
                {"orientation": "vertical", "position": 0.5, "width": 6e-4},
            ],
        },
        "boundary": {
            "a": 5.0,
            "b": 0.0,
            "tips": [
                {"fracture": 0, "end": "start", "value": "a"},
                {"fracture": 0, "end": "end", "value": "b"},
                {"fracture": 1, "end": "start", "value": 1.0},
                {"fracture": 1, "end": "end", "value": 0.0},
            ],
        },
        "filter": {
            # particle count follows case 3a
            "particles": 120,
            "exploration": [18000.0, 18000.0],
            "prior": {"guess": [1600.0, 1000.0]},
        },
        "run": {"out": "runs/case3b"},
    },
}

# Values the case-1 comparison of exploration rates uses
CASE1_EXPLORATION_PAIR = ([400.0], [800.0])
CASE2_EXPLORATION_PAIR = ([2000.0, 7000.0], [4000.0, 8000.0])
