"""
Backward Euler forward model for Fracture Width Filter
Builds the block system for given fracture widths, advances the discrete
state, and couples crossing fractures through a flux-balance multiplier.

The unknowns are [fluxes | pressures] and the system reads

    [ A(d)    -B^T ] [u^n]   [ G                         ]
    [ dt B     C   ] [p^n] = [ C p^(n-1) + dt L_q(t^n)   ]

with no-flow flux unknowns eliminated.
"""

import logging
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from .assembly import BoundaryConditions, SystemMatrices, TipCondition
from .constants import SOLVER_TOLERANCE
from .exceptions import ConstraintError, SingularMatrixError, SolverError
from .geometry import DofLayout, Intersection, TriangularMesh, segment_endpoint_nodes, node_dof
from .linsolve import Factorization, SymbolicFactorization, analyze, factor, solve
from .utils import format_number, write_csv

logger = logging.getLogger(__name__)

Load = Tuple[np.ndarray, np.ndarray]


@dataclass(eq=False)
class DiscreteState:
    """Unknown vector at time index ``step``."""
    values: np.ndarray
    step: int
    layout: DofLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.layout.size,):
            raise SolverError(
                f"State has {self.values.size} entries, layout expects {self.layout.size}"
            )

    @property
    def flux(self) -> np.ndarray:
        return self.values[:self.layout.n_edge]

    @property
    def fracture_flux(self) -> np.ndarray:
        return self.values[self.layout.node_slice]

    @property
    def pressure(self) -> np.ndarray:
        return self.values[self.layout.triangle_slice]

    @property
    def fracture_pressure(self) -> np.ndarray:
        return self.values[self.layout.fracture_pressure_slice]

    @property
    def multipliers(self) -> np.ndarray:
        return self.values[self.layout.multiplier_slice]

    def copy(self) -> "DiscreteState":
        return DiscreteState(self.values.copy(), self.step, self.layout)


def make_initial_state(mats: SystemMatrices, values: np.ndarray) -> DiscreteState:
    """Wrap a mesh-layout initial vector, padding intersection multipliers with zeros."""
    padded = np.zeros(mats.layout.size)
    padded[:values.size] = values
    return DiscreteState(padded, 0, mats.layout)


# ========== Block system ==========

def _restricted_triplets(matrix: sparse.spmatrix, position: np.ndarray,
                         row_offset: int, col_offset: int):
    coo = sparse.coo_matrix(matrix)
    rows = position[coo.row + row_offset]
    cols = position[coo.col + col_offset]
    keep = (rows >= 0) & (cols >= 0)
    return rows[keep], cols[keep], coo.data[keep]


class SystemAssembler:
    """
    Width-independent part of the block system for one time step size.

    The matrix for any widths is the stored base triplets plus the
    fracture triplets scaled by 1/(K_gamma d_k), so every matrix it builds
    has the same pattern and one symbolic analysis serves them all.
    """

    def __init__(self, mats: SystemMatrices, dt: float, subsystem: str = "full",
                 ordering: str = "colamd", tolerance: float = SOLVER_TOLERANCE):
        if dt <= 0:
            raise SolverError(f"Time step must be positive, got {dt}")
        if subsystem not in ("full", "fracture"):
            raise SolverError(f"Unknown subsystem '{subsystem}'")
        self.mats = mats
        self.dt = float(dt)
        self.subsystem = subsystem
        self.ordering = ordering
        self.tolerance = tolerance
        self._symbolic: Optional[SymbolicFactorization] = None
        self._lock = threading.Lock()

        layout = mats.layout
        candidates = np.arange(layout.size) if subsystem == "full" else layout.fracture_indices()
        self.active = np.setdiff1d(candidates, mats.no_flow)
        position = np.full(layout.size, -1, dtype=np.int64)
        position[self.active] = np.arange(self.active.size)
        self._position = position

        n_flux = layout.n_flux
        parts = [
            _restricted_triplets(mats.flux_mass, position, 0, 0),
            _restricted_triplets(-mats.B.T, position, 0, n_flux),
            _restricted_triplets(self.dt * mats.B, position, n_flux, 0),
            _restricted_triplets(sparse.diags(mats.C), position, n_flux, n_flux),
        ]
        self._base = tuple(np.concatenate(arrays) for arrays in zip(*parts))
        self._fracture = [_restricted_triplets(m, position, 0, 0) for m in mats.fracture_mass]

    @property
    def size(self) -> int:
        return int(self.active.size)

    def matrix(self, widths) -> sparse.csc_matrix:
        """Block matrix on the active unknowns for the given widths."""
        widths = np.atleast_1d(np.asarray(widths, dtype=float))
        if widths.size != len(self._fracture):
            raise SolverError(f"Expected {len(self._fracture)} width(s), got {widths.size}")
        if np.any(~np.isfinite(widths)) or np.any(widths <= 0):
            raise SolverError(f"Widths must be positive and finite, got {widths}")
        rows, cols, vals = [self._base[0]], [self._base[1]], [self._base[2]]
        for (r, c, v), d in zip(self._fracture, widths):
            rows.append(r)
            cols.append(c)
            vals.append(v / (self.mats.coeffs.fracture_conductivity * d))
        n = self.size
        return sparse.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )

    def symbolic(self, matrix: Optional[sparse.spmatrix] = None) -> SymbolicFactorization:
        """Shared ordering, computed from the first matrix seen."""
        with self._lock:
            if self._symbolic is None:
                self._symbolic = analyze(matrix if matrix is not None else self.matrix(
                    np.ones(len(self._fracture)) * 1e-3), self.ordering)
            return self._symbolic

    def build(self, widths) -> "BlockSystem":
        widths = np.atleast_1d(np.asarray(widths, dtype=float))
        matrix = self.matrix(widths)
        symbolic = self.symbolic(matrix)
        factorization = factor(symbolic, matrix, self.tolerance,
                               context=f"widths={np.array2string(widths, precision=4)}")
        return BlockSystem(self, widths, matrix, factorization)


@dataclass(eq=False)
class BlockSystem:
    """Factored block system for fixed widths and time step."""
    assembler: SystemAssembler
    widths: np.ndarray
    matrix: sparse.csc_matrix
    factorization: Factorization

    @property
    def mats(self) -> SystemMatrices:
        return self.assembler.mats

    @property
    def dt(self) -> float:
        return self.assembler.dt

    def rhs(self, X_prev: DiscreteState, load: Optional[Load] = None) -> np.ndarray:
        """Right-hand side on the active unknowns for the step after X_prev."""
        mats = self.mats
        layout = mats.layout
        if load is None:
            t = (X_prev.step + 1) * self.dt
            L = mats.load(t) if mats.has_sources else np.zeros(layout.n_pressure)
            G = mats.G
        else:
            L, G = load
            L = np.pad(np.asarray(L, dtype=float), (0, layout.n_pressure - len(L)))
        F = np.empty(layout.size)
        F[:layout.n_flux] = G
        F[layout.n_flux:] = mats.C * X_prev.values[layout.n_flux:] + self.dt * L
        return F[self.assembler.active]


def build_system(mats: SystemMatrices, dt: float, widths,
                 assembler: Optional[SystemAssembler] = None) -> BlockSystem:
    """
    Assemble and factor the block system for given widths.

    Args:
        mats: Width-independent matrices.
        dt: Time step.
        widths: One width per fracture.
        assembler: Reuse an assembler (and its symbolic analysis) built
            for the same matrices and time step.

    Returns:
        BlockSystem ready for repeated steps.

    Raises:
        SingularMatrixError: The block matrix cannot be factored.
    """
    if assembler is None:
        assembler = SystemAssembler(mats, dt)
    elif assembler.mats is not mats or assembler.dt != dt:
        raise SolverError("Assembler was built for different matrices or time step")
    system = assembler.build(widths)
    logger.debug(f"Factored block system of size {assembler.size}, fill {system.factorization.fill}")
    return system


def step(system: BlockSystem, X_prev: DiscreteState, load: Optional[Load] = None) -> DiscreteState:
    """
    One backward Euler step.

    Args:
        system: Factored block system.
        X_prev: State at t^(n-1).
        load: (L_q, G) at t^n; evaluated from the system matrices when None.

    Returns:
        State at t^n. Inactive unknowns keep their previous values, except
        eliminated no-flow fluxes which are zero.
    """
    if X_prev.layout != system.mats.layout:
        raise SolverError("State layout does not match the system")
    x = solve(system.factorization, system.rhs(X_prev, load))
    return _next_state(system.assembler, X_prev, x)


def _next_state(assembler: SystemAssembler, X_prev: DiscreteState, x: np.ndarray) -> DiscreteState:
    values = X_prev.values.copy()
    values[assembler.active] = x
    values[assembler.mats.no_flow] = 0.0
    return DiscreteState(values, X_prev.step + 1, X_prev.layout)


def simulate(system: BlockSystem, X0: DiscreteState, N: int,
             loads: Optional[Callable[[int], Load]] = None) -> List[DiscreteState]:
    """
    Advance N steps from X0.

    Args:
        system: Factored block system.
        X0: Initial state.
        N: Number of steps, at least 1.
        loads: Optional callable mapping step n to (L_q, G) at t^n.

    Returns:
        Trajectory [X0, X1, ..., XN].
    """
    if N < 1:
        raise SolverError(f"Number of steps must be at least 1, got {N}")
    trajectory = [X0]
    for n in range(1, N + 1):
        load = loads(n) if loads is not None else None
        trajectory.append(step(system, trajectory[-1], load))
    logger.info(f"Simulated {N} steps with widths {system.widths}")
    return trajectory


# ========== Width updates ==========

class LowRankUpdate:
    """
    Solves with the block matrix for any widths from one factorization.

    Only the fracture flux block depends on the widths, so
    Lambda(d) = Lambda(d_ref) + P D(d) P^T where P selects the fracture
    flux unknowns and D(d) = sum_k (1/(K_gamma d_k) - 1/(K_gamma d_ref_k)) M_k.
    With Z = Lambda(d_ref)^-1 P and S = P^T Z computed once, a solve for
    new widths is x0 - Z (I + D S)^-1 D P^T x0 with x0 the reference
    solution, which is shared by every width for the same right-hand side.
    """

    def __init__(self, assembler: SystemAssembler, reference_widths):
        self.assembler = assembler
        self.reference = assembler.build(reference_widths)
        self.reference_widths = self.reference.widths
        fracture = assembler._fracture
        self.positions = np.unique(np.concatenate([r for r, _, _ in fracture]))
        k = self.positions.size
        self._blocks = []
        for rows, cols, vals in fracture:
            block = np.zeros((k, k))
            np.add.at(block, (np.searchsorted(self.positions, rows),
                              np.searchsorted(self.positions, cols)), vals)
            self._blocks.append(block)

        Z = np.empty((assembler.size, k))
        for j, pos in enumerate(self.positions):
            unit = np.zeros(assembler.size)
            unit[pos] = 1.0
            Z[:, j] = solve(self.reference.factorization, unit)
        self._Z = Z
        self._S = Z[self.positions, :]
        logger.debug(f"Low-rank width update over {k} fracture flux unknowns")

    def coupling(self, widths) -> np.ndarray:
        """Dense D(d) on the fracture flux unknowns."""
        widths = np.atleast_1d(np.asarray(widths, dtype=float))
        if widths.size != len(self._blocks):
            raise SolverError(f"Expected {len(self._blocks)} width(s), got {widths.size}")
        if np.any(~np.isfinite(widths)) or np.any(widths <= 0):
            raise SolverError(f"Widths must be positive and finite, got {widths}")
        K_gamma = self.assembler.mats.coeffs.fracture_conductivity
        D = np.zeros_like(self._S)
        for block, d, d_ref in zip(self._blocks, widths, self.reference_widths):
            D += (1.0 / (K_gamma * d) - 1.0 / (K_gamma * d_ref)) * block
        return D

    def base_solution(self, X_prev: DiscreteState, load: Optional[Load] = None) -> np.ndarray:
        """Reference-width solution for the step after X_prev."""
        return solve(self.reference.factorization, self.reference.rhs(X_prev, load))

    def solve(self, widths, x0: np.ndarray) -> np.ndarray:
        """
        Solution for the given widths from the reference solution x0.

        Raises:
            SingularMatrixError: The small coupling system is singular.
        """
        D = self.coupling(widths)
        if not D.any():
            return x0.copy()
        try:
            w = np.linalg.solve(np.eye(D.shape[0]) + D @ self._S, D @ x0[self.positions])
        except np.linalg.LinAlgError as e:
            raise SingularMatrixError(str(e), context=f"widths={widths}") from e
        x = x0 - self._Z @ w
        if not np.all(np.isfinite(x)):
            raise SolverError("Low-rank update produced non-finite values")
        return x

    def step(self, X_prev: DiscreteState, widths, x0: Optional[np.ndarray] = None,
             load: Optional[Load] = None) -> DiscreteState:
        """One backward Euler step for the given widths."""
        if x0 is None:
            x0 = self.base_solution(X_prev, load)
        return _next_state(self.assembler, X_prev, self.solve(widths, x0))


# ========== Intersections ==========

def apply_intersection_constraints(mats: SystemMatrices, intersection: Intersection) -> SystemMatrices:
    """
    Couple the segment fluxes meeting at a crossing.

    Adds one multiplier unknown with zero storage. Its row is the outward
    flux sum of the incident segment end nodes, and its column puts the
    same multiplier into each of those nodes' flux equations as the shared
    pressure.

    Raises:
        ConstraintError: No crossing at the point, or the point is
            already constrained.
    """
    point = tuple(float(c) for c in intersection.point)
    if point in mats.constrained_points:
        raise ConstraintError(f"Point {point} is already constrained")
    mesh = mats.mesh
    nodes = segment_endpoint_nodes(mesh, point)
    if len(nodes) < 3:
        raise ConstraintError(f"No fracture crossing at {point}; {len(nodes)} segment end(s) meet there")
    dofs = [node_dof(mesh, seg, local) for seg, local, _ in nodes]
    if np.isin(dofs, mats.no_flow).any():
        raise ConstraintError(f"Crossing at {point} has eliminated flux unknowns")

    row = np.zeros((1, mats.layout.n_flux))
    for dof, (_, _, outward) in zip(dofs, nodes):
        row[0, dof] = -outward
    B = sparse.vstack([mats.B, sparse.csr_matrix(row)]).tocsr()
    logger.info(f"Constrained crossing at {point}: {len(nodes)} segment ends")
    return replace(
        mats,
        layout=mats.layout.with_multipliers(1),
        B=B,
        C=np.append(mats.C, 0.0),
        constrained_points=mats.constrained_points + (point,),
    )


def intersection_flux_residual(mats: SystemMatrices, X: DiscreteState) -> np.ndarray:
    """Outward flux sum at every constrained crossing."""
    residuals = []
    for point in mats.constrained_points:
        total = 0.0
        for seg, local, outward in segment_endpoint_nodes(mats.mesh, point):
            total += outward * X.values[node_dof(mats.mesh, seg, local)]
        residuals.append(total)
    return np.array(residuals)


# ========== Diagnostics ==========

def mass_balance_residual(mats: SystemMatrices, X_prev: DiscreteState, X_new: DiscreteState,
                          dt: float, L: Optional[np.ndarray] = None) -> float:
    """
    Relative residual of C (p^n - p^(n-1)) + dt B u^n - dt L over all
    pressure rows.
    """
    layout = mats.layout
    if L is None:
        L = mats.load(X_new.step * dt) if mats.has_sources else np.zeros(layout.n_pressure)
    p_new = X_new.values[layout.n_flux:]
    p_old = X_prev.values[layout.n_flux:]
    u_new = X_new.values[:layout.n_flux]
    storage = mats.C * (p_new - p_old)
    divergence = dt * (mats.B @ u_new)
    residual = storage + divergence - dt * L
    scale = max(np.linalg.norm(mats.C * p_old + dt * L), np.linalg.norm(storage),
                np.linalg.norm(divergence), np.finfo(float).tiny)
    return float(np.linalg.norm(residual) / scale)


def pressure_energy(mats: SystemMatrices, X: DiscreteState) -> float:
    """Weighted pressure norm c_phi(p, p)."""
    p = X.values[mats.layout.n_flux:]
    return float(np.sum(mats.C * p * p))


def pressure_error(mesh: TriangularMesh, X: DiscreteState,
                   exact: Callable[[np.ndarray, np.ndarray, float], np.ndarray], t: float) -> float:
    """Discrete L2 error of the triangle pressures against exact values at centroids."""
    c = mesh.centroids()
    diff = X.pressure - exact(c[:, 0], c[:, 1], t)
    return float(np.sqrt(np.sum(mesh.tri_area * diff ** 2)))


# ========== Manufactured solution ==========

@dataclass(frozen=True)
class ManufacturedProblem:
    """
    Smooth solution p = x(2-x)y(1-y)exp(-t) on (0,2)x(0,1) with a vertical
    fracture at x = 1, where the normal derivative vanishes.
    """
    K_gamma: float = 100.0
    width: float = 1e-3
    phi_gamma: float = 1e-3

    @property
    def case_spec(self) -> dict:
        return {
            "kind": "single",
            "x_range": [0.0, 2.0],
            "y_range": [0.0, 1.0],
            "fractures": [{"orientation": "vertical", "position": 1.0, "width": self.width}],
        }

    @property
    def boundary(self) -> BoundaryConditions:
        return BoundaryConditions(
            default="dirichlet",
            default_value=0.0,
            tips=(TipCondition(0, "start", 0.0), TipCondition(0, "end", 0.0)),
        )

    @staticmethod
    def pressure(x, y, t):
        return x * (2.0 - x) * y * (1.0 - y) * np.exp(-t)

    @staticmethod
    def initial_pressure(x, y):
        return x * (2.0 - x) * y * (1.0 - y)

    @staticmethod
    def source(x, y, t):
        return (-x * (2.0 - x) * y * (1.0 - y)
                + 2.0 * y * (1.0 - y) + 2.0 * x * (2.0 - x)) * np.exp(-t)

    def fracture_source(self, x, y, t):
        return (-self.phi_gamma * y * (1.0 - y)
                + 2.0 * self.K_gamma * self.width) * np.exp(-t)


def manufactured_problem(K_gamma: float = 100.0, width: float = 1e-3,
                         phi_gamma: float = 1e-3) -> ManufacturedProblem:
    return ManufacturedProblem(K_gamma, width, phi_gamma)


# ========== Export ==========

def export_trajectory(trajectory: Sequence[DiscreteState], path: Path, dt: float) -> Path:
    """
    Per-step CSV of the fracture unknowns.

    Columns: step, time, dof, kind, value; kind is fracture_flux or
    fracture_pressure.
    """
    if not trajectory:
        raise SolverError("Empty trajectory")
    layout = trajectory[0].layout
    nodes = np.arange(layout.node_slice.start, layout.node_slice.stop)
    fedges = np.arange(layout.fracture_pressure_slice.start, layout.fracture_pressure_slice.stop)

    def rows():
        for X in trajectory:
            t = X.step * dt
            for dof in nodes:
                yield (X.step, t, int(dof), "fracture_flux", X.values[dof])
            for dof in fedges:
                yield (X.step, t, int(dof), "fracture_pressure", X.values[dof])

    return write_csv(path, ["step", "time", "dof", "kind", "value"], rows())


def dump_field(state: DiscreteState, path: Path) -> Path:
    """Write (element id, value) sections for every unknown block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = [
        ("EDGE_FLUX", state.flux),
        ("FRACTURE_FLUX", state.fracture_flux),
        ("TRIANGLE_PRESSURE", state.pressure),
        ("FRACTURE_PRESSURE", state.fracture_pressure),
        ("MULTIPLIER", state.multipliers),
    ]
    with open(path, "w") as f:
        f.write(f"# step {state.step}\n")
        for name, values in blocks:
            f.write(f"{name} {values.size}\n")
            for k, v in enumerate(values):
                f.write(f"{k} {format_number(v)}\n")
    return path
