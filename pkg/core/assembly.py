"""
Mixed finite element assembly for Fracture Width Filter
Lowest-order Raviart-Thomas fluxes with piecewise-constant pressures on
the subdomains, continuous linear fluxes with piecewise-constant
pressures along each fracture segment.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .constants import BOUNDARY_SIDES, EDGE_BOUNDARY
from .exceptions import AssemblyError, BoundaryConditionError
from .geometry import (TriangularMesh, find_segment_tip, fracture_edge_dof,
                       node_dof)
from .utils import format_number

logger = logging.getLogger(__name__)

SourceFunction = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
InitialFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]

# two-point Gauss rule on [0, 1]
_GAUSS_POINTS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def _as_source(value: Union[None, float, SourceFunction]) -> Optional[SourceFunction]:
    if value is None or callable(value):
        return value
    constant = float(value)
    if constant == 0.0:
        return None
    return lambda x, y, t: np.full(np.shape(x), constant)


@dataclass(frozen=True)
class ModelCoefficients:
    """
    Piecewise-constant model coefficients.

    ``fracture_storage`` is the fracture storage coefficient (width times
    fracture porosity at the reference width); it stays fixed while the
    width under estimation changes.
    """
    conductivity: Tuple[np.ndarray, ...]
    storage: Tuple[float, ...]
    fracture_conductivity: float = 100.0
    fracture_storage: float = 1e-3
    source: Optional[SourceFunction] = None
    fracture_source: Optional[SourceFunction] = None

    @classmethod
    def uniform(
        cls,
        n_subdomains: int,
        K: Optional[Sequence[Sequence[float]]] = None,
        phi: float = 1.0,
        K_gamma: float = 100.0,
        phi_gamma: float = 1e-3,
        source: Union[None, float, SourceFunction] = None,
        fracture_source: Union[None, float, SourceFunction] = None,
    ) -> "ModelCoefficients":
        """Same K and phi on every subdomain."""
        K_arr = np.eye(2) if K is None else np.asarray(K, dtype=float)
        coeffs = cls(
            conductivity=tuple(K_arr.copy() for _ in range(n_subdomains)),
            storage=tuple(float(phi) for _ in range(n_subdomains)),
            fracture_conductivity=float(K_gamma),
            fracture_storage=float(phi_gamma),
            source=_as_source(source),
            fracture_source=_as_source(fracture_source),
        )
        coeffs.validate()
        return coeffs

    def validate(self) -> None:
        for i, K in enumerate(self.conductivity):
            K = np.asarray(K, dtype=float)
            if K.shape != (2, 2) or not np.allclose(K, K.T):
                raise AssemblyError(f"Conductivity of subdomain {i} must be a symmetric 2x2 matrix")
            if np.min(np.linalg.eigvalsh(K)) <= 0:
                raise AssemblyError(f"Conductivity of subdomain {i} is not positive definite")
        if any(phi <= 0 for phi in self.storage):
            raise AssemblyError("Storage coefficients must be positive")
        if self.fracture_conductivity <= 0:
            raise AssemblyError("Fracture conductivity must be positive")
        if self.fracture_storage <= 0:
            raise AssemblyError("Fracture storage coefficient must be positive")


# ========== Boundary data ==========

@dataclass(frozen=True)
class BoundaryPiece:
    """Part of one outer side: coordinate range along the side and a value."""
    side: str
    lo: float
    hi: float
    value: float = 0.0

    def covers(self, side: str, s: float) -> bool:
        return side == self.side and self.lo < s < self.hi


@dataclass(frozen=True)
class TipCondition:
    """Pressure at a fracture tip on the outer boundary."""
    fracture: int
    end: str  # "start" (lower coordinate) or "end"
    value: float


@dataclass(frozen=True)
class BoundaryConditions:
    """
    Outer-boundary and fracture-tip data.

    Outer edges not covered by a piece follow ``default``; fracture tips
    on the outer boundary without a TipCondition are no-flow.
    """
    dirichlet: Tuple[BoundaryPiece, ...] = ()
    no_flow: Tuple[BoundaryPiece, ...] = ()
    tips: Tuple[TipCondition, ...] = ()
    default: str = "no_flow"
    default_value: float = 0.0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BoundaryConditions":
        """
        Build from the ``boundary`` config section.

        Tip values given as the strings "a" or "b" resolve to the
        section's ``a`` and ``b`` entries.
        """
        def piece(entry: Dict[str, Any]) -> BoundaryPiece:
            side = entry.get("side")
            if side not in BOUNDARY_SIDES:
                raise BoundaryConditionError(f"Unknown boundary side '{side}'")
            lo, hi = entry.get("range", [float("-inf"), float("inf")])
            return BoundaryPiece(side, float(lo), float(hi), float(entry.get("value", 0.0)))

        def tip_value(value: Any) -> float:
            if isinstance(value, str):
                if data.get(value) is None:
                    raise BoundaryConditionError(f"Tip value refers to unset boundary parameter '{value}'")
                return float(data[value])
            return float(value)

        default = data.get("default", "no_flow")
        if default not in ("no_flow", "dirichlet"):
            raise BoundaryConditionError(f"Boundary default must be no_flow or dirichlet, got '{default}'")
        tips = []
        for entry in data.get("tips", []):
            if entry.get("end") not in ("start", "end"):
                raise BoundaryConditionError(f"Tip end must be start or end, got '{entry.get('end')}'")
            tips.append(TipCondition(int(entry["fracture"]), entry["end"], tip_value(entry["value"])))
        return cls(
            dirichlet=tuple(piece(e) for e in data.get("dirichlet", [])),
            no_flow=tuple(piece(e) for e in data.get("no_flow", [])),
            tips=tuple(tips),
            default=default,
            default_value=float(data.get("default_value", 0.0) or 0.0),
        )


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Resolved boundary contribution and the eliminated flux unknowns."""
    G: np.ndarray
    no_flow: np.ndarray
    dirichlet: np.ndarray


def _edge_side(mesh: TriangularMesh, e: int) -> Tuple[str, float]:
    x0, x1 = mesh.geometry.x_range
    y0, y1 = mesh.geometry.y_range
    mx, my = mesh.edge_midpoint[e]
    tol = 1e-9 * mesh.h
    if abs(mx - x0) < tol:
        return "left", my
    if abs(mx - x1) < tol:
        return "right", my
    if abs(my - y0) < tol:
        return "bottom", mx
    return "top", mx


def resolve_boundary(mesh: TriangularMesh, bc: BoundaryConditions) -> BoundaryData:
    """
    Turn boundary pieces into the flux-equation vector G and the list of
    no-flow flux unknowns.

    Raises:
        BoundaryConditionError: An edge is both Dirichlet and no-flow, two
            Dirichlet pieces disagree on an edge, or a tip is unknown.
    """
    layout = mesh.layout
    G = np.zeros(layout.n_flux)
    no_flow: List[int] = []
    dirichlet: List[int] = []

    for e in np.flatnonzero(mesh.edge_kind == EDGE_BOUNDARY):
        side, s = _edge_side(mesh, e)
        d_hits = [p for p in bc.dirichlet if p.covers(side, s)]
        n_hits = [p for p in bc.no_flow if p.covers(side, s)]
        if d_hits and n_hits:
            raise BoundaryConditionError(
                f"Edge {e} on the {side} side at {s:.4g} is both Dirichlet and no-flow"
            )
        if len({p.value for p in d_hits}) > 1:
            raise BoundaryConditionError(f"Edge {e} on the {side} side has conflicting Dirichlet values")
        if d_hits:
            value = d_hits[0].value
        elif n_hits or bc.default == "no_flow":
            no_flow.append(int(e))
            continue
        else:
            value = bc.default_value
        G[e] = -value * mesh.edge_owner_sign[e] * mesh.edge_length[e]
        dirichlet.append(int(e))

    tip_nodes: Dict[int, float] = {}
    for tip in bc.tips:
        found = find_segment_tip(mesh, tip.fracture, tip.end)
        if found is None:
            raise BoundaryConditionError(f"Tip condition for unknown fracture {tip.fracture}")
        seg_id, local, outward = found
        seg_geo = mesh.geometry.segments[seg_id]
        point = seg_geo.start if local == 0 else seg_geo.end
        if not _on_outer_boundary(mesh, point):
            raise BoundaryConditionError(
                f"Tip {tip.end} of fracture {tip.fracture} is not on the outer boundary"
            )
        dof = node_dof(mesh, seg_id, local)
        if dof in tip_nodes:
            raise BoundaryConditionError(f"Duplicate tip condition for fracture {tip.fracture} {tip.end}")
        tip_nodes[dof] = tip.value
        G[dof] = -tip.value * outward

    for frac in mesh.geometry.fractures:
        for end in ("start", "end"):
            seg_id, local, _ = find_segment_tip(mesh, frac.fracture_id, end)
            seg_geo = mesh.geometry.segments[seg_id]
            point = seg_geo.start if local == 0 else seg_geo.end
            dof = node_dof(mesh, seg_id, local)
            if dof not in tip_nodes and _on_outer_boundary(mesh, point):
                no_flow.append(dof)

    logger.debug(
        f"Boundary resolved: {len(dirichlet)} Dirichlet edges, {len(tip_nodes)} tip conditions, "
        f"{len(no_flow)} no-flow unknowns"
    )
    return BoundaryData(
        G=G,
        no_flow=np.array(sorted(no_flow), dtype=np.int64),
        dirichlet=np.array(dirichlet, dtype=np.int64),
    )


def _on_outer_boundary(mesh: TriangularMesh, point: Tuple[float, float]) -> bool:
    x0, x1 = mesh.geometry.x_range
    y0, y1 = mesh.geometry.y_range
    tol = 1e-9 * mesh.h
    return (abs(point[0] - x0) < tol or abs(point[0] - x1) < tol or
            abs(point[1] - y0) < tol or abs(point[1] - y1) < tol)


# ========== Matrices ==========

def _inverse_conductivity(mesh: TriangularMesh, coeffs: ModelCoefficients) -> np.ndarray:
    per_sub = np.array([np.linalg.inv(np.asarray(K, dtype=float)) for K in coeffs.conductivity])
    if per_sub.shape[0] < len(mesh.geometry.subdomains):
        raise AssemblyError(
            f"{per_sub.shape[0]} conductivities for {len(mesh.geometry.subdomains)} subdomains"
        )
    return per_sub[mesh.tri_subdomain]


def element_basis_values(points: np.ndarray, signs: np.ndarray, area: np.ndarray) -> np.ndarray:
    """
    RT0 basis functions evaluated at the three edge midpoints.

    phi_i(x) = s_i |e_i| / (2|K|) (x - P_i), where edge i is opposite P_i.

    Args:
        points: Triangle vertices, shape (nt, 3, 2).
        signs: Orientation signs, shape (nt, 3).
        area: Triangle areas, shape (nt,).

    Returns:
        Array (nt, i, q, 2): basis i at midpoint q.
    """
    opposite = np.roll(points, -1, axis=1) - np.roll(points, -2, axis=1)
    lengths = np.hypot(opposite[..., 0], opposite[..., 1])
    midpoints = 0.5 * (np.roll(points, -1, axis=1) + np.roll(points, -2, axis=1))
    scale = signs * lengths / (2.0 * area[:, None])
    diff = midpoints[:, None, :, :] - points[:, :, None, :]
    return scale[:, :, None, None] * diff


def element_flux_mass(points: np.ndarray, signs: np.ndarray, area: np.ndarray,
                      K_inv: np.ndarray) -> np.ndarray:
    """
    Local RT0 mass matrices (K^-1 phi_j, phi_i) by edge-midpoint quadrature,
    exact for the quadratic integrand.

    Returns:
        Array (nt, 3, 3).
    """
    phi = element_basis_values(points, signs, area)
    return (area / 3.0)[:, None, None] * np.einsum("tiqa,tab,tjqb->tij", phi, K_inv, phi)


def _subdomain_flux_mass(mesh: TriangularMesh, coeffs: ModelCoefficients) -> sparse.csr_matrix:
    n = mesh.layout.n_flux
    local = element_flux_mass(mesh.triangle_points(), mesh.tri_signs, mesh.tri_area,
                              _inverse_conductivity(mesh, coeffs))
    rows = np.repeat(mesh.tri_edges[:, :, None], 3, axis=2)
    cols = np.repeat(mesh.tri_edges[:, None, :], 3, axis=1)
    return sparse.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()


def _fracture_flux_mass(mesh: TriangularMesh, fracture_id: int) -> sparse.csr_matrix:
    """Unit-coefficient 1D flux mass of one fracture: (l/6)[[2,1],[1,2]] per edge."""
    n = mesh.layout.n_flux
    rows, cols, vals = [], [], []
    local = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    for seg in mesh.segments:
        if seg.fracture_id != fracture_id:
            continue
        first = mesh.layout.n_edge + seg.node_offset
        idx = first + np.column_stack([np.arange(seg.n_edges), np.arange(1, seg.n_edges + 1)])
        rows.append(np.repeat(idx[:, :, None], 2, axis=2).ravel())
        cols.append(np.repeat(idx[:, None, :], 2, axis=1).ravel())
        vals.append((seg.lengths[:, None, None] * local[None]).ravel())
    if not rows:
        return sparse.csr_matrix((n, n))
    return sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()


def _check_widths(mesh: TriangularMesh, widths) -> np.ndarray:
    widths = np.atleast_1d(np.asarray(widths, dtype=float))
    n_frac = len(mesh.geometry.fractures)
    if widths.size != n_frac:
        raise AssemblyError(f"Expected {n_frac} width(s), got {widths.size}")
    if np.any(~np.isfinite(widths)) or np.any(widths <= 0):
        raise AssemblyError(f"Widths must be positive and finite, got {widths}")
    return widths


def assemble_A(mesh: TriangularMesh, coeffs: ModelCoefficients, widths) -> sparse.csr_matrix:
    """
    Flux-flux matrix: subdomain RT0 mass with K^-1 plus the fracture flux
    mass scaled by 1/(K_gamma d_k) for each fracture k.

    Args:
        mesh: Mesh.
        coeffs: Model coefficients.
        widths: One width per fracture.

    Returns:
        Sparse symmetric matrix of size n_flux.
    """
    coeffs.validate()
    widths = _check_widths(mesh, widths)
    A = _subdomain_flux_mass(mesh, coeffs)
    for k, d in enumerate(widths):
        A = A + _fracture_flux_mass(mesh, k) / (coeffs.fracture_conductivity * d)
    return A.tocsr()


def assemble_B(mesh: TriangularMesh) -> sparse.csr_matrix:
    """
    Divergence and interface coupling, pressure rows by flux columns.

    Triangle rows hold s|e| for their three edges. Fracture edge rows hold
    the 1D divergence (-1 at the start node, +1 at the end node) minus the
    normal trace s|E| of the 2D flux unknown on each side.
    """
    layout = mesh.layout
    rows = [np.repeat(np.arange(layout.n_tri), 3)]
    cols = [mesh.tri_edges.ravel()]
    vals = [(mesh.tri_signs * mesh.edge_length[mesh.tri_edges]).ravel()]

    for seg in mesh.segments:
        k = np.arange(seg.n_edges)
        frow = layout.n_tri + seg.edge_offset + k
        first = layout.n_edge + seg.node_offset
        rows += [frow, frow]
        cols += [first + k, first + k + 1]
        vals += [-np.ones(seg.n_edges), np.ones(seg.n_edges)]
        for side in range(2):
            edges = seg.side_edges[side]
            rows.append(frow)
            cols.append(edges)
            vals.append(-mesh.edge_owner_sign[edges] * seg.lengths)

    n_rows = layout.n_tri + layout.n_fedge
    return sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rows, layout.n_flux),
    ).tocsr()


def mass_diagonal(mesh: TriangularMesh, coeffs: ModelCoefficients) -> np.ndarray:
    """Diagonal of the pressure mass matrix: phi|K| per triangle, phi_gamma|E| per fracture edge."""
    phi = np.asarray(coeffs.storage, dtype=float)[mesh.tri_subdomain]
    frac = np.concatenate([seg.lengths for seg in mesh.segments]) if mesh.segments else np.zeros(0)
    return np.concatenate([phi * mesh.tri_area, coeffs.fracture_storage * frac])


def assemble_C(mesh: TriangularMesh, coeffs: ModelCoefficients) -> sparse.dia_matrix:
    """Diagonal pressure mass matrix."""
    coeffs.validate()
    return sparse.diags(mass_diagonal(mesh, coeffs))


def source_vector(mesh: TriangularMesh, coeffs: ModelCoefficients, t: float) -> np.ndarray:
    """Cell integrals of q on triangles and of q_gamma on fracture edges."""
    layout = mesh.layout
    L = np.zeros(layout.n_tri + layout.n_fedge)
    if coeffs.source is not None:
        pts = mesh.triangle_points()
        mids = 0.5 * (np.roll(pts, -1, axis=1) + np.roll(pts, -2, axis=1))
        values = coeffs.source(mids[..., 0], mids[..., 1], t)
        L[:layout.n_tri] = mesh.tri_area / 3.0 * np.sum(values, axis=1)
    if coeffs.fracture_source is not None and mesh.segments:
        a = np.concatenate([mesh.vertices[s.nodes[:-1]] for s in mesh.segments])
        b = np.concatenate([mesh.vertices[s.nodes[1:]] for s in mesh.segments])
        lengths = np.concatenate([s.lengths for s in mesh.segments])
        total = np.zeros(lengths.size)
        for g in _GAUSS_POINTS:
            x = a + g * (b - a)
            total += coeffs.fracture_source(x[:, 0], x[:, 1], t)
        L[layout.n_tri:] = 0.5 * lengths * total
    return L


def assemble_load(coeffs: ModelCoefficients, mesh: TriangularMesh, t: float,
                  bc: BoundaryConditions) -> Tuple[np.ndarray, np.ndarray]:
    """
    Source and boundary vectors at time t.

    Returns:
        (L_q over pressure unknowns without multipliers, G over flux unknowns).
        G is zero on the no-flow unknowns, which the forward solver eliminates.
    """
    return source_vector(mesh, coeffs, t), resolve_boundary(mesh, bc).G


def initial_state(mesh: TriangularMesh, p0: Union[float, InitialFunction] = 0.0,
                  p0_gamma: Union[None, float, InitialFunction] = None) -> np.ndarray:
    """
    Initial unknown vector: cell averages of the initial pressure, zero flux.

    Args:
        mesh: Mesh.
        p0: Initial matrix pressure, constant or callable (x, y).
        p0_gamma: Initial fracture pressure; defaults to p0.

    Returns:
        Vector over the mesh layout (no multipliers).
    """
    layout = mesh.layout
    X = np.zeros(layout.size)
    p0_gamma = p0 if p0_gamma is None else p0_gamma

    if callable(p0):
        pts = mesh.triangle_points()
        mids = 0.5 * (np.roll(pts, -1, axis=1) + np.roll(pts, -2, axis=1))
        X[layout.triangle_slice] = np.mean(p0(mids[..., 0], mids[..., 1]), axis=1)
    else:
        X[layout.triangle_slice] = float(p0)

    if callable(p0_gamma) and mesh.segments:
        a = np.concatenate([mesh.vertices[s.nodes[:-1]] for s in mesh.segments])
        b = np.concatenate([mesh.vertices[s.nodes[1:]] for s in mesh.segments])
        avg = np.zeros(a.shape[0])
        for g in _GAUSS_POINTS:
            x = a + g * (b - a)
            avg += 0.5 * p0_gamma(x[:, 0], x[:, 1])
        X[layout.fracture_pressure_slice] = avg
    elif not callable(p0_gamma):
        X[layout.fracture_pressure_slice] = float(p0_gamma)
    return X


# ========== Bundled system ==========

@dataclass(frozen=True, eq=False)
class SystemMatrices:
    """
    Everything the forward solver needs that does not depend on the widths.

    A(d) = flux_mass + sum_k fracture_mass[k] / (K_gamma d_k).
    """
    mesh: TriangularMesh
    coeffs: ModelCoefficients
    layout: Any
    flux_mass: sparse.csr_matrix
    fracture_mass: Tuple[sparse.csr_matrix, ...]
    B: sparse.csr_matrix
    C: np.ndarray
    G: np.ndarray
    no_flow: np.ndarray
    constrained_points: Tuple[Tuple[float, float], ...] = field(default=())

    def flux_matrix(self, widths) -> sparse.csr_matrix:
        widths = _check_widths(self.mesh, widths)
        A = self.flux_mass.copy()
        for mass, d in zip(self.fracture_mass, widths):
            A = A + mass / (self.coeffs.fracture_conductivity * d)
        return A.tocsr()

    def load(self, t: float) -> np.ndarray:
        """Source vector over all pressure unknowns, multipliers included."""
        L = np.zeros(self.layout.n_pressure)
        base = source_vector(self.mesh, self.coeffs, t)
        L[:base.size] = base
        return L

    @property
    def has_sources(self) -> bool:
        return self.coeffs.source is not None or self.coeffs.fracture_source is not None


def assemble_system(mesh: TriangularMesh, coeffs: ModelCoefficients,
                    bc: BoundaryConditions) -> SystemMatrices:
    """
    Assemble the width-independent pieces of the block system.

    Args:
        mesh: Mesh.
        coeffs: Model coefficients.
        bc: Boundary conditions.

    Returns:
        SystemMatrices over the mesh layout.
    """
    coeffs.validate()
    boundary = resolve_boundary(mesh, bc)
    mats = SystemMatrices(
        mesh=mesh,
        coeffs=coeffs,
        layout=mesh.layout,
        flux_mass=_subdomain_flux_mass(mesh, coeffs),
        fracture_mass=tuple(_fracture_flux_mass(mesh, f.fracture_id) for f in mesh.geometry.fractures),
        B=assemble_B(mesh),
        C=mass_diagonal(mesh, coeffs),
        G=boundary.G,
        no_flow=boundary.no_flow,
    )
    logger.info(
        f"Assembled system: {mesh.layout.n_flux} flux and {mesh.layout.n_pressure} pressure unknowns, "
        f"{mats.no_flow.size} eliminated no-flow unknowns"
    )
    return mats


def dump_matrix(matrix: sparse.spmatrix, path: Path) -> Path:
    """Write a sparse matrix as (row, col, value) lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coo = sparse.coo_matrix(matrix)
    with open(path, "w") as f:
        f.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{r} {c} {format_number(v)}\n")
    return path
