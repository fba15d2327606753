"""
Fractured domain geometry and structured meshing for Fracture Width Filter
Builds rectangular domains cut by axis-aligned fractures and generates
uniform triangulations whose subdomain meshes match along every fracture.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constants import (EDGE_BOUNDARY, EDGE_FRACTURE, EDGE_INTERIOR,
                        GEOMETRY_KINDS, MAX_WIDTH_FRACTION)
from .exceptions import GeometryError, MeshError
from .utils import format_number

logger = logging.getLogger(__name__)

Point = Tuple[float, float]


# ========== Geometry ==========

@dataclass(frozen=True)
class Fracture:
    """Full-span fracture line with its true width."""
    fracture_id: int
    orientation: str  # "vertical" or "horizontal"
    position: float
    width: float


@dataclass(frozen=True)
class FractureSegment:
    """
    Piece of a fracture between crossings or the domain boundary.

    The fixed normal is +x on vertical segments and +y on horizontal ones;
    ``sides[0]`` is the subdomain it points out of.
    """
    segment_id: int
    fracture_id: int
    orientation: str
    start: Point
    end: Point
    sides: Tuple[int, int]

    @property
    def length(self) -> float:
        return float(np.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1]))


@dataclass(frozen=True)
class Subdomain:
    subdomain_id: int
    x_range: Tuple[float, float]
    y_range: Tuple[float, float]

    @property
    def area(self) -> float:
        return (self.x_range[1] - self.x_range[0]) * (self.y_range[1] - self.y_range[0])


@dataclass(frozen=True)
class Intersection:
    """Crossing point and the segments that end there."""
    point: Point
    segment_ids: Tuple[int, ...]


@dataclass(frozen=True)
class FractureGeometry:
    kind: str
    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    fractures: Tuple[Fracture, ...]
    segments: Tuple[FractureSegment, ...]
    subdomains: Tuple[Subdomain, ...]
    intersections: Tuple[Intersection, ...]
    x_cuts: Tuple[float, ...]
    y_cuts: Tuple[float, ...]

    @property
    def widths(self) -> np.ndarray:
        """True widths ordered by fracture id."""
        return np.array([f.width for f in self.fractures], dtype=float)

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.x_range[1] - self.x_range[0],
                              self.y_range[1] - self.y_range[0]))

    def segments_of(self, fracture_id: int) -> List[FractureSegment]:
        return [s for s in self.segments if s.fracture_id == fracture_id]


_EXPECTED_FRACTURES = {
    "plain": lambda fr: len(fr) == 0,
    "single": lambda fr: len(fr) == 1,
    "parallel": lambda fr: len(fr) == 2 and fr[0].orientation == fr[1].orientation,
    "intersecting": lambda fr: len(fr) == 2 and fr[0].orientation != fr[1].orientation,
}


def build_geometry(case_spec: Dict[str, Any]) -> FractureGeometry:
    """
    Build a fractured rectangular domain from a case descriptor.

    Args:
        case_spec: Dictionary with ``kind`` (plain, single, parallel,
            intersecting), ``x_range``, ``y_range`` and ``fractures``, a
            list of {orientation, position, width}.

    Returns:
        FractureGeometry with subdomains, segments and intersections.

    Raises:
        GeometryError: Bad kind, non-positive or oversized width, or a
            fracture outside the domain.
    """
    kind = case_spec.get("kind", "single")
    if kind not in GEOMETRY_KINDS:
        raise GeometryError(f"Unknown geometry kind '{kind}'; choose from {GEOMETRY_KINDS}")

    x0, x1 = (float(v) for v in case_spec.get("x_range", (0.0, 1.0)))
    y0, y1 = (float(v) for v in case_spec.get("y_range", (0.0, 1.0)))
    if not (x1 > x0 and y1 > y0):
        raise GeometryError(f"Empty domain ({x0}, {x1}) x ({y0}, {y1})")
    diameter = float(np.hypot(x1 - x0, y1 - y0))

    fractures: List[Fracture] = []
    for i, entry in enumerate(case_spec.get("fractures", [])):
        orientation = entry.get("orientation")
        if orientation not in ("vertical", "horizontal"):
            raise GeometryError(f"Fracture {i}: orientation must be vertical or horizontal")
        position = float(entry["position"])
        width = float(entry["width"])
        lo, hi = (x0, x1) if orientation == "vertical" else (y0, y1)
        if not lo < position < hi:
            raise GeometryError(
                f"Fracture {i}: position {position} lies outside the domain ({lo}, {hi})"
            )
        if width <= 0:
            raise GeometryError(f"Fracture {i}: width must be positive, got {width}")
        if width >= MAX_WIDTH_FRACTION * diameter:
            raise GeometryError(
                f"Fracture {i}: width {width} is not small against the domain diameter {diameter:.3g}"
            )
        fractures.append(Fracture(i, orientation, position, width))

    if not _EXPECTED_FRACTURES[kind](fractures):
        raise GeometryError(f"Geometry kind '{kind}' does not match {len(fractures)} fracture(s)")

    x_cuts = sorted({x0, x1, *(f.position for f in fractures if f.orientation == "vertical")})
    y_cuts = sorted({y0, y1, *(f.position for f in fractures if f.orientation == "horizontal")})
    if len(x_cuts) - 2 != sum(f.orientation == "vertical" for f in fractures) or \
            len(y_cuts) - 2 != sum(f.orientation == "horizontal" for f in fractures):
        raise GeometryError("Two fractures share the same line")

    nsx = len(x_cuts) - 1
    subdomains = tuple(
        Subdomain(iy * nsx + ix, (x_cuts[ix], x_cuts[ix + 1]), (y_cuts[iy], y_cuts[iy + 1]))
        for iy in range(len(y_cuts) - 1)
        for ix in range(nsx)
    )

    segments: List[FractureSegment] = []
    for frac in fractures:
        if frac.orientation == "vertical":
            ix = x_cuts.index(frac.position)
            for iy in range(len(y_cuts) - 1):
                segments.append(FractureSegment(
                    segment_id=len(segments),
                    fracture_id=frac.fracture_id,
                    orientation="vertical",
                    start=(frac.position, y_cuts[iy]),
                    end=(frac.position, y_cuts[iy + 1]),
                    sides=(iy * nsx + ix - 1, iy * nsx + ix),
                ))
        else:
            iy = y_cuts.index(frac.position)
            for ix in range(nsx):
                segments.append(FractureSegment(
                    segment_id=len(segments),
                    fracture_id=frac.fracture_id,
                    orientation="horizontal",
                    start=(x_cuts[ix], frac.position),
                    end=(x_cuts[ix + 1], frac.position),
                    sides=((iy - 1) * nsx + ix, iy * nsx + ix),
                ))

    intersections: List[Intersection] = []
    for v in (f for f in fractures if f.orientation == "vertical"):
        for hz in (f for f in fractures if f.orientation == "horizontal"):
            point = (v.position, hz.position)
            incident = tuple(
                s.segment_id for s in segments
                if s.fracture_id in (v.fracture_id, hz.fracture_id)
                and (s.start == point or s.end == point)
            )
            intersections.append(Intersection(point, incident))

    geometry = FractureGeometry(
        kind=kind,
        x_range=(x0, x1),
        y_range=(y0, y1),
        fractures=tuple(fractures),
        segments=tuple(segments),
        subdomains=subdomains,
        intersections=tuple(intersections),
        x_cuts=tuple(x_cuts),
        y_cuts=tuple(y_cuts),
    )
    logger.info(
        f"Built {kind} geometry: {len(subdomains)} subdomains, {len(segments)} segments, "
        f"{len(intersections)} intersections"
    )
    return geometry


# ========== Mesh ==========

@dataclass(frozen=True, eq=False)
class SegmentMesh:
    """
    1D element set along one fracture segment.

    ``side_edges[0, k]`` and ``side_edges[1, k]`` are the 2D edges of the
    two adjacent subdomains that coincide with fracture edge k.
    """
    segment_id: int
    fracture_id: int
    nodes: np.ndarray
    lengths: np.ndarray
    side_edges: np.ndarray
    node_offset: int
    edge_offset: int

    @property
    def n_edges(self) -> int:
        return int(self.lengths.size)


@dataclass(frozen=True)
class DofLayout:
    """
    Unknown ordering: [2D edge fluxes | fracture node fluxes |
    triangle pressures | fracture edge pressures | intersection multipliers].
    """
    n_edge: int
    n_node: int
    n_tri: int
    n_fedge: int
    n_mult: int = 0

    @property
    def n_flux(self) -> int:
        return self.n_edge + self.n_node

    @property
    def n_pressure(self) -> int:
        return self.n_tri + self.n_fedge + self.n_mult

    @property
    def size(self) -> int:
        return self.n_flux + self.n_pressure

    @property
    def node_slice(self) -> slice:
        return slice(self.n_edge, self.n_flux)

    @property
    def triangle_slice(self) -> slice:
        return slice(self.n_flux, self.n_flux + self.n_tri)

    @property
    def fracture_pressure_slice(self) -> slice:
        start = self.n_flux + self.n_tri
        return slice(start, start + self.n_fedge)

    @property
    def multiplier_slice(self) -> slice:
        start = self.n_flux + self.n_tri + self.n_fedge
        return slice(start, start + self.n_mult)

    def observed_indices(self) -> np.ndarray:
        """Fracture flux nodes then fracture edge pressures."""
        return np.concatenate([
            np.arange(self.n_edge, self.n_flux),
            np.arange(self.n_flux + self.n_tri, self.n_flux + self.n_tri + self.n_fedge),
        ])

    def fracture_indices(self) -> np.ndarray:
        """Observed fracture unknowns plus intersection multipliers."""
        return np.concatenate([
            self.observed_indices(),
            np.arange(self.multiplier_slice.start, self.multiplier_slice.stop),
        ])

    def with_multipliers(self, count: int) -> "DofLayout":
        return replace(self, n_mult=self.n_mult + count)


@dataclass(frozen=True, eq=False)
class TriangularMesh:
    geometry: FractureGeometry
    h: float
    vertices: np.ndarray
    triangles: np.ndarray
    tri_subdomain: np.ndarray
    tri_area: np.ndarray
    tri_edges: np.ndarray
    tri_signs: np.ndarray
    edge_vertices: np.ndarray
    edge_subdomain: np.ndarray
    edge_length: np.ndarray
    edge_midpoint: np.ndarray
    edge_kind: np.ndarray
    edge_segment: np.ndarray
    edge_owner_sign: np.ndarray
    segments: Tuple[SegmentMesh, ...]
    layout: DofLayout
    shape: Tuple[int, int] = field(default=(0, 0))

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edge_vertices.shape[0])

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    def triangle_points(self) -> np.ndarray:
        """Vertex coordinates per triangle, shape (nt, 3, 2)."""
        return self.vertices[self.triangles]

    def centroids(self) -> np.ndarray:
        return self.triangle_points().mean(axis=1)

    def fracture_edge_midpoints(self) -> np.ndarray:
        return np.concatenate([
            0.5 * (self.vertices[s.nodes[:-1]] + self.vertices[s.nodes[1:]])
            for s in self.segments
        ]) if self.segments else np.zeros((0, 2))


def _grid_count(lo: float, hi: float, h: float, cuts: Sequence[float], axis: str) -> int:
    count = int(round((hi - lo) / h))
    for c in cuts:
        k = (c - lo) / h
        if abs(k - round(k)) > 1e-8 or count < 1:
            raise MeshError(f"Mesh size h={h} does not tile the {axis}-cut at {c}")
    return count


def generate_mesh(geometry: FractureGeometry, h: float) -> TriangularMesh:
    """
    Uniform structured triangulation of a fractured geometry.

    Every grid square is split along its lower-left to upper-right
    diagonal. Edges are numbered per subdomain, so a fracture edge carries
    one flux unknown on each side.

    Args:
        geometry: Fractured domain.
        h: Grid spacing; must tile every subdomain.

    Returns:
        Immutable TriangularMesh with its DOF layout.

    Raises:
        MeshError: h does not tile the geometry.
    """
    if h <= 0:
        raise MeshError(f"Mesh size must be positive, got {h}")
    x0, x1 = geometry.x_range
    y0, y1 = geometry.y_range
    nx = _grid_count(x0, x1, h, geometry.x_cuts, "x")
    ny = _grid_count(y0, y1, h, geometry.y_cuts, "y")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    # snap cut coordinates so fracture lines match vertex coordinates exactly
    for c in geometry.x_cuts:
        xs[int(round((c - x0) / h))] = c
    for c in geometry.y_cuts:
        ys[int(round((c - y0) / h))] = c
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.column_stack([gx.ravel(), gy.ravel()])
    nv = vertices.shape[0]

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    ii, jj = ii.ravel(), jj.ravel()
    v00 = jj * (nx + 1) + ii
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * ii.size, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    nsx = len(geometry.x_cuts) - 1
    cx = np.repeat(xs[ii] + 0.5 * h, 2)
    cy = np.repeat(ys[jj] + 0.5 * h, 2)
    sub_ix = np.searchsorted(geometry.x_cuts, cx) - 1
    sub_iy = np.searchsorted(geometry.y_cuts, cy) - 1
    tri_subdomain = sub_iy * nsx + sub_ix
    order = np.argsort(tri_subdomain, kind="stable")
    triangles = triangles[order]
    tri_subdomain = tri_subdomain[order]

    pts = vertices[triangles]
    tri_area = 0.5 * ((pts[:, 1, 0] - pts[:, 0, 0]) * (pts[:, 2, 1] - pts[:, 0, 1])
                      - (pts[:, 2, 0] - pts[:, 0, 0]) * (pts[:, 1, 1] - pts[:, 0, 1]))
    if np.any(tri_area <= 0):
        raise MeshError("Generated triangle with non-positive signed area")

    # local edge k is opposite local vertex k
    a = triangles[:, [1, 2, 0]]
    b = triangles[:, [2, 0, 1]]
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    sub = np.repeat(tri_subdomain[:, None], 3, axis=1)
    keys = (sub.astype(np.int64) * nv + lo) * nv + hi
    unique_keys, inverse = np.unique(keys.ravel(), return_inverse=True)
    tri_edges = inverse.reshape(-1, 3)
    n_edges = unique_keys.size

    edge_hi = unique_keys % nv
    edge_lo = (unique_keys // nv) % nv
    edge_subdomain = unique_keys // (nv * nv)
    edge_vertices = np.column_stack([edge_lo, edge_hi])
    p_lo = vertices[edge_lo]
    p_hi = vertices[edge_hi]
    tangent = p_hi - p_lo
    edge_length = np.hypot(tangent[:, 0], tangent[:, 1])
    edge_midpoint = 0.5 * (p_lo + p_hi)
    normal = np.column_stack([tangent[:, 1], -tangent[:, 0]])

    # +1 where the global edge normal points out of the triangle
    opposite = pts
    rel = opposite - p_lo[tri_edges]
    dots = np.einsum("tka,tka->tk", rel, normal[tri_edges])
    tri_signs = np.where(dots < 0, 1.0, -1.0)

    count = np.bincount(tri_edges.ravel(), minlength=n_edges)
    if np.any(count > 2):
        raise MeshError("Edge shared by more than two triangles")
    edge_owner_sign = np.zeros(n_edges)
    single = count[tri_edges] == 1
    edge_owner_sign[tri_edges[single]] = tri_signs[single]

    tol = 1e-9 * h
    mx, my = edge_midpoint[:, 0], edge_midpoint[:, 1]
    on_outer = (np.abs(mx - x0) < tol) | (np.abs(mx - x1) < tol) | \
               (np.abs(my - y0) < tol) | (np.abs(my - y1) < tol)
    edge_kind = np.full(n_edges, EDGE_INTERIOR, dtype=np.int8)
    edge_segment = np.full(n_edges, -1, dtype=np.int64)
    edge_kind[(count == 1) & on_outer] = EDGE_BOUNDARY

    key_lookup = unique_keys
    segment_meshes: List[SegmentMesh] = []
    node_offset = 0
    edge_offset = 0
    for seg in geometry.segments:
        if seg.orientation == "vertical":
            i = int(round((seg.start[0] - x0) / h))
            j0 = int(round((seg.start[1] - y0) / h))
            j1 = int(round((seg.end[1] - y0) / h))
            nodes = np.arange(j0, j1 + 1) * (nx + 1) + i
        else:
            j = int(round((seg.start[1] - y0) / h))
            i0 = int(round((seg.start[0] - x0) / h))
            i1 = int(round((seg.end[0] - x0) / h))
            nodes = j * (nx + 1) + np.arange(i0, i1 + 1)
        e_lo = np.minimum(nodes[:-1], nodes[1:])
        e_hi = np.maximum(nodes[:-1], nodes[1:])
        side_edges = np.empty((2, e_lo.size), dtype=np.int64)
        for side, sub_id in enumerate(seg.sides):
            wanted = (np.int64(sub_id) * nv + e_lo) * nv + e_hi
            found = np.searchsorted(key_lookup, wanted)
            if np.any(found >= n_edges) or np.any(key_lookup[np.minimum(found, n_edges - 1)] != wanted):
                raise MeshError(f"Segment {seg.segment_id}: trace edges missing on subdomain {sub_id}")
            side_edges[side] = found
        if np.any(count[side_edges] != 1):
            raise MeshError(f"Segment {seg.segment_id}: trace edge shared inside a subdomain")
        edge_kind[side_edges.ravel()] = EDGE_FRACTURE
        edge_segment[side_edges.ravel()] = seg.segment_id
        lengths = np.hypot(*(vertices[nodes[1:]] - vertices[nodes[:-1]]).T)
        for arr in (nodes, lengths, side_edges):
            arr.setflags(write=False)
        segment_meshes.append(SegmentMesh(
            segment_id=seg.segment_id,
            fracture_id=seg.fracture_id,
            nodes=nodes,
            lengths=lengths,
            side_edges=side_edges,
            node_offset=node_offset,
            edge_offset=edge_offset,
        ))
        node_offset += nodes.size
        edge_offset += lengths.size

    dangling = (count == 1) & (edge_kind == EDGE_INTERIOR)
    if np.any(dangling):
        raise MeshError(f"{int(dangling.sum())} edges with one triangle lie neither on the boundary nor a fracture")

    layout = DofLayout(
        n_edge=n_edges,
        n_node=node_offset,
        n_tri=triangles.shape[0],
        n_fedge=edge_offset,
    )
    arrays = dict(
        vertices=vertices, triangles=triangles, tri_subdomain=tri_subdomain,
        tri_area=tri_area, tri_edges=tri_edges, tri_signs=tri_signs,
        edge_vertices=edge_vertices, edge_subdomain=edge_subdomain,
        edge_length=edge_length, edge_midpoint=edge_midpoint, edge_kind=edge_kind,
        edge_segment=edge_segment, edge_owner_sign=edge_owner_sign,
    )
    for arr in arrays.values():
        arr.setflags(write=False)

    mesh = TriangularMesh(
        geometry=geometry,
        h=float(h),
        segments=tuple(segment_meshes),
        layout=layout,
        shape=(nx, ny),
        **arrays,
    )
    logger.info(
        f"Generated mesh h={h:g}: {mesh.n_triangles} triangles, {mesh.n_edges} edges, "
        f"{layout.n_fedge} fracture edges, {layout.size} unknowns"
    )
    return mesh


# ========== Checks and dumps ==========

def check_conformity(mesh: TriangularMesh) -> Dict[int, bool]:
    """
    Compare the trace edge sets the two adjacent subdomains induce on
    each fracture segment.

    Returns:
        Mapping segment id -> True when both sides carry the same edges.
    """
    result: Dict[int, bool] = {}
    for seg in mesh.segments:
        traces = []
        for side in range(2):
            pairs = mesh.edge_vertices[seg.side_edges[side]]
            traces.append({(int(a), int(b)) for a, b in pairs})
        result[seg.segment_id] = traces[0] == traces[1]
    return result


def subdomain_areas(mesh: TriangularMesh) -> np.ndarray:
    """Sum of triangle areas per subdomain."""
    return np.bincount(mesh.tri_subdomain, weights=mesh.tri_area,
                       minlength=len(mesh.geometry.subdomains))


def dump_mesh(mesh: TriangularMesh, path: Path) -> Path:
    """
    Write vertices, triangles and fracture edges as plain text.

    Args:
        mesh: Mesh to dump.
        path: Output file.

    Returns:
        Path written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"VERTICES {mesh.n_vertices}\n")
        for k, (x, y) in enumerate(mesh.vertices):
            f.write(f"{k} {format_number(x)} {format_number(y)}\n")
        f.write(f"TRIANGLES {mesh.n_triangles}\n")
        for k, (tri, sub) in enumerate(zip(mesh.triangles, mesh.tri_subdomain)):
            f.write(f"{k} {tri[0]} {tri[1]} {tri[2]} {sub}\n")
        f.write(f"FRACTURE_EDGES {mesh.layout.n_fedge}\n")
        for seg in mesh.segments:
            for k in range(seg.n_edges):
                f.write(f"{seg.edge_offset + k} {seg.segment_id} {seg.nodes[k]} {seg.nodes[k + 1]}\n")
    logger.info(f"Mesh dumped to {path}")
    return path


def segment_endpoint_nodes(mesh: TriangularMesh, point: Tuple[float, float]) -> List[Tuple[int, int, float]]:
    """
    Fracture flux nodes sitting at ``point``.

    Returns:
        List of (segment id, local node index, outward sign) where the
        sign is -1 at a segment start and +1 at its end.
    """
    found: List[Tuple[int, int, float]] = []
    tol = 1e-9 * mesh.h
    for seg_geo, seg in zip(mesh.geometry.segments, mesh.segments):
        if np.hypot(seg_geo.start[0] - point[0], seg_geo.start[1] - point[1]) < tol:
            found.append((seg.segment_id, 0, -1.0))
        if np.hypot(seg_geo.end[0] - point[0], seg_geo.end[1] - point[1]) < tol:
            found.append((seg.segment_id, seg.nodes.size - 1, 1.0))
    return found


def node_dof(mesh: TriangularMesh, segment_id: int, local: int) -> int:
    """Global index of a fracture flux node."""
    seg = mesh.segments[segment_id]
    return mesh.layout.n_edge + seg.node_offset + local


def fracture_edge_dof(mesh: TriangularMesh, segment_id: int, local: int) -> int:
    """Global index of a fracture edge pressure."""
    seg = mesh.segments[segment_id]
    return mesh.layout.n_flux + mesh.layout.n_tri + seg.edge_offset + local


def find_segment_tip(mesh: TriangularMesh, fracture_id: int, end: str) -> Optional[Tuple[int, int, float]]:
    """
    The flux node at a fracture's start or end tip.

    Returns:
        (segment id, local node, outward sign) or None for unknown ids.
    """
    segs = [s for s in mesh.geometry.segments if s.fracture_id == fracture_id]
    if not segs:
        return None
    if end == "start":
        first = segs[0]
        return first.segment_id, 0, -1.0
    last = segs[-1]
    return last.segment_id, mesh.segments[last.segment_id].nodes.size - 1, 1.0
