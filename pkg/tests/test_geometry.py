"""Tests for fractured-domain geometry and the structured triangulation."""

import numpy as np
import pytest

from core.constants import EDGE_BOUNDARY, EDGE_FRACTURE
from core.exceptions import GeometryError, MeshError
from core.geometry import (DofLayout, build_geometry, check_conformity,
                           dump_mesh, generate_mesh, segment_endpoint_nodes,
                           subdomain_areas)

from .helpers import cross_spec, single_spec


def test_single_fracture_splits_domain_in_two():
    geometry = build_geometry(single_spec())
    assert len(geometry.subdomains) == 2
    assert len(geometry.segments) == 1
    assert geometry.intersections == ()
    assert geometry.segments[0].sides == (0, 1)
    np.testing.assert_allclose(geometry.widths, [1e-3])


def test_crossing_fractures_give_four_subdomains_and_segments():
    geometry = build_geometry(cross_spec())
    assert len(geometry.subdomains) == 4
    assert len(geometry.segments) == 4
    assert len(geometry.intersections) == 1
    crossing = geometry.intersections[0]
    assert crossing.point == (0.5, 0.5)
    assert sorted(crossing.segment_ids) == [0, 1, 2, 3]


def test_parallel_fractures():
    spec = {
        "kind": "parallel",
        "x_range": [0.0, 2.0],
        "y_range": [0.0, 1.0],
        "fractures": [
            {"orientation": "vertical", "position": 0.5, "width": 2.5e-3},
            {"orientation": "vertical", "position": 1.5, "width": 5e-3},
        ],
    }
    geometry = build_geometry(spec)
    assert len(geometry.subdomains) == 3
    assert [s.fracture_id for s in geometry.segments] == [0, 1]
    assert geometry.intersections == ()


@pytest.mark.parametrize(
    "change",
    [
        {"kind": "unknown"},
        {"kind": "intersecting"},
        {"fractures": [{"orientation": "vertical", "position": 2.5, "width": 1e-3}]},
        {"fractures": [{"orientation": "vertical", "position": 1.0, "width": 0.0}]},
        {"fractures": [{"orientation": "vertical", "position": 1.0, "width": 0.2}]},
        {"fractures": [{"orientation": "diagonal", "position": 1.0, "width": 1e-3}]},
    ],
)
def test_invalid_geometry_rejected(change):
    spec = single_spec()
    spec.update(change)
    with pytest.raises(GeometryError):
        build_geometry(spec)


def test_mesh_counts_and_areas(single_mesh):
    nx, ny = single_mesh.shape
    assert (nx, ny) == (20, 10)
    assert single_mesh.n_triangles == 2 * nx * ny
    assert np.all(single_mesh.tri_area > 0)
    expected = [sd.area for sd in single_mesh.geometry.subdomains]
    np.testing.assert_allclose(subdomain_areas(single_mesh), expected, rtol=1e-12)


def test_fracture_edges_are_duplicated_per_side(single_mesh):
    seg = single_mesh.segments[0]
    assert seg.nodes.size == 11
    assert seg.n_edges == 10
    np.testing.assert_allclose(seg.lengths.sum(), 1.0)
    assert np.all(single_mesh.edge_kind[seg.side_edges.ravel()] == EDGE_FRACTURE)
    left = single_mesh.edge_subdomain[seg.side_edges[0]]
    right = single_mesh.edge_subdomain[seg.side_edges[1]]
    assert np.all(left == 0) and np.all(right == 1)
    assert check_conformity(single_mesh) == {0: True}


def test_shared_edges_have_opposite_orientation(single_mesh):
    signs = np.zeros(single_mesh.n_edges)
    np.add.at(signs, single_mesh.tri_edges.ravel(), single_mesh.tri_signs.ravel())
    count = np.bincount(single_mesh.tri_edges.ravel(), minlength=single_mesh.n_edges)
    np.testing.assert_array_equal(signs[count == 2], 0.0)


def test_boundary_edges_cover_perimeter(single_mesh):
    boundary = single_mesh.edge_kind == EDGE_BOUNDARY
    np.testing.assert_allclose(single_mesh.edge_length[boundary].sum(), 6.0)


def test_layout_counts(single_mesh):
    layout = single_mesh.layout
    assert layout.n_node == 11
    assert layout.n_fedge == 10
    assert layout.n_tri == single_mesh.n_triangles
    assert layout.observed_indices().size == 21
    assert layout.size == layout.n_edge + 11 + layout.n_tri + 10


def test_layout_with_multipliers():
    layout = DofLayout(n_edge=5, n_node=3, n_tri=4, n_fedge=2).with_multipliers(1)
    assert layout.n_mult == 1
    assert layout.size == 15
    assert layout.multiplier_slice == slice(14, 15)
    np.testing.assert_array_equal(layout.fracture_indices(), [5, 6, 7, 12, 13, 14])


def test_observation_length_at_default_resolution():
    mesh = generate_mesh(build_geometry(single_spec()), 0.02)
    assert mesh.layout.n_fedge == 50
    assert mesh.layout.n_node == 51


def test_mesh_size_must_tile_fracture_lines():
    with pytest.raises(MeshError):
        generate_mesh(build_geometry(single_spec()), 0.3)
    with pytest.raises(MeshError):
        generate_mesh(build_geometry(single_spec()), -0.1)


def test_crossing_endpoint_nodes(cross_mesh):
    nodes = segment_endpoint_nodes(cross_mesh, (0.5, 0.5))
    assert len(nodes) == 4
    assert sorted(outward for _, _, outward in nodes) == [-1.0, -1.0, 1.0, 1.0]
    assert segment_endpoint_nodes(cross_mesh, (0.25, 0.25)) == []
    assert all(check_conformity(cross_mesh).values())


def test_dump_mesh(tmp_path, single_mesh):
    path = dump_mesh(single_mesh, tmp_path / "mesh.txt")
    lines = path.read_text().splitlines()
    assert lines[0] == f"VERTICES {single_mesh.n_vertices}"
    assert f"TRIANGLES {single_mesh.n_triangles}" in lines
    assert "FRACTURE_EDGES 10" in lines
    vertices = np.array([[float(v) for v in line.split()[1:]] for line in lines[1:single_mesh.n_vertices + 1]])
    np.testing.assert_array_equal(vertices, single_mesh.vertices)
