import json

import numpy as np
import pytest

from surfvem.exceptions import ConfigError, ParseError, TopologyError
from surfvem.models import DomainKind
from surfvem.services.mesh import (
    _collapse_short_edges,
    _is_convex,
    build_polymesh,
    cell_geometry,
    domain_polygon,
    export_mesh,
    generate_triangulation,
    generate_voronoi_polymesh,
    import_mesh,
    mesh_checksum,
    regularity_report,
    triangulation_cell_count,
)

SQUARE = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]


def polygon_area(polygon):
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def test_two_triangles_topology():
    mesh = build_polymesh(SQUARE, [(0, 1, 2), (0, 2, 3)])
    assert mesh.n_cells == 2
    assert mesh.n_edges == 5
    assert np.count_nonzero(mesh.boundary_edge_flags) == 4
    assert np.all(mesh.boundary_vertex_flags)
    diagonal = int(np.flatnonzero((mesh.edges[:, 0] == 0) & (mesh.edges[:, 1] == 2))[0])
    assert sorted(mesh.edge_cells[diagonal].tolist()) == [0, 1]
    np.testing.assert_allclose(mesh.cell_areas, [0.5, 0.5])
    assert mesh.h == pytest.approx(np.sqrt(2.0))
    for c, cycle in enumerate(mesh.cells):
        for j, e in enumerate(mesh.cell_edges[c]):
            assert set(mesh.edges[e]) == {cycle[j], cycle[(j + 1) % len(cycle)]}


def test_clockwise_cell_is_reoriented():
    mesh = build_polymesh(SQUARE, [(0, 3, 2, 1)])
    assert mesh.cells[0] == (1, 2, 3, 0)
    assert mesh.cell_areas[0] == pytest.approx(1.0)
    assert len(mesh.warnings) == 1


@pytest.mark.parametrize(
    "vertices, cells",
    [
        (SQUARE, [(0, 1, 7)]),
        (SQUARE, [(0, 1, 1, 2)]),
        (SQUARE, [(0, 1, 2), (0, 2, 3), (0, 1, 2)]),
        (SQUARE + [[0.5, 0.5]], [(0, 1, 2), (0, 2, 3)]),
        ([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]], [(0, 1, 2), (0, 2, 3)]),
        (SQUARE, [(0, 2, 1, 3)]),
    ],
    ids=["out-of-range", "repeated-vertex", "overlap", "dangling", "zero-area", "self-intersecting"],
)
def test_invalid_meshes_are_rejected(vertices, cells):
    with pytest.raises(TopologyError):
        build_polymesh(vertices, cells)


def test_non_manifold_edge_is_rejected():
    vertices = [[0.0, 0.0], [1.0, 0.0], [0.5, 1.0], [0.5, -1.0], [0.5, 2.0]]
    # three triangles hang on edge (0, 1)
    with pytest.raises(TopologyError):
        build_polymesh(vertices, [(0, 1, 2), (1, 0, 3), (0, 1, 4)])


def test_cell_geometry_and_checksum():
    mesh = build_polymesh(SQUARE, [(0, 1, 2, 3)])
    area, centroid, diameter = cell_geometry(mesh, 0)
    assert area == pytest.approx(1.0)
    np.testing.assert_allclose(centroid, [0.5, 0.5])
    assert diameter == pytest.approx(np.sqrt(2.0))
    shifted = build_polymesh(np.array(SQUARE) + 1e-3, [(0, 1, 2, 3)])
    assert mesh_checksum(mesh) == mesh_checksum(build_polymesh(SQUARE, [(0, 1, 2, 3)]))
    assert mesh_checksum(mesh) != mesh_checksum(shifted)


def test_export_then_import(tmp_path):
    mesh = generate_triangulation(DomainKind.QUARTER_DISK, 0, 8)
    path = export_mesh(mesh, tmp_path / "mesh.json")
    loaded = import_mesh(path)
    assert mesh_checksum(loaded) == mesh_checksum(mesh)
    np.testing.assert_array_equal(loaded.boundary_vertex_flags, mesh.boundary_vertex_flags)


def test_import_errors(tmp_path):
    with pytest.raises(ParseError):
        import_mesh(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"vertices": [[0, 0]], "cells": "oops"}))
    with pytest.raises(ParseError):
        import_mesh(bad)


@pytest.mark.parametrize("domain", list(DomainKind))
def test_domain_polygon_is_counterclockwise(domain):
    polygon = domain_polygon(domain, 16)
    assert polygon_area(polygon) > 0.0
    with pytest.raises(ConfigError):
        domain_polygon(domain, 3)


def test_quarter_disk_polygon_nodes():
    polygon = domain_polygon(DomainKind.QUARTER_DISK, 8)
    assert polygon.shape == (9, 2)
    np.testing.assert_allclose(np.hypot(polygon[1:, 0], polygon[1:, 1]), 1.0)


@pytest.mark.parametrize("domain", [DomainKind.QUARTER_DISK, DomainKind.UNIT_DISK, DomainKind.UNIT_SQUARE])
def test_triangulation_levels(domain):
    n_boundary = 16 if domain is DomainKind.UNIT_DISK else 8
    area = polygon_area(domain_polygon(domain, n_boundary))
    previous = None
    for level in range(3):
        mesh = generate_triangulation(domain, level, n_boundary)
        assert all(len(cell) == 3 for cell in mesh.cells)
        assert np.all(mesh.cell_areas > 0.0)
        assert np.sum(mesh.cell_areas) == pytest.approx(area, rel=1e-12)
        assert mesh.n_cells == triangulation_cell_count(domain, level, n_boundary)
        report = regularity_report(mesh)
        assert report.rho_estimate > 0.05
        assert report.all_star_shaped
        if previous is not None:
            assert mesh.n_cells == 4 * previous.n_cells
            assert mesh.h == pytest.approx(previous.h / 2.0)
        previous = mesh


def test_unit_square_base_triangulation():
    mesh = generate_triangulation(DomainKind.UNIT_SQUARE, 0, 8)
    assert mesh.n_cells == 8
    assert mesh.n_vertices == 9


def test_triangulation_level_out_of_range():
    with pytest.raises(ConfigError):
        generate_triangulation(DomainKind.QUARTER_DISK, 7, 8)


def test_voronoi_mesh_covers_domain():
    mesh = generate_voronoi_polymesh(DomainKind.QUARTER_DISK, 25, 8, seed=3, lloyd_iterations=20)
    polygon = domain_polygon(DomainKind.QUARTER_DISK, 8)
    assert mesh.n_cells == 25
    assert np.sum(mesh.cell_areas) == pytest.approx(polygon_area(polygon), rel=1e-10)
    # every fixed boundary node is a mesh vertex
    for node in polygon:
        assert np.min(np.linalg.norm(mesh.vertices - node, axis=1)) == 0.0
    report = regularity_report(mesh)
    assert report.all_star_shaped
    assert report.rho_estimate > 0.05


def test_lloyd_relaxed_mesh_is_well_shaped():
    mesh = generate_voronoi_polymesh(DomainKind.QUARTER_DISK, 25, 8, seed=0, lloyd_iterations=100)
    report = regularity_report(mesh)
    assert mesh.n_cells == 25
    assert all(_is_convex(mesh.vertices[list(cell)]) for cell in mesh.cells)
    assert report.all_star_shaped
    assert report.rho_estimate > 0.2


def test_fine_boundary_stretches_voronoi_cells():
    mesh = generate_voronoi_polymesh(DomainKind.QUARTER_DISK, 25, 128, seed=0, lloyd_iterations=100)
    polygon = domain_polygon(DomainKind.QUARTER_DISK, 128)
    for node in polygon:
        assert np.min(np.linalg.norm(mesh.vertices - node, axis=1)) == 0.0
    assert regularity_report(mesh).edge_ratio >= 8.0


def test_short_interior_edge_is_collapsed():
    vertices = np.array(SQUARE + [[0.5, 0.49], [0.5, 0.51]])
    cells = [(0, 4, 5, 3), (0, 1, 4), (1, 2, 5, 4), (3, 5, 2)]
    collapsed, new_cells = _collapse_short_edges(vertices, cells, np.array(SQUARE), 1e-9)
    assert collapsed.shape == (5, 2)
    np.testing.assert_allclose(collapsed[4], [0.5, 0.5])
    np.testing.assert_array_equal(collapsed[:4], SQUARE)
    assert sorted(map(len, new_cells)) == [3, 3, 3, 3]
    mesh = build_polymesh(collapsed, new_cells)
    assert np.sum(mesh.cell_areas) == pytest.approx(1.0)


def test_voronoi_mesh_is_reproducible():
    first = generate_voronoi_polymesh(DomainKind.UNIT_DISK, 30, 16, seed=7, lloyd_iterations=10)
    second = generate_voronoi_polymesh(DomainKind.UNIT_DISK, 30, 16, seed=7, lloyd_iterations=10)
    other = generate_voronoi_polymesh(DomainKind.UNIT_DISK, 30, 16, seed=8, lloyd_iterations=10)
    assert mesh_checksum(first) == mesh_checksum(second)
    assert mesh_checksum(first) != mesh_checksum(other)


def test_voronoi_needs_cells():
    with pytest.raises(ConfigError):
        generate_voronoi_polymesh(DomainKind.QUARTER_DISK, 2, 8)


def test_regularity_of_unit_square():
    report = regularity_report(build_polymesh(SQUARE, [(0, 1, 2, 3)]))
    assert report.rho_estimate == pytest.approx(1.0 / np.sqrt(2.0))
    assert report.edge_ratio == pytest.approx(1.0)
    assert report.min_edge_over_hP == pytest.approx(1.0 / np.sqrt(2.0))
    assert report.star_shaped_flags == [True]
