"""
Polygonal meshes of the chart domains: import/export, topology validation,
Delaunay triangulations with uniform refinement, Lloyd-relaxed clipped
Voronoi meshes and shape-regularity audits.
"""
import hashlib
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay, Voronoi, cKDTree
from scipy.spatial.distance import pdist

from ..exceptions import ConfigError, GenerationError, ParseError, TopologyError
from ..models import DomainKind, MeshFile, PolyMesh, RegularityReport
from .quadbasis import is_simple_polygon

logger = logging.getLogger(__name__)

MAX_LEVEL = 6
MIN_ANGLE_TARGET = 25.0
MIN_ANGLE_FLOOR = 15.0
SMOOTHING_SWEEPS = 5
LATTICE_CLEARANCE = 0.45
EDGE_COLLAPSE_RATIO = 0.1


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------

def domain_polygon(domain: DomainKind, n_boundary_nodes: int) -> np.ndarray:
    """Counterclockwise polyline replacing the domain boundary"""
    n = int(n_boundary_nodes)
    if n < 4:
        raise ConfigError("at least 4 boundary nodes are required", n_boundary_nodes=n)
    if domain is DomainKind.QUARTER_DISK:
        theta = np.linspace(0.0, 0.5 * np.pi, n)
        arc = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        arc[0] = (1.0, 0.0)
        arc[-1] = (0.0, 1.0)
        return np.vstack([[0.0, 0.0], arc])
    if domain is DomainKind.UNIT_DISK:
        theta = 2.0 * np.pi * np.arange(n) / n
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    pieces = max(1, n // 4)
    t = np.arange(pieces) / pieces
    zeros = np.zeros_like(t)
    ones = np.ones_like(t)
    return np.vstack([
        np.stack([t, zeros], -1),
        np.stack([ones, t], -1),
        np.stack([1.0 - t, ones], -1),
        np.stack([zeros, 1.0 - t], -1),
    ])


def _polygon_area(polygon: np.ndarray) -> float:
    x, y = polygon[:, 0], polygon[:, 1]
    return float(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _inside_convex(polygon: np.ndarray, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
    start = polygon
    edge = np.roll(polygon, -1, axis=0) - polygon
    rel = points[:, None, :] - start[None, :, :]
    cross = edge[None, :, 0] * rel[..., 1] - edge[None, :, 1] * rel[..., 0]
    lengths = np.linalg.norm(edge, axis=1)
    return np.all(cross >= -tol * lengths[None, :], axis=1)


def _distance_to_segments(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """(P, E) distances from points to the polygon edges"""
    a = polygon[None, :, :]
    b = np.roll(polygon, -1, axis=0)[None, :, :]
    ab = b - a
    t = np.sum((points[:, None, :] - a) * ab, axis=-1) / np.sum(ab * ab, axis=-1)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

def _flatten(cells: Sequence[Sequence[int]]):
    sizes = np.array([len(c) for c in cells], dtype=np.int64)
    flat = np.fromiter((v for c in cells for v in c), dtype=np.int64, count=int(sizes.sum()))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    nxt = np.arange(flat.size) + 1
    nxt[offsets[1:] - 1] = offsets[:-1]
    cell_of = np.repeat(np.arange(len(cells)), sizes)
    return flat, nxt, offsets, cell_of


def _cell_area_centroid(vertices: np.ndarray, flat, nxt, cell_of, n_cells: int):
    pa = vertices[flat]
    pb = vertices[flat[nxt]]
    cross = pa[:, 0] * pb[:, 1] - pb[:, 0] * pa[:, 1]
    area = 0.5 * np.bincount(cell_of, cross, minlength=n_cells)
    cx = np.bincount(cell_of, (pa[:, 0] + pb[:, 0]) * cross, minlength=n_cells) / (6.0 * area)
    cy = np.bincount(cell_of, (pa[:, 1] + pb[:, 1]) * cross, minlength=n_cells) / (6.0 * area)
    return area, np.stack([cx, cy], axis=-1)


def build_polymesh(vertices, cells, boundary_vertices: Optional[Sequence[int]] = None) -> PolyMesh:
    """Validate topology, orient cells counterclockwise and derive edges"""
    V = np.asarray(vertices, dtype=float)
    if V.ndim != 2 or V.shape[1] != 2 or V.shape[0] < 3:
        raise TopologyError(f"vertices must be an (n, 2) array, got shape {V.shape}")
    if not np.all(np.isfinite(V)):
        raise TopologyError("vertex coordinates must be finite")
    n = V.shape[0]
    if len(cells) == 0:
        raise TopologyError("mesh has no cells")
    span = float(np.max(np.ptp(V, axis=0)))
    area_floor = 1e-14 * span * span

    warnings: List[str] = []
    oriented: List[Tuple[int, ...]] = []
    for c, cell in enumerate(cells):
        cycle = [int(v) for v in cell]
        if len(cycle) < 3:
            raise TopologyError(f"cell {c} has fewer than 3 vertices", cell=c)
        if min(cycle) < 0 or max(cycle) >= n:
            raise TopologyError(f"cell {c} references a vertex out of range", cell=c)
        if len(set(cycle)) != len(cycle):
            raise TopologyError(f"cell {c} repeats a vertex", cell=c)
        area = _polygon_area(V[cycle])
        if abs(area) <= area_floor:
            raise TopologyError(f"cell {c} has zero area", cell=c)
        if area < 0.0:
            cycle = cycle[::-1]
            warnings.append(f"cell {c} reoriented counterclockwise")
            logger.warning(f"MESH: Cell {c} was clockwise and has been reoriented")
        if not is_simple_polygon(V[cycle]):
            raise TopologyError(f"cell {c} is not a simple polygon", cell=c)
        oriented.append(tuple(cycle))

    n_cells = len(oriented)
    flat, nxt, offsets, cell_of = _flatten(oriented)
    a = flat
    b = flat[nxt]
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    keys, inverse, counts = np.unique(lo * n + hi, return_inverse=True, return_counts=True)
    if np.any(counts > 2):
        bad = int(keys[np.argmax(counts > 2)])
        raise TopologyError(f"non-manifold edge ({bad // n}, {bad % n}) shared by more than two cells")
    n_edges = keys.size
    forward = a < b
    for mask in (forward, ~forward):
        if np.any(np.bincount(inverse[mask], minlength=n_edges) > 1):
            raise TopologyError("interior edge traversed in the same direction by two cells (overlap)")
    edge_cells = -np.ones((n_edges, 2), dtype=np.int64)
    edge_cells[inverse[forward], 0] = cell_of[forward]
    edge_cells[inverse[~forward], 1] = cell_of[~forward]
    edges = np.stack([keys // n, keys % n], axis=-1)

    used = np.zeros(n, dtype=bool)
    used[flat] = True
    if not np.all(used):
        dangling = np.flatnonzero(~used)[:5].tolist()
        raise TopologyError(f"dangling vertices not used by any cell: {dangling}")

    boundary_edge_flags = counts == 1
    boundary_flags = np.zeros(n, dtype=bool)
    boundary_flags[edges[boundary_edge_flags].ravel()] = True
    if boundary_vertices is not None:
        given = np.asarray(list(boundary_vertices), dtype=np.int64)
        if given.size and (given.min() < 0 or given.max() >= n):
            raise TopologyError("boundary vertex index out of range")
        explicit = np.zeros(n, dtype=bool)
        explicit[given] = True
        if np.any(boundary_flags & ~explicit):
            logger.warning("MESH: Declared boundary vertices omit vertices on boundary edges")
        boundary_flags = explicit

    areas, centroids = _cell_area_centroid(V, flat, nxt, cell_of, n_cells)
    diameters = np.array([pdist(V[list(cell)]).max() for cell in oriented])
    cell_edges = tuple(tuple(int(e) for e in inverse[offsets[c]:offsets[c + 1]]) for c in range(n_cells))

    return PolyMesh(
        vertices=V,
        cells=tuple(oriented),
        edges=edges,
        edge_cells=edge_cells,
        cell_edges=cell_edges,
        boundary_vertex_flags=boundary_flags,
        boundary_edge_flags=boundary_edge_flags,
        cell_areas=areas,
        cell_centroids=centroids,
        cell_diameters=diameters,
        h=float(diameters.max()),
        warnings=tuple(warnings),
    )


def cell_geometry(mesh: PolyMesh, cell: int) -> Tuple[float, np.ndarray, float]:
    """(area, centroid, diameter) of one cell"""
    if not 0 <= cell < mesh.n_cells:
        raise IndexError(f"cell index {cell} out of range for {mesh.n_cells} cells")
    return float(mesh.cell_areas[cell]), mesh.cell_centroids[cell].copy(), float(mesh.cell_diameters[cell])


def mesh_checksum(mesh: PolyMesh) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
    for cell in mesh.cells:
        digest.update(np.asarray(cell, dtype="<i8").tobytes())
        digest.update(b"|")
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Import / export
# ---------------------------------------------------------------------------

def import_mesh(path) -> PolyMesh:
    """Read the JSON mesh schema and validate it"""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read mesh file {path}: {e}", path=str(path)) from e
    try:
        data = MeshFile.model_validate_json(raw)
    except ValidationError as e:
        raise ParseError(f"mesh file {path} does not match the schema: {e}", path=str(path)) from e
    mesh = build_polymesh(data.vertices, data.cells, data.boundary_vertices)
    logger.info(f"MESH: Imported {mesh.n_cells} cells, {mesh.n_vertices} vertices from {path}")
    return mesh


def export_mesh(mesh: PolyMesh, path) -> Path:
    path = Path(path)
    payload = MeshFile(
        vertices=[tuple(map(float, v)) for v in mesh.vertices],
        cells=[list(c) for c in mesh.cells],
        boundary_vertices=np.flatnonzero(mesh.boundary_vertex_flags).tolist(),
    )
    path.write_text(payload.model_dump_json(), encoding="utf-8")
    logger.info(f"MESH: Exported {mesh.n_cells} cells to {path}")
    return path


# ---------------------------------------------------------------------------
# Triangulations
# ---------------------------------------------------------------------------

def _min_angles(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = points[triangles]
    angles = []
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        v = p[:, (i + 2) % 3] - p[:, i]
        cos = np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return np.min(np.stack(angles, axis=1), axis=1)


def _subdivided_boundary(polygon: np.ndarray, ell: float) -> np.ndarray:
    nodes = []
    for start, end in zip(polygon, np.roll(polygon, -1, axis=0)):
        pieces = max(1, int(np.ceil(np.linalg.norm(end - start) / ell - 1e-9)))
        t = np.arange(pieces)[:, None] / pieces
        nodes.append(start + t * (end - start))
    return np.vstack(nodes)


def _hex_lattice(polygon: np.ndarray, ell: float) -> np.ndarray:
    lo = polygon.min(axis=0)
    hi = polygon.max(axis=0)
    dy = ell * np.sqrt(3.0) / 2.0
    rows = np.arange(np.floor(lo[1] / dy) - 1, np.ceil(hi[1] / dy) + 2)
    cols = np.arange(np.floor(lo[0] / ell) - 1, np.ceil(hi[0] / ell) + 2)
    J, I = np.meshgrid(rows, cols, indexing="ij")
    x = ell * (I + 0.5 * (J % 2))
    y = dy * J
    candidates = np.stack([x.ravel(), y.ravel()], axis=-1)
    candidates = candidates[_inside_convex(polygon, candidates)]
    clearance = _distance_to_segments(candidates, polygon).min(axis=1)
    return candidates[clearance >= LATTICE_CLEARANCE * ell]


def _delaunay(points: np.ndarray, ell: float) -> np.ndarray:
    tri = Delaunay(points)
    triangles = tri.simplices.astype(np.int64)
    p = points[triangles]
    signed = 0.5 * (
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    )
    keep = np.abs(signed) > 1e-10 * ell * ell
    triangles = triangles[keep]
    flip = signed[keep] < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    return triangles


def _smooth(points: np.ndarray, triangles: np.ndarray, n_fixed: int) -> np.ndarray:
    """Jacobi Laplacian smoothing of the lattice points (boundary nodes stay fixed)"""
    n = points.shape[0]
    i = triangles[:, [0, 1, 2, 1, 2, 0]].ravel()
    j = triangles[:, [1, 2, 0, 0, 1, 2]].ravel()
    adjacency = coo_matrix((np.ones(i.size), (i, j)), shape=(n, n)).tocsr()
    adjacency.data[:] = 1.0
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    smoothed = points.copy()
    for _ in range(SMOOTHING_SWEEPS):
        average = (adjacency @ smoothed) / degree[:, None]
        smoothed[n_fixed:] = average[n_fixed:]
    return smoothed


def _base_triangulation(domain: DomainKind, polygon: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if domain is DomainKind.UNIT_SQUARE:
        m = int(round(polygon.shape[0] / 4))
        axis = np.arange(m + 1) / m
        X, Y = np.meshgrid(axis, axis, indexing="ij")
        points = np.stack([X.ravel(), Y.ravel()], axis=-1)
        idx = np.arange((m + 1) ** 2).reshape(m + 1, m + 1)
        v00, v10 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
        v01, v11 = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
        triangles = np.concatenate([np.stack([v00, v10, v11], -1), np.stack([v00, v11, v01], -1)])
        return points, triangles

    ell = float(np.min(np.linalg.norm(np.roll(polygon, -1, axis=0) - polygon, axis=1)))
    boundary = _subdivided_boundary(polygon, ell)
    interior = _hex_lattice(polygon, ell)
    points = np.vstack([boundary, interior])
    triangles = _delaunay(points, ell)
    worst = float(_min_angles(points, triangles).min())
    attempts = 0
    while worst < MIN_ANGLE_TARGET and attempts < 2:
        attempts += 1
        logger.info(f"MESH: Minimum angle {worst:.1f} deg, smoothing interior nodes (attempt {attempts})")
        points = _smooth(points, triangles, boundary.shape[0])
        triangles = _delaunay(points, ell)
        worst = float(_min_angles(points, triangles).min())
    if worst < MIN_ANGLE_FLOOR:
        raise GenerationError(
            f"triangulation quality floor violated: minimum angle {worst:.2f} deg < {MIN_ANGLE_FLOOR}",
            domain=domain.value,
        )
    used = np.unique(triangles)
    if used.size != points.shape[0]:
        remap = -np.ones(points.shape[0], dtype=np.int64)
        remap[used] = np.arange(used.size)
        points = points[used]
        triangles = remap[triangles]
    return points, triangles


def _split_triangles(points: np.ndarray, triangles: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Split every triangle into four through its edge midpoints"""
    n = points.shape[0]
    local = triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 3, 2)
    lo = np.minimum(local[..., 0], local[..., 1])
    hi = np.maximum(local[..., 0], local[..., 1])
    keys, inverse = np.unique((lo * n + hi).ravel(), return_inverse=True)
    inverse = inverse.reshape(-1, 3)
    mids = 0.5 * (points[keys // n] + points[keys % n])
    m01 = n + inverse[:, 0]
    m12 = n + inverse[:, 1]
    m20 = n + inverse[:, 2]
    v0, v1, v2 = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    children = np.concatenate([
        np.stack([v0, m01, m20], -1),
        np.stack([v1, m12, m01], -1),
        np.stack([v2, m20, m12], -1),
        np.stack([m01, m12, m20], -1),
    ])
    return np.vstack([points, mids]), children


def generate_triangulation(domain: DomainKind, level: int, n_boundary_nodes: int) -> PolyMesh:
    """Delaunay triangulation of the boundary polyline, refined uniformly level times"""
    if not 0 <= level <= MAX_LEVEL:
        raise ConfigError(f"triangulation level {level} outside 0..{MAX_LEVEL}", level=level)
    polygon = domain_polygon(domain, n_boundary_nodes)
    points, triangles = _base_triangulation(domain, polygon)
    for _ in range(level):
        points, triangles = _split_triangles(points, triangles)
    mesh = build_polymesh(points, triangles)
    logger.info(
        f"MESH: Triangulation of {domain.value}, level {level}: {mesh.n_cells} cells, h={mesh.h:.4g}"
    )
    return mesh


def triangulation_cell_count(domain: DomainKind, level: int, n_boundary_nodes: int) -> int:
    """Cells of generate_triangulation at a level, without building the refined mesh"""
    polygon = domain_polygon(domain, n_boundary_nodes)
    _, triangles = _base_triangulation(domain, polygon)
    return int(triangles.shape[0]) * 4**level


# ---------------------------------------------------------------------------
# Clipped Voronoi meshes
# ---------------------------------------------------------------------------

def _sample_seeds(polygon: np.ndarray, n_cells: int, rng: np.random.Generator) -> np.ndarray:
    lo = polygon.min(axis=0)
    hi = polygon.max(axis=0)
    seeds = np.empty((0, 2))
    while seeds.shape[0] < n_cells:
        batch = lo + (hi - lo) * rng.random((2 * n_cells, 2))
        batch = batch[_inside_convex(polygon, batch, tol=-1e-9)]
        seeds = np.vstack([seeds, batch])
    return seeds[:n_cells]


def _boundary_lines(polygon: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unique supporting lines (outward unit normal, offset) of the polygon edges"""
    edge = np.roll(polygon, -1, axis=0) - polygon
    normal = np.stack([edge[:, 1], -edge[:, 0]], axis=-1)
    normal /= np.linalg.norm(normal, axis=1)[:, None]
    offset = np.sum(normal * polygon, axis=1)
    _, first = np.unique(np.round(np.column_stack([normal, offset]), 10), axis=0, return_index=True)
    first = np.sort(first)
    return normal[first], offset[first]


def _reflect(seeds: np.ndarray, normal: np.ndarray, offset: np.ndarray) -> np.ndarray:
    distance = offset[None, :] - seeds @ normal.T
    return seeds[:, None, :] + 2.0 * distance[..., None] * normal[None, :, :]


def _clip_convex(poly: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of a convex cell by the convex domain"""
    out = poly
    for start, end in zip(polygon, np.roll(polygon, -1, axis=0)):
        if out.shape[0] == 0:
            break
        edge = end - start
        side = edge[0] * (out[:, 1] - start[1]) - edge[1] * (out[:, 0] - start[0])
        if np.all(side >= 0.0):
            continue
        nxt = np.roll(out, -1, axis=0)
        side_next = np.roll(side, -1)
        kept = []
        for p, q, sp, sq in zip(out, nxt, side, side_next):
            if sp >= 0.0:
                kept.append(p)
            if (sp >= 0.0) != (sq >= 0.0):
                kept.append(p + (sp / (sp - sq)) * (q - p))
        out = np.array(kept) if kept else np.empty((0, 2))
    return out


def _voronoi_cells(seeds: np.ndarray, polygon: np.ndarray, alpha: float) -> List[np.ndarray]:
    normal, offset = _boundary_lines(polygon)
    reflected = _reflect(seeds, normal, offset)
    near = (offset[None, :] - seeds @ normal.T) < alpha
    full = np.zeros(seeds.shape[0], dtype=bool)
    for _ in range(3):
        mask = near | full[:, None]
        ghosts = reflected[mask]
        vor = Voronoi(np.vstack([seeds, ghosts]))
        unbounded = np.array([
            (-1 in vor.regions[vor.point_region[i]]) or len(vor.regions[vor.point_region[i]]) == 0
            for i in range(seeds.shape[0])
        ])
        if not np.any(unbounded & ~full):
            break
        full |= unbounded
    else:
        raise GenerationError("Voronoi cells remain unbounded after mirroring every seed")

    inside = _inside_convex(polygon, vor.vertices, tol=1e-12)
    cells = []
    for i, seed in enumerate(seeds):
        region = vor.regions[vor.point_region[i]]
        if -1 in region or not region:
            raise GenerationError(f"Voronoi cell of seed {i} is unbounded")
        region = np.asarray(region)
        pts = vor.vertices[region]
        order = np.argsort(np.arctan2(pts[:, 1] - seed[1], pts[:, 0] - seed[0]))
        pts = pts[order]
        if not np.all(inside[region]):
            pts = _clip_convex(pts, polygon)
        if pts.shape[0] < 3:
            raise GenerationError(f"clipped Voronoi cell of seed {i} is degenerate")
        cells.append(pts)
    return cells


def _centroids(cells: List[np.ndarray]) -> np.ndarray:
    coords = np.vstack(cells)
    offsets = np.cumsum([0] + [c.shape[0] for c in cells])
    positions = [range(offsets[i], offsets[i + 1]) for i in range(len(cells))]
    flat, nxt, _, cell_of = _flatten(positions)
    _, centroids = _cell_area_centroid(coords, flat, nxt, cell_of, len(cells))
    return centroids


def _insert_boundary_nodes(cell: np.ndarray, polygon: np.ndarray, tol: float) -> np.ndarray:
    """Add the fixed boundary nodes lying inside a cell side"""
    start = cell
    edge = np.roll(cell, -1, axis=0) - cell
    rel = polygon[None, :, :] - start[:, None, :]
    length2 = np.sum(edge * edge, axis=1)
    t = np.sum(rel * edge[:, None, :], axis=-1) / length2[:, None]
    cross = edge[:, None, 0] * rel[..., 1] - edge[:, None, 1] * rel[..., 0]
    distance = np.abs(cross) / np.sqrt(length2)[:, None]
    on_side = (distance < tol) & (t > 1e-9) & (t < 1.0 - 1e-9)
    if not np.any(on_side):
        return cell
    out = []
    for j in range(cell.shape[0]):
        out.append(cell[j])
        hits = np.flatnonzero(on_side[j])
        for node in hits[np.argsort(t[j, hits])]:
            out.append(polygon[node])
    return np.array(out)


def _merge_cells(cells: List[np.ndarray], polygon: np.ndarray, tol: float):
    coords = np.vstack(cells)
    tree = cKDTree(coords)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    n = coords.shape[0]
    graph = coo_matrix((np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    _, first, compact = np.unique(labels, return_index=True, return_inverse=True)
    vertices = coords[first]

    # fixed boundary nodes keep their exact coordinates
    distance, nearest = cKDTree(polygon).query(vertices)
    snap = distance < tol
    vertices[snap] = polygon[nearest[snap]]

    merged_cells = []
    offset = 0
    for c, cell in enumerate(cells):
        ids = compact[offset:offset + cell.shape[0]]
        offset += cell.shape[0]
        keep = ids != np.roll(ids, 1)
        ids = ids[keep] if np.any(keep) else ids[:1]
        if ids.size < 3:
            raise GenerationError(f"Voronoi cell {c} collapsed while merging vertices")
        merged_cells.append(tuple(int(v) for v in ids))
    return vertices, merged_cells


def _is_convex(polygon: np.ndarray) -> bool:
    """Counterclockwise with no reflex corner; collinear corners allowed"""
    edge = np.roll(polygon, -1, axis=0) - polygon
    turn = edge[:, 0] * np.roll(edge[:, 1], -1) - edge[:, 1] * np.roll(edge[:, 0], -1)
    scale = np.max(np.sum(edge * edge, axis=1))
    return _polygon_area(polygon) > 0.0 and bool(np.all(turn >= -1e-12 * scale))


def _vertex_kinds(vertices: np.ndarray, polygon: np.ndarray, tol: float) -> np.ndarray:
    """2 for fixed boundary nodes, 1 for other points of the polyline, 0 inside"""
    kinds = np.zeros(vertices.shape[0], dtype=np.int64)
    chunks = np.array_split(vertices, max(1, vertices.shape[0] // 4096))
    on_line = np.concatenate([np.min(_distance_to_segments(chunk, polygon), axis=1) < tol for chunk in chunks])
    kinds[on_line] = 1
    distance, _ = cKDTree(polygon).query(vertices)
    kinds[distance < tol] = 2
    return kinds


def _collapse_short_edges(
    vertices: np.ndarray,
    cells: List[Tuple[int, ...]],
    polygon: np.ndarray,
    tol: float,
    ratio: float = EDGE_COLLAPSE_RATIO,
    max_passes: int = 10,
):
    """Shortest-first collapse of edges shorter than ratio * diameter of an adjacent cell"""
    vertices = vertices.copy()
    kinds = _vertex_kinds(vertices, polygon, tol)
    cells = [list(cell) for cell in cells]
    diameters = np.array([pdist(vertices[cell]).max() for cell in cells])
    collapsed = 0

    for _ in range(max_passes):
        limit = {}
        shared = {}
        vertex_cells: dict = {}
        for c, cell in enumerate(cells):
            for a, b in zip(cell, cell[1:] + cell[:1]):
                key = (min(a, b), max(a, b))
                limit[key] = min(limit.get(key, np.inf), ratio * diameters[c])
                shared[key] = shared.get(key, 0) + 1
            for v in cell:
                vertex_cells.setdefault(v, []).append(c)

        candidates = []
        for (a, b), bound in limit.items():
            length = float(np.linalg.norm(vertices[a] - vertices[b]))
            if length >= bound or kinds[a] == kinds[b] == 2:
                continue
            # a chord between two boundary points would cut the domain
            if kinds[a] >= 1 and kinds[b] >= 1 and shared[(a, b)] != 1:
                continue
            candidates.append((length, a, b))
        candidates.sort()

        locked = set()
        changed = 0
        for _, a, b in candidates:
            if a in locked or b in locked:
                continue
            keep, drop = (a, b) if kinds[a] >= kinds[b] else (b, a)
            target = vertices[keep] if kinds[a] != kinds[b] else 0.5 * (vertices[a] + vertices[b])

            updated = {}
            for c in vertex_cells[drop]:
                cell = cells[c]
                if keep in cell:
                    i, j = cell.index(keep), cell.index(drop)
                    if (i - j) % len(cell) not in (1, len(cell) - 1):
                        break
                    new = [v for v in cell if v != drop]
                else:
                    new = [keep if v == drop else v for v in cell]
                if len(new) < 3:
                    break
                updated[c] = new
            else:
                previous = vertices[keep].copy()
                vertices[keep] = target
                affected = set(updated) | set(vertex_cells[keep])
                if not all(_is_convex(vertices[updated.get(c, cells[c])]) for c in affected):
                    vertices[keep] = previous
                    continue
                for c, new in updated.items():
                    cells[c] = new
                locked.update((keep, drop))
                changed += 1
        collapsed += changed
        if changed == 0:
            break

    used = np.unique(np.concatenate([np.asarray(cell) for cell in cells]))
    index = -np.ones(vertices.shape[0], dtype=np.int64)
    index[used] = np.arange(used.size)
    if collapsed:
        logger.info(f"VORONOI: Collapsed {collapsed} short edges")
    return vertices[used], [tuple(int(index[v]) for v in cell) for cell in cells]


def generate_voronoi_polymesh(
    domain: DomainKind,
    n_cells: int,
    n_boundary_nodes: int,
    seed: int = 0,
    lloyd_iterations: int = 100,
) -> PolyMesh:
    """Clipped centroidal Voronoi mesh of the boundary polyline"""
    if n_cells < 4:
        raise ConfigError("a Voronoi mesh needs at least 4 cells", n_cells=n_cells)
    polygon = domain_polygon(domain, n_boundary_nodes)
    area = _polygon_area(polygon)
    size = np.sqrt(area / n_cells)
    alpha = 1.5 * size
    rng = np.random.default_rng(seed)
    seeds = _sample_seeds(polygon, n_cells, rng)

    logger.info(
        f"VORONOI: {n_cells} cells on {domain.value} with {n_boundary_nodes} boundary nodes, "
        f"{lloyd_iterations} Lloyd iterations, seed {seed}"
    )
    for _ in range(lloyd_iterations):
        seeds = _centroids(_voronoi_cells(seeds, polygon, alpha))

    cells = _voronoi_cells(seeds, polygon, alpha)
    tol = 1e-9 * size
    cells = [_insert_boundary_nodes(cell, polygon, tol) for cell in cells]
    vertices, merged = _merge_cells(cells, polygon, tol)
    vertices, merged = _collapse_short_edges(vertices, merged, polygon, tol)
    try:
        mesh = build_polymesh(vertices, merged)
    except TopologyError as e:
        raise GenerationError(f"Voronoi partition failed validation: {e}", domain=domain.value) from e

    covered = float(np.sum(mesh.cell_areas))
    if abs(covered - area) > 1e-10 * area:
        raise GenerationError(
            f"Voronoi cells cover {covered:.12g} of the domain area {area:.12g}", domain=domain.value
        )
    logger.info(f"VORONOI: Mesh ready: {mesh.n_cells} cells, {mesh.n_vertices} vertices, h={mesh.h:.4g}")
    return mesh


# ---------------------------------------------------------------------------
# Regularity
# ---------------------------------------------------------------------------

def regularity_report(mesh: PolyMesh) -> RegularityReport:
    """Centroid-disk star-shapedness, chunkiness and edge-length balance per cell"""
    flat, nxt, offsets, cell_of = _flatten(mesh.cells)
    pa = mesh.vertices[flat]
    pb = mesh.vertices[flat[nxt]]
    edge = pb - pa
    length = np.linalg.norm(edge, axis=1)
    rel = mesh.cell_centroids[cell_of] - pa
    # signed distance from the centroid to each edge line, positive inside
    distance = (edge[:, 0] * rel[:, 1] - edge[:, 1] * rel[:, 0]) / length
    starts = offsets[:-1]
    r_P = np.minimum.reduceat(distance, starts)
    longest = np.maximum.reduceat(length, starts)
    shortest = np.minimum.reduceat(length, starts)
    h_P = mesh.cell_diameters
    return RegularityReport(
        rho_estimate=float(np.min(2.0 * r_P / h_P)),
        edge_ratio=float(np.max(longest / shortest)),
        min_edge_over_hP=float(np.min(shortest / h_P)),
        star_shaped_flags=[bool(v) for v in r_P > 0.0],
    )
