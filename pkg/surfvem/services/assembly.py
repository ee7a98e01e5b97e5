"""
Global DOF numbering, sparse assembly, Dirichlet elimination, sparse LU
solve and the two-chart sphere driver.
"""
import logging
import time
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, onenormest, splu

from ..exceptions import SolveError, SurfVemError
from ..models import Chart, EquationCoefficients, PolyMesh, SolveReport, StabKind
from .chart import make_chart
from .quadbasis import basis_size, gauss_lobatto_rule
from .vemcore import ElementGeometry, cell_moments, local_forms

logger = logging.getLogger(__name__)

REFINE_RESIDUAL = 1e-10
MAX_RESIDUAL = 1e-8

ScalarField = Callable[[np.ndarray], np.ndarray]


class DofMap(BaseModel):
    """(cell, local index) -> global index, plus coordinates of the nodal DOFs"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    k: int
    n_dofs: int
    n_vertex_dofs: int
    n_edge_dofs: int
    n_moment_dofs: int
    cell_dofs: Tuple[np.ndarray, ...] = Field(..., description="Global indices in local DOF order")
    dof_points: np.ndarray = Field(..., description="(n_vertex_dofs + n_edge_dofs, 2) nodal positions")
    boundary_mask: np.ndarray = Field(..., description="(n_dofs,) DOFs on the domain boundary")

    @property
    def n_nodal(self) -> int:
        return self.n_vertex_dofs + self.n_edge_dofs


class GlobalSystem(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    mesh: PolyMesh
    chart: Chart
    k: int
    coefficients: EquationCoefficients
    stab_kind: StabKind
    dof_map: DofMap
    matrix: sparse.csr_matrix
    rhs: np.ndarray
    dirichlet_mask: Optional[np.ndarray] = None
    dirichlet_values: Optional[np.ndarray] = None

    @property
    def n_dofs(self) -> int:
        return self.dof_map.n_dofs


class DiscreteSolution(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    values: np.ndarray
    mesh: PolyMesh
    k: int
    chart: Chart
    dof_map: DofMap
    report: SolveReport


def global_numbering(mesh: PolyMesh, k: int) -> DofMap:
    """Vertices first, then edge interiors oriented from the lower vertex index, then cell moments"""
    n_vertex = mesh.n_vertices
    per_edge = k - 1
    n_edge_dofs = mesh.n_edges * per_edge
    n_moment = basis_size(k - 2)
    moment_start = n_vertex + n_edge_dofs

    points = [mesh.vertices]
    if per_edge > 0:
        t = gauss_lobatto_rule(k + 1).nodes[1:k]
        a = mesh.vertices[mesh.edges[:, 0]]
        b = mesh.vertices[mesh.edges[:, 1]]
        points.append((0.5 * (1.0 - t)[None, :, None] * a[:, None, :] + 0.5 * (1.0 + t)[None, :, None] * b[:, None, :]).reshape(-1, 2))
    dof_points = np.vstack(points)

    slots = np.arange(per_edge)
    cell_dofs = []
    for c, cycle in enumerate(mesh.cells):
        cycle = np.asarray(cycle)
        edge_ids = np.asarray(mesh.cell_edges[c])
        # local edge j runs cycle[j] -> cycle[j+1]; reversed w.r.t. the global edge when descending
        forward = cycle < np.roll(cycle, -1)
        local_slots = np.where(forward[:, None], slots[None, :], per_edge - 1 - slots[None, :])
        edge_part = n_vertex + edge_ids[:, None] * per_edge + local_slots
        moments = moment_start + c * n_moment + np.arange(n_moment)
        cell_dofs.append(np.concatenate([cycle, edge_part.ravel(), moments]).astype(np.int64))

    n_dofs = moment_start + mesh.n_cells * n_moment
    boundary_mask = np.zeros(n_dofs, dtype=bool)
    boundary_mask[:n_vertex] = mesh.boundary_vertex_flags
    if per_edge > 0:
        boundary_mask[n_vertex:moment_start] = np.repeat(mesh.boundary_edge_flags, per_edge)

    return DofMap(
        k=k,
        n_dofs=n_dofs,
        n_vertex_dofs=n_vertex,
        n_edge_dofs=n_edge_dofs,
        n_moment_dofs=mesh.n_cells * n_moment,
        cell_dofs=tuple(cell_dofs),
        dof_points=dof_points,
        boundary_mask=boundary_mask,
    )


def _reduce_sorted(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray):
    """Sum duplicate (row, col) entries in an order that does not depend on element order"""
    order = np.lexsort((vals, cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if rows.size == 0:
        return rows, cols, vals
    new = np.empty(rows.size, dtype=bool)
    new[0] = True
    new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    starts = np.flatnonzero(new)
    return rows[starts], cols[starts], np.add.reduceat(vals, starts)


def interpolate_global(mesh: PolyMesh, dof_map: DofMap, fn: ScalarField) -> np.ndarray:
    """Global DOF vector of fn: nodal values, then per-cell scaled moments"""
    values = np.zeros(dof_map.n_dofs)
    values[:dof_map.n_nodal] = np.asarray(fn(dof_map.dof_points), dtype=float)
    if dof_map.k >= 2:
        for c in range(mesh.n_cells):
            moments = cell_moments(ElementGeometry.from_mesh(mesh, c), dof_map.k, fn)
            values[dof_map.cell_dofs[c][-moments.size:]] = moments
    return values


def assemble(
    mesh: PolyMesh,
    chart: Chart,
    k: int,
    coefficients: Optional[EquationCoefficients] = None,
    stab_kind: StabKind = StabKind.AUTO,
    forcing: Optional[ScalarField] = None,
    cell_order: Optional[Sequence[int]] = None,
    dof_map: Optional[DofMap] = None,
) -> GlobalSystem:
    """Accumulate A + Badv + C and the load over all cells as triplets, then compress"""
    coefficients = coefficients or EquationCoefficients()
    dof_map = dof_map or global_numbering(mesh, k)
    order = range(mesh.n_cells) if cell_order is None else cell_order
    logger.info(f"ASSEMBLY: Assembling k={k} on {mesh.n_cells} cells, {dof_map.n_dofs} DOFs")

    rows, cols, vals, load_rows, load_vals = [], [], [], [], []
    for c in order:
        try:
            forms = local_forms(
                ElementGeometry.from_mesh(mesh, c),
                k,
                chart,
                coefficients.w_hat,
                coefficients.gamma,
                stab_kind,
                forcing,
            )
        except SurfVemError as e:
            e.context["cell"] = int(c)
            logger.error(f"ASSEMBLY: Cell {c} failed: {e}")
            raise
        dofs = dof_map.cell_dofs[c]
        n = dofs.size
        local = forms.A + forms.Badv + forms.C
        rows.append(np.repeat(dofs, n))
        cols.append(np.tile(dofs, n))
        vals.append(local.ravel())
        load_rows.append(dofs)
        load_vals.append(forms.load)

    r, cc, v = _reduce_sorted(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))
    matrix = sparse.csr_matrix((v, (r, cc)), shape=(dof_map.n_dofs, dof_map.n_dofs))
    lr, _, lv = _reduce_sorted(np.concatenate(load_rows), np.zeros(sum(x.size for x in load_rows), dtype=np.int64), np.concatenate(load_vals))
    rhs = np.zeros(dof_map.n_dofs)
    rhs[lr] = lv
    logger.info(f"ASSEMBLY: Matrix has {matrix.nnz} nonzeros")

    return GlobalSystem(
        mesh=mesh,
        chart=chart,
        k=k,
        coefficients=coefficients,
        stab_kind=stab_kind.resolve(k),
        dof_map=dof_map,
        matrix=matrix,
        rhs=rhs,
    )


def apply_dirichlet(system: GlobalSystem, boundary_data: Optional[ScalarField] = None) -> GlobalSystem:
    """Prescribe boundary DOFs and eliminate them symmetrically"""
    dof_map = system.dof_map
    mask = dof_map.boundary_mask
    boundary = np.flatnonzero(mask)
    values = np.zeros(dof_map.n_dofs)
    if boundary_data is not None and boundary.size:
        values[boundary] = np.asarray(boundary_data(dof_map.dof_points[boundary]), dtype=float)

    rhs = system.rhs - system.matrix @ values
    rhs[boundary] = values[boundary]
    keep = sparse.diags((~mask).astype(float))
    matrix = (keep @ system.matrix @ keep + sparse.diags(mask.astype(float))).tocsr()
    matrix.eliminate_zeros()
    logger.info(f"ASSEMBLY: Constrained {boundary.size} boundary DOFs")
    return system.model_copy(update={"matrix": matrix, "rhs": rhs, "dirichlet_mask": mask, "dirichlet_values": values})


def _relative_residual(A, x: np.ndarray, b: np.ndarray) -> float:
    scale = np.linalg.norm(b)
    r = np.linalg.norm(A @ x - b)
    return float(r / scale) if scale > 0.0 else float(r)


def solve(system: GlobalSystem) -> DiscreteSolution:
    """Sparse LU with partial pivoting, one refinement step if needed, 1-norm condition estimate"""
    A = system.matrix.tocsc()
    b = system.rhs
    n = A.shape[0]
    try:
        start = time.perf_counter()
        # the VEM pattern is structurally symmetric
        lu = splu(A, permc_spec="MMD_AT_PLUS_A")
        factor_ms = (time.perf_counter() - start) * 1000.0
        x = lu.solve(b)
    except RuntimeError as e:
        logger.error(f"SOLVE: Factorization failed: {e}")
        raise SolveError(f"sparse factorization failed: {e}", n_dofs=n) from e

    residual = _relative_residual(A, x, b)
    refined = False
    if residual > REFINE_RESIDUAL:
        logger.warning(f"SOLVE: Residual {residual:.3e} above {REFINE_RESIDUAL:.0e}, applying one refinement step")
        x = x + lu.solve(b - A @ x)
        residual = _relative_residual(A, x, b)
        refined = True
    if not np.all(np.isfinite(x)) or not residual <= MAX_RESIDUAL:
        raise SolveError(f"linear solve residual {residual:.3e} exceeds {MAX_RESIDUAL:.0e}", n_dofs=n, residual=residual)

    inverse = LinearOperator(
        (n, n),
        matvec=lu.solve,
        rmatvec=lambda v: lu.solve(v, trans="T"),
        dtype=float,
    )
    cond = float(onenormest(A, t=1) * onenormest(inverse, t=1))
    report = SolveReport(n_dofs=n, residual=residual, cond_estimate=cond, factor_time_ms=factor_ms, refined=refined)
    logger.info(f"SOLVE: {n} DOFs, residual {residual:.3e}, cond ~ {cond:.3e}, factor {factor_ms:.1f} ms")
    return DiscreteSolution(
        values=x, mesh=system.mesh, k=system.k, chart=system.chart, dof_map=system.dof_map, report=report
    )


def solve_two_chart(
    mesh_north: PolyMesh,
    mesh_south: PolyMesh,
    k: int,
    interface_data: ScalarField,
    forcing_north: Optional[ScalarField] = None,
    forcing_south: Optional[ScalarField] = None,
    stab_kind: StabKind = StabKind.AUTO,
) -> Tuple[DiscreteSolution, DiscreteSolution]:
    """Each hemisphere solved on its stereographic chart with exact data on the equator; no iteration"""
    solutions = []
    for name, mesh, forcing in (
        ("stereo_north", mesh_north, forcing_north),
        ("stereo_south", mesh_south, forcing_south),
    ):
        chart = make_chart(name)
        logger.info(f"SOLVE: Hemisphere {name}")
        system = assemble(mesh, chart, k, stab_kind=stab_kind, forcing=forcing)
        solutions.append(solve(apply_dirichlet(system, interface_data)))
    return solutions[0], solutions[1]
