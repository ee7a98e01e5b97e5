"""
Convergence-study pipeline: charts, meshes per level, one solve per
(order, level), error tables and result files.
"""
import asyncio
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .config import get_settings
from .models import (
    Chart,
    ConvergenceReport,
    ConvergenceRow,
    DomainKind,
    EquationCoefficients,
    ExperimentConfig,
    MeshFamily,
    PolyMesh,
    RegularityRow,
)
from .services.assembly import apply_dirichlet, assemble, solve, solve_two_chart
from .services.chart import make_chart, metric_bounds
from .services.mesh import (
    generate_triangulation,
    generate_voronoi_polymesh,
    import_mesh,
    mesh_checksum,
    regularity_report,
    triangulation_cell_count,
)
from .services.mms import ManufacturedCase, compute_errors, eoc_table
from .services.reporting import write_outputs

logger = logging.getLogger(__name__)

RHO_WARNING = 0.05


class LevelMesh(BaseModel):
    level: int
    mesh: PolyMesh
    n_boundary_nodes: int
    checksum: str


class ExperimentResult(BaseModel):
    """What one run produced"""
    config_hash: str
    output_dir: str
    reports: List[ConvergenceReport] = Field(default_factory=list)
    regularity: List[RegularityRow] = Field(default_factory=list)
    metric_bounds: Dict[str, float] = Field(default_factory=dict)
    files: Dict[str, str] = Field(default_factory=dict)


def build_charts(config: ExperimentConfig) -> List[Chart]:
    """One Monge chart on the quarter disk, or the stereographic pair for the sphere"""
    if config.test_case == 4:
        return [make_chart("stereo_north"), make_chart("stereo_south")]
    return [make_chart("monge_trig", r=config.r, a=config.a, freq=config.freq, domain=DomainKind.QUARTER_DISK)]


def chart_parameters(config: ExperimentConfig) -> Dict[str, Any]:
    if config.test_case == 4:
        return {"chart": "stereo_north+stereo_south", "domain": DomainKind.UNIT_DISK.value}
    return {"chart": "monge_trig", "domain": DomainKind.QUARTER_DISK.value, "r": config.r, "a": config.a, "freq": config.freq}


def level_mesh(config: ExperimentConfig, level: int) -> LevelMesh:
    """Mesh of one refinement level for the configured test case"""
    domain = DomainKind.UNIT_DISK if config.test_case == 4 else DomainKind.QUARTER_DISK
    n_boundary = config.n_boundary_nodes
    if config.mesh_files is not None:
        mesh = import_mesh(config.mesh_files[level])
        # imported meshes report every boundary vertex
        n_boundary = int(np.count_nonzero(mesh.boundary_vertex_flags))
    elif config.test_case == 2:
        # fixed cell count, only the boundary resolution grows
        n_boundary = config.n_boundary_nodes * 2**level
        mesh = generate_voronoi_polymesh(domain, config.n_cells, n_boundary, config.seed, config.lloyd_iterations)
    elif config.mesh_family is MeshFamily.TRI:
        mesh = generate_triangulation(domain, level, n_boundary)
    else:
        if config.test_case == 4:
            n_cells = config.n_cells * 4**level
        else:
            n_cells = triangulation_cell_count(domain, level, n_boundary)
        mesh = generate_voronoi_polymesh(domain, n_cells, n_boundary, config.seed, config.lloyd_iterations)
    return LevelMesh(level=level, mesh=mesh, n_boundary_nodes=n_boundary, checksum=mesh_checksum(mesh))


def audit_mesh(config: ExperimentConfig, item: LevelMesh) -> RegularityRow:
    mesh = item.mesh
    report = regularity_report(mesh)
    if not report.all_star_shaped or report.rho_estimate <= RHO_WARNING:
        logger.warning(
            f"MESH: Level {item.level} fails the regularity audit "
            f"(rho={report.rho_estimate:.3g}, star-shaped={report.all_star_shaped})"
        )
    return RegularityRow(
        test_case=config.test_case,
        mesh_family=config.mesh_family,
        level=item.level,
        n_cells=mesh.n_cells,
        n_boundary_nodes=item.n_boundary_nodes,
        h=mesh.h,
        rho_estimate=report.rho_estimate,
        edge_ratio=report.edge_ratio,
        min_edge_over_hP=report.min_edge_over_hP,
        all_star_shaped=report.all_star_shaped,
        mesh_checksum=item.checksum,
    )


def solve_level(config: ExperimentConfig, charts: List[Chart], item: LevelMesh, k: int) -> ConvergenceRow:
    """Assemble, solve and measure one (order, level) pair"""
    start = time.perf_counter()
    mesh = item.mesh
    if config.test_case == 4:
        north = ManufacturedCase(chart=charts[0])
        south = ManufacturedCase(chart=charts[1])
        sol_n, sol_s = solve_two_chart(
            mesh, mesh, k, north.exact, north.forcing, south.forcing, config.stab_kind
        )
        e_n = compute_errors(sol_n, north, config.surface_weighted)
        e_s = compute_errors(sol_s, south, config.surface_weighted)
        err_l2 = (e_n[0] ** 2 + e_s[0] ** 2) ** 0.5
        err_h1 = (e_n[1] ** 2 + e_s[1] ** 2) ** 0.5
        n_dofs = sol_n.report.n_dofs + sol_s.report.n_dofs
        cond = max(sol_n.report.cond_estimate, sol_s.report.cond_estimate)
    else:
        case = ManufacturedCase(chart=charts[0], w_hat=config.w_hat, gamma=config.gamma)
        coefficients = EquationCoefficients(w_hat=config.w_hat, gamma=config.gamma)
        system = assemble(mesh, case.chart, k, coefficients, config.stab_kind, case.forcing)
        solution = solve(apply_dirichlet(system, case.exact))
        err_l2, err_h1 = compute_errors(solution, case, config.surface_weighted)
        n_dofs = solution.report.n_dofs
        cond = solution.report.cond_estimate
    runtime_ms = (time.perf_counter() - start) * 1000.0

    logger.info(f"EXPERIMENT: k={k} level={item.level}: err_l2={err_l2:.4e} err_h1={err_h1:.4e} cond={cond:.3e}")
    return ConvergenceRow(
        test_case=config.test_case,
        mesh_family=config.mesh_family,
        k=k,
        level=item.level,
        h=mesh.h,
        n_cells=mesh.n_cells,
        n_dofs=n_dofs,
        err_l2=float(err_l2),
        err_h1=float(err_h1),
        cond_estimate=cond,
        runtime_ms=runtime_ms if config.record_timings else None,
        config_hash=config.config_hash(),
        mesh_checksum=item.checksum,
    )


async def _solve_levels(config: ExperimentConfig, charts: List[Chart], meshes: List[LevelMesh], k: int) -> List[ConvergenceRow]:
    if config.parallel_levels:
        tasks = [asyncio.to_thread(solve_level, config, charts, item, k) for item in meshes]
        rows = await asyncio.gather(*tasks)
        return sorted(rows, key=lambda row: row.level)
    return [solve_level(config, charts, item, k) for item in meshes]


def resolve_output_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir or get_settings().output_dir)


async def run_experiment_async(config: ExperimentConfig) -> ExperimentResult:
    """Run every order on every level and write the result files"""
    settings = get_settings()
    output_dir = resolve_output_dir(config)
    config_hash = config.config_hash()
    try:
        logger.info(f"EXPERIMENT: Starting test case {config.test_case} ({config_hash[:12]})")
        logger.info(
            f"EXPERIMENT: Orders {config.orders}, {config.levels} levels, {config.mesh_family.value} meshes, "
            f"stabilization {config.stab_kind.value}"
        )

        # Step 1: Charts
        logger.info("EXPERIMENT: Step 1 - Building charts...")
        charts = build_charts(config)
        bounds = metric_bounds(charts[0])

        # Step 2: Meshes (shared by all orders)
        logger.info("EXPERIMENT: Step 2 - Generating meshes...")
        meshes = [level_mesh(config, level) for level in range(config.levels)]
        regularity = [audit_mesh(config, item) for item in meshes]

        # Step 3: Solves
        logger.info("EXPERIMENT: Step 3 - Solving...")
        reports: List[ConvergenceReport] = []
        for k in config.orders:
            rows = await _solve_levels(config, charts, meshes, k)
            reports.append(
                eoc_table(
                    rows,
                    k,
                    config.mesh_family,
                    config.stab_kind.resolve(k),
                    chart_parameters(config),
                    config.fit_window,
                )
            )

        # Step 4: Files
        logger.info("EXPERIMENT: Step 4 - Writing results...")
        files = write_outputs(
            output_dir,
            reports,
            regularity,
            config.model_dump(mode="json"),
            config_hash,
            bounds,
            settings.plot_format,
        )
        logger.info(f"EXPERIMENT: Completed, results in {output_dir}")
        return ExperimentResult(
            config_hash=config_hash,
            output_dir=str(output_dir),
            reports=reports,
            regularity=regularity,
            metric_bounds=bounds,
            files={name: str(path) for name, path in files.items()},
        )
    except Exception as e:
        logger.error(f"EXPERIMENT: Test case {config.test_case} failed: {e}")
        logger.exception("Full traceback:")
        raise


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    return asyncio.run(run_experiment_async(config))


def case_summary(result: ExperimentResult) -> List[Tuple[int, Optional[float], Optional[float]]]:
    """(k, L2 slope, H1 slope) per order"""
    return [(report.k, report.slope_l2, report.slope_h1) for report in result.reports]
