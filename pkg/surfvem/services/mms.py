"""
Manufactured solution u = sin(2 pi x) sin(2 pi y), its intrinsic forcing,
discrete error norms through Pi0_k and convergence rates.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..models import Chart, ConvergenceReport, ConvergenceRow, MeshFamily, StabKind
from .assembly import DiscreteSolution
from .chart import metric_at, metric_derivatives_at
from .quadbasis import monomial_eval, polygon_quadrature
from .vemcore import ElementGeometry, local_projectors

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
FD_STEP = 5e-4


class ManufacturedCase(BaseModel):
    """u(x, y) = sin(2 pi x) sin(2 pi y) on a chart with advection w^ and reaction gamma"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    chart: Chart
    w_hat: Tuple[float, float] = Field(default=(0.0, 0.0))
    gamma: float = 0.0

    def exact(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.sin(TWO_PI * s[..., 0]) * np.sin(TWO_PI * s[..., 1])

    def exact_gradient(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        x, y = s[..., 0], s[..., 1]
        return TWO_PI * np.stack(
            [np.cos(TWO_PI * x) * np.sin(TWO_PI * y), np.sin(TWO_PI * x) * np.cos(TWO_PI * y)], axis=-1
        )

    def forcing(self, s) -> np.ndarray:
        return forcing(self, s)


def forcing(case: ManufacturedCase, s) -> np.ndarray:
    """Closed-form -Delta_G u + w . grad_G u + gamma u for the diagonal metric of the chart"""
    s = np.asarray(s, dtype=float)
    metric = metric_at(case.chart, s)
    deriv = metric_derivatives_at(case.chart, s)
    g11, g22, det = metric.g11, metric.g22, metric.det_g
    sx, cx = np.sin(TWO_PI * s[..., 0]), np.cos(TWO_PI * s[..., 0])
    sy, cy = np.sin(TWO_PI * s[..., 1]), np.cos(TWO_PI * s[..., 1])
    w1, w2 = case.w_hat

    value = sy * (TWO_PI * w1 * cx * metric.inv_sqrt_g11 + case.gamma * sx)
    value = value + np.pi * sx * cy * (g11 * deriv.dg22_dy - deriv.dg11_dy * g22) / (g22 * det)
    value = value + np.pi * sy * (
        cx * (deriv.dg11_dx * g22 - g11 * deriv.dg22_dx) / (g11 * det)
        + 4.0 * np.pi * sx * (g11 + g22) / det
    )
    return value + TWO_PI * w2 * sx * cy * metric.inv_sqrt_g22


def _five_point(f, step: float) -> np.ndarray:
    return (f(-2.0) - 8.0 * f(-1.0) + 8.0 * f(1.0) - f(2.0)) / (12.0 * step)


def apply_strong_operator(case: ManufacturedCase, s, step: float = FD_STEP) -> np.ndarray:
    """Fourth-order central differences of the chart fluxes sqrt(g22/g11) u_x and sqrt(g11/g22) u_y"""
    s = np.asarray(s, dtype=float)

    def fluxes(p):
        metric = metric_at(case.chart, p)
        grad = case.exact_gradient(p)
        return np.sqrt(metric.g22 / metric.g11) * grad[..., 0], np.sqrt(metric.g11 / metric.g22) * grad[..., 1]

    ex = np.array([step, 0.0])
    ey = np.array([0.0, step])
    dfx = _five_point(lambda offset: fluxes(s + offset * ex)[0], step)
    dfy = _five_point(lambda offset: fluxes(s + offset * ey)[1], step)

    metric = metric_at(case.chart, s)
    grad = case.exact_gradient(s)
    w1, w2 = case.w_hat
    advection = w1 * grad[..., 0] * metric.inv_sqrt_g11 + w2 * grad[..., 1] * metric.inv_sqrt_g22
    return -(dfx + dfy) / metric.sqrt_det_g + advection + case.gamma * case.exact(s)


def compute_errors(
    solution: DiscreteSolution,
    case: ManufacturedCase,
    surface_weighted: bool = False,
    quadrature_degree: Optional[int] = None,
) -> Tuple[float, float]:
    """L2 and broken H1 errors of u - Pi0_k u_h, summed cell by cell"""
    k = solution.k
    degree = quadrature_degree or 2 * k + 4
    mesh = solution.mesh
    l2 = np.zeros(mesh.n_cells)
    semi = np.zeros(mesh.n_cells)
    for c in range(mesh.n_cells):
        cell = ElementGeometry.from_mesh(mesh, c)
        projectors = local_projectors(cell, k)
        coeffs = projectors.Pi0_k @ solution.values[solution.dof_map.cell_dofs[c]]
        rule = polygon_quadrature(cell.vertices, degree, check=False)
        values, grads, _ = monomial_eval(projectors.basis, rule.points)
        err = case.exact(rule.points) - values @ coeffs
        grad_err = case.exact_gradient(rule.points) - np.einsum("qbd,b->qd", grads, coeffs)
        w = rule.weights
        if surface_weighted:
            w = w * metric_at(case.chart, rule.points).sqrt_det_g
        l2[c] = np.sum(w * err**2)
        semi[c] = np.sum(w * np.sum(grad_err**2, axis=-1))
    err_l2 = float(np.sqrt(np.sum(l2)))
    err_h1 = float(np.sqrt(np.sum(l2) + np.sum(semi)))
    logger.info(f"MMS: k={k}, {mesh.n_cells} cells: err_l2={err_l2:.4e}, err_h1={err_h1:.4e}")
    return err_l2, err_h1


def eoc_rates(h: Sequence[float], errors: Sequence[float]) -> List[Optional[float]]:
    """log(e_{l-1}/e_l) / log(h_{l-1}/h_l); None at level 0"""
    rates: List[Optional[float]] = [None]
    for level in range(1, len(errors)):
        if errors[level] <= 0.0 or errors[level - 1] <= 0.0 or h[level] == h[level - 1]:
            rates.append(None)
            continue
        rates.append(float(np.log(errors[level - 1] / errors[level]) / np.log(h[level - 1] / h[level])))
    return rates


def fit_slope(h: Sequence[float], errors: Sequence[float], window: Optional[int] = None) -> Optional[float]:
    """Least-squares slope of log(error) against log(h) over the last `window` levels"""
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if window is not None:
        h, errors = h[-window:], errors[-window:]
    keep = errors > 0.0
    if np.count_nonzero(keep) < 2 or np.ptp(h[keep]) == 0.0:
        return None
    slope, _ = np.polyfit(np.log(h[keep]), np.log(errors[keep]), 1)
    return float(slope)


def eoc_table(
    rows: Sequence[ConvergenceRow],
    k: int,
    mesh_family: MeshFamily,
    stab_kind: StabKind,
    chart_parameters: Optional[dict] = None,
    fit_window: Optional[int] = None,
) -> ConvergenceReport:
    """Fill per-level rates and the fitted slopes of one order"""
    rows = sorted(rows, key=lambda row: row.level)
    h = [row.h for row in rows]
    l2 = [row.err_l2 for row in rows]
    h1 = [row.err_h1 for row in rows]
    filled = [
        row.model_copy(update={"eoc_l2": r2, "eoc_h1": r1})
        for row, r2, r1 in zip(rows, eoc_rates(h, l2), eoc_rates(h, h1))
    ]
    report = ConvergenceReport(
        k=k,
        mesh_family=mesh_family,
        stab_kind=stab_kind,
        chart_parameters=chart_parameters or {},
        rows=filled,
        slope_l2=fit_slope(h, l2, fit_window),
        slope_h1=fit_slope(h, h1, fit_window),
    )
    if report.slope_l2 is not None and report.slope_h1 is not None:
        logger.info(f"MMS: k={k} fitted slopes: L2 {report.slope_l2:.3f}, H1 {report.slope_h1:.3f}")
    return report
