"""
Per-element virtual element machinery: DOF layout, elliptic projector,
L2 projectors through the enhanced space, stabilized local forms and the
local load vector.

Local DOF order: vertices, then the k-1 interior Gauss-Lobatto nodes of each
edge (edge j runs from vertex j to vertex j+1), then the scaled moments
against the degree k-2 monomials.
"""
import logging
from typing import Callable, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.spatial.distance import pdist

from ..exceptions import SingularProjector, UnsupportedOrder
from ..models import Chart, PolyMesh, StabKind
from .chart import pde_coefficients_at
from .quadbasis import (
    ScaledMonomialBasis,
    basis_size,
    exponent_index,
    gauss_lobatto_rule,
    laplacian_coefficients,
    monomial_eval,
    monomial_mass_matrix,
    polygon_area_centroid,
    polygon_quadrature,
    scaled_monomials,
)

logger = logging.getLogger(__name__)

MAX_ORDER = 4
PROJECTOR_COND_LIMIT = 1e14
DRECIPE_FLOOR = 1e-12


class ElementGeometry(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    vertices: np.ndarray
    area: float
    centroid: np.ndarray
    diameter: float

    @classmethod
    def from_vertices(cls, vertices) -> "ElementGeometry":
        vertices = np.asarray(vertices, dtype=float)
        area, centroid = polygon_area_centroid(vertices)
        return cls(vertices=vertices, area=area, centroid=centroid, diameter=float(pdist(vertices).max()))

    @classmethod
    def from_mesh(cls, mesh: PolyMesh, cell: int) -> "ElementGeometry":
        return cls(
            vertices=mesh.cell_vertices(cell),
            area=float(mesh.cell_areas[cell]),
            centroid=mesh.cell_centroids[cell],
            diameter=float(mesh.cell_diameters[cell]),
        )


class DofLayout(BaseModel):
    """Local degrees of freedom and the boundary Gauss-Lobatto rule they sit on"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    k: int
    n_vertex: int
    n_edge: int
    per_edge: int
    n_moment: int
    total: int
    nodal_points: np.ndarray
    boundary_points: np.ndarray
    boundary_dofs: np.ndarray
    boundary_weights: np.ndarray
    boundary_normals: np.ndarray

    @property
    def n_nodal(self) -> int:
        return self.n_vertex + self.n_edge * self.per_edge

    def vertex_index(self, vertex: int) -> int:
        return vertex

    def edge_index(self, edge: int, slot: int) -> int:
        return self.n_vertex + edge * self.per_edge + slot

    def moment_index(self, beta: int) -> int:
        return self.n_nodal + beta


class LocalProjectors(BaseModel):
    """Projector matrices in scaled-monomial coordinates"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    layout: DofLayout
    basis: ScaledMonomialBasis
    H: np.ndarray
    D: np.ndarray
    B: np.ndarray
    G_proj: np.ndarray
    Pi_nabla: np.ndarray
    Pi0_k: np.ndarray
    Pi0_km1: np.ndarray
    Pi0_grad: Tuple[np.ndarray, np.ndarray]


class LocalForms(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    A: np.ndarray
    A_consistency: np.ndarray
    S: np.ndarray
    Badv: np.ndarray
    C: np.ndarray
    load: np.ndarray
    stab_kind: StabKind


def _check_order(k: int) -> None:
    if not 1 <= k <= MAX_ORDER:
        raise UnsupportedOrder(f"order k={k} not supported (1..{MAX_ORDER})", k=k)


def dof_layout(cell: ElementGeometry, k: int) -> DofLayout:
    _check_order(k)
    rule = gauss_lobatto_rule(k + 1)
    V = cell.vertices
    W = np.roll(V, -1, axis=0)
    m = V.shape[0]
    t = rule.nodes
    points = 0.5 * (1.0 - t)[None, :, None] * V[:, None, :] + 0.5 * (1.0 + t)[None, :, None] * W[:, None, :]

    dofs = np.empty((m, k + 1), dtype=np.int64)
    dofs[:, 0] = np.arange(m)
    dofs[:, k] = (np.arange(m) + 1) % m
    if k > 1:
        dofs[:, 1:k] = m + np.arange(m)[:, None] * (k - 1) + np.arange(k - 1)[None, :]

    edge = W - V
    length = np.linalg.norm(edge, axis=1)
    normals = np.stack([edge[:, 1], -edge[:, 0]], axis=-1) / length[:, None]
    weights = 0.5 * length[:, None] * rule.weights[None, :]
    nodal = np.vstack([V, points[:, 1:k, :].reshape(-1, 2)])
    n_moment = basis_size(k - 2)

    return DofLayout(
        k=k,
        n_vertex=m,
        n_edge=m,
        per_edge=k - 1,
        n_moment=n_moment,
        total=m + m * (k - 1) + n_moment,
        nodal_points=nodal,
        boundary_points=points.reshape(-1, 2),
        boundary_dofs=dofs.ravel(),
        boundary_weights=weights.ravel(),
        boundary_normals=np.repeat(normals, k + 1, axis=0),
    )


def _boundary_matrix(layout: DofLayout, values: np.ndarray) -> np.ndarray:
    """(nb, n) boundary samples scattered onto DOF columns: out[a, dof] += sum_j values[j, a]"""
    out_t = np.zeros((layout.total, values.shape[1]))
    np.add.at(out_t, layout.boundary_dofs, values)
    return out_t.T


def _basis_and_mass(cell: ElementGeometry, k: int, basis, H):
    if basis is None:
        basis = scaled_monomials(k, cell.centroid, cell.diameter)
    if H is None:
        H = monomial_mass_matrix(basis, polygon_quadrature(cell.vertices, 2 * k, check=False))
    return basis, H


def elliptic_projector(
    cell: ElementGeometry,
    k: int,
    layout: DofLayout,
    basis: Optional[ScaledMonomialBasis] = None,
    H: Optional[np.ndarray] = None,
):
    """D, B, G and Pi_nabla = G^-1 B with the boundary-average constraint on the constant mode"""
    basis, H = _basis_and_mass(cell, k, basis, H)
    nk2 = basis_size(k - 2)
    area = cell.area

    values_nodal, _, _ = monomial_eval(basis, layout.nodal_points)
    D = np.vstack([values_nodal, H[:nk2, :] / area])

    _, grads, _ = monomial_eval(basis, layout.boundary_points)
    flux = np.einsum("qad,qd->qa", grads, layout.boundary_normals)
    B = _boundary_matrix(layout, layout.boundary_weights[:, None] * flux)
    for alpha, terms in enumerate(laplacian_coefficients(basis)):
        for beta, coefficient in terms:
            B[alpha, layout.moment_index(beta)] -= area * coefficient
    B[0, :] = 0.0
    np.add.at(B[0], layout.boundary_dofs, layout.boundary_weights)

    G = B @ D
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > PROJECTOR_COND_LIMIT:
        raise SingularProjector(f"elliptic projector system is singular (cond {cond:.3e})", k=k, cond=float(cond))
    Pi_nabla = np.linalg.solve(G, B)
    return D, B, G, Pi_nabla


def l2_projectors(
    cell: ElementGeometry,
    k: int,
    layout: DofLayout,
    Pi_nabla: np.ndarray,
    H: Optional[np.ndarray] = None,
    basis: Optional[ScaledMonomialBasis] = None,
):
    """Pi0_k, Pi0_{k-1} and the two components of Pi0_{k-1} grad"""
    basis, H = _basis_and_mass(cell, k, basis, H)
    nk1 = basis_size(k - 1)
    nk2 = basis_size(k - 2)
    area = cell.area
    h = basis.diameter

    # moments up to k-2 are DOFs; degrees k-1 and k come from Pi_nabla (enhancement)
    C = H @ Pi_nabla
    C[:nk2, :] = 0.0
    for beta in range(nk2):
        C[beta, layout.moment_index(beta)] = area
    Pi0_k = np.linalg.solve(H, C)
    H1 = H[:nk1, :nk1]
    Pi0_km1 = np.linalg.solve(H1, C[:nk1])

    values, _, _ = monomial_eval(basis, layout.boundary_points)
    weighted = layout.boundary_weights[:, None] * values[:, :nk1]
    Ex = _boundary_matrix(layout, layout.boundary_normals[:, 0:1] * weighted)
    Ey = _boundary_matrix(layout, layout.boundary_normals[:, 1:2] * weighted)
    for beta, (a, b) in enumerate(basis.exponents[:nk1]):
        if a >= 1:
            Ex[beta, layout.moment_index(exponent_index(a - 1, b))] -= a / h * area
        if b >= 1:
            Ey[beta, layout.moment_index(exponent_index(a, b - 1))] -= b / h * area
    return Pi0_k, Pi0_km1, (np.linalg.solve(H1, Ex), np.linalg.solve(H1, Ey))


def local_projectors(cell: ElementGeometry, k: int) -> LocalProjectors:
    """All projector matrices of one element; they depend on geometry and k only"""
    layout = dof_layout(cell, k)
    basis, H = _basis_and_mass(cell, k, None, None)
    D, B, G, Pi_nabla = elliptic_projector(cell, k, layout, basis, H)
    Pi0_k, Pi0_km1, Pi0_grad = l2_projectors(cell, k, layout, Pi_nabla, H, basis)
    return LocalProjectors(
        layout=layout,
        basis=basis,
        H=H,
        D=D,
        B=B,
        G_proj=G,
        Pi_nabla=Pi_nabla,
        Pi0_k=Pi0_k,
        Pi0_km1=Pi0_km1,
        Pi0_grad=Pi0_grad,
    )


def stabilization(
    layout: DofLayout,
    Pi_nabla: np.ndarray,
    D: np.ndarray,
    stab_kind: StabKind,
    consistency_matrix: np.ndarray,
) -> np.ndarray:
    """Symmetric form acting on (I - D Pi_nabla), the non-polynomial part of a DOF vector"""
    R = np.eye(layout.total) - D @ Pi_nabla
    if stab_kind is StabKind.DOFI_DOFI:
        # scaled-moment duals dominate the full trace once k >= 3, so tau comes from the nodal block
        nodal = np.diag(consistency_matrix)[:layout.n_nodal]
        tau = float(np.mean(nodal))
        S = tau * (R.T @ R)
    elif stab_kind is StabKind.D_RECIPE:
        diagonal = np.diag(consistency_matrix)
        floor = DRECIPE_FLOOR * np.max(diagonal)
        S = R.T @ (np.maximum(diagonal, floor)[:, None] * R)
    else:
        raise ValueError(f"stabilization {stab_kind} must be resolved before use")
    return 0.5 * (S + S.T)


def local_load(
    cell: ElementGeometry,
    k: int,
    chart: Chart,
    forcing: Optional[Callable[[np.ndarray], np.ndarray]],
    projectors: Optional[LocalProjectors] = None,
) -> np.ndarray:
    """load_i = int_P sqrt(det G) f Pi0_k phi_i"""
    proj = projectors or local_projectors(cell, k)
    if forcing is None:
        return np.zeros(proj.layout.total)
    rule = polygon_quadrature(cell.vertices, 2 * k + 4, check=False)
    values, _, _ = monomial_eval(proj.basis, rule.points)
    weight = pde_coefficients_at(chart, rule.points).weight
    f = np.asarray(forcing(rule.points), dtype=float)
    return (values @ proj.Pi0_k).T @ (rule.weights * weight * f)


def local_forms(
    cell: ElementGeometry,
    k: int,
    chart: Chart,
    w_hat=(0.0, 0.0),
    gamma: float = 0.0,
    stab_kind: StabKind = StabKind.AUTO,
    forcing: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    projectors: Optional[LocalProjectors] = None,
) -> LocalForms:
    """Stiffness, advection, reaction and load of one element"""
    _check_order(k)
    proj = projectors or local_projectors(cell, k)
    kind = stab_kind.resolve(k)
    nk1 = basis_size(k - 1)

    rule = polygon_quadrature(cell.vertices, 2 * k + 4, check=False)
    coefficients = pde_coefficients_at(chart, rule.points, w_hat, gamma)
    values, _, _ = monomial_eval(proj.basis, rule.points)
    low = values[:, :nk1]
    w = rule.weights

    gx = low @ proj.Pi0_grad[0]
    gy = low @ proj.Pi0_grad[1]
    A_cons = gx.T @ ((w * coefficients.k11)[:, None] * gx) + gy.T @ ((w * coefficients.k22)[:, None] * gy)
    A_cons = 0.5 * (A_cons + A_cons.T)
    S = stabilization(proj.layout, proj.Pi_nabla, proj.D, kind, A_cons)

    pv = low @ proj.Pi0_km1
    advective = coefficients.w_tilde[:, 0:1] * gx + coefficients.w_tilde[:, 1:2] * gy
    Badv = pv.T @ (w[:, None] * advective)
    C = pv.T @ ((w * coefficients.gamma_tilde)[:, None] * pv)
    C = 0.5 * (C + C.T)

    if forcing is None:
        load = np.zeros(proj.layout.total)
    else:
        f = np.asarray(forcing(rule.points), dtype=float)
        load = (values @ proj.Pi0_k).T @ (w * coefficients.weight * f)

    return LocalForms(A=A_cons + S, A_consistency=A_cons, S=S, Badv=Badv, C=C, load=load, stab_kind=kind)


def cell_moments(cell: ElementGeometry, k: int, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """(1/|P|) int_P fn m_beta for the degree k-2 scaled monomials"""
    n_moment = basis_size(k - 2)
    if n_moment == 0:
        return np.empty(0)
    basis = scaled_monomials(k - 2, cell.centroid, cell.diameter)
    rule = polygon_quadrature(cell.vertices, 2 * k + 4, check=False)
    values, _, _ = monomial_eval(basis, rule.points)
    f = np.asarray(fn(rule.points), dtype=float)
    return values.T @ (rule.weights * f) / cell.area


def interpolate(cell: ElementGeometry, layout: DofLayout, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """DOF vector of a function: nodal values and scaled moments against M_{k-2}"""
    nodal = np.asarray(fn(layout.nodal_points), dtype=float)
    return np.concatenate([nodal, cell_moments(cell, layout.k, fn)])
