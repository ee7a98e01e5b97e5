"""
Scaled monomial bases, 1D Gauss-Lobatto rules and polygon quadrature.
"""
import logging
from functools import lru_cache
from typing import List, Tuple

import numpy as np
from numpy.polynomial import legendre
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import roots_jacobi, roots_legendre

from ..exceptions import GeometryError, UnsupportedOrder

logger = logging.getLogger(__name__)

MAX_LOBATTO_POINTS = 8
MAX_POLYGON_DEGREE = 20


class LobattoRule(BaseModel):
    """Gauss-Lobatto rule on [-1, 1]"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    nodes: np.ndarray
    weights: np.ndarray
    exact_degree: int


class QuadratureRule(BaseModel):
    """Points and weights on a planar region"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    points: np.ndarray = Field(..., description="(nq, 2) quadrature points")
    weights: np.ndarray = Field(..., description="(nq,) weights")
    exact_degree: int


class ScaledMonomialBasis(BaseModel):
    """m_alpha(x) = ((x - x_P) / h_P)^alpha, |alpha| <= degree, graded lexicographic"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    degree: int
    centroid: np.ndarray
    diameter: float
    exponents: Tuple[Tuple[int, int], ...]

    @property
    def size(self) -> int:
        return len(self.exponents)


def monomial_exponents(degree: int) -> Tuple[Tuple[int, int], ...]:
    """(0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ..."""
    return tuple((d - j, j) for d in range(degree + 1) for j in range(d + 1))


def basis_size(degree: int) -> int:
    return 0 if degree < 0 else (degree + 1) * (degree + 2) // 2


def exponent_index(a: int, b: int) -> int:
    """Position of x^a y^b in the graded ordering"""
    d = a + b
    return basis_size(d - 1) + b


@lru_cache(maxsize=None)
def gauss_lobatto_rule(n_points: int) -> LobattoRule:
    """Legendre-Gauss-Lobatto nodes: +-1 and the roots of P'_{n-1}"""
    if not 2 <= n_points <= MAX_LOBATTO_POINTS:
        raise UnsupportedOrder(
            f"Gauss-Lobatto rule with {n_points} points not available (2..{MAX_LOBATTO_POINTS})",
            n_points=n_points,
        )
    p = legendre.Legendre.basis(n_points - 1)
    interior = np.sort(p.deriv().roots().real) if n_points > 2 else np.empty(0)
    nodes = np.concatenate([[-1.0], interior, [1.0]])
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 2.0 / (n_points * (n_points - 1) * p(nodes) ** 2)
    weights = 0.5 * (weights + weights[::-1])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return LobattoRule(nodes=nodes, weights=weights, exact_degree=2 * n_points - 3)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Collapsed-coordinate rule on the reference triangle (0,0), (1,0), (0,1)"""
    if degree < 0 or degree > MAX_POLYGON_DEGREE:
        raise UnsupportedOrder(f"triangle rule of degree {degree} not available", degree=degree)
    n = max(1, (degree + 2) // 2)
    t, wt = roots_legendre(n)
    u = 0.5 * (t + 1.0)
    wu = 0.5 * wt
    s, ws = roots_jacobi(n, 1.0, 0.0)
    v = 0.5 * (s + 1.0)
    wv = 0.25 * ws
    U, V = np.meshgrid(u, v, indexing="ij")
    WU, WV = np.meshgrid(wu, wv, indexing="ij")
    points = np.stack([(U * (1.0 - V)).ravel(), V.ravel()], axis=-1)
    weights = (WU * WV).ravel()
    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(points=points, weights=weights, exact_degree=2 * n - 1)


def polygon_area_centroid(vertices: np.ndarray) -> Tuple[float, np.ndarray]:
    """Shoelace area and area-weighted centroid"""
    x, y = vertices[:, 0], vertices[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * np.sum(cross)
    cx = np.sum((x + xn) * cross) / (6.0 * area)
    cy = np.sum((y + yn) * cross) / (6.0 * area)
    return float(area), np.array([cx, cy])


def _segments_cross(p1, p2, q1, q2) -> np.ndarray:
    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return (d1 * d2 < 0) & (d3 * d4 < 0)


def is_simple_polygon(vertices: np.ndarray) -> bool:
    """No two non-adjacent edges cross"""
    m = vertices.shape[0]
    if m < 3:
        return False
    if m == 3:
        return True
    start = vertices
    end = np.roll(vertices, -1, axis=0)
    i, j = np.triu_indices(m, k=2)
    keep = ~((i == 0) & (j == m - 1))
    i, j = i[keep], j[keep]
    return not bool(np.any(_segments_cross(start[i], end[i], start[j], end[j])))


def polygon_quadrature(vertices, target_degree: int, check: bool = True) -> QuadratureRule:
    """Fan the polygon from its centroid and map a triangle rule onto each piece"""
    vertices = np.asarray(vertices, dtype=float)
    if check and not is_simple_polygon(vertices):
        raise GeometryError("polygon is self-intersecting", n_vertices=int(vertices.shape[0]))
    area, centroid = polygon_area_centroid(vertices)
    if area <= 0.0:
        raise GeometryError("polygon must be counterclockwise with positive area", area=area)
    ref = triangle_rule(target_degree)
    a = vertices - centroid
    b = np.roll(vertices, -1, axis=0) - centroid
    # signed sub-triangle areas; twice the area is the map Jacobian
    jac = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    xi = ref.points[:, 0]
    eta = ref.points[:, 1]
    points = centroid + xi[None, :, None] * a[:, None, :] + eta[None, :, None] * b[:, None, :]
    weights = jac[:, None] * ref.weights[None, :]
    return QuadratureRule(
        points=points.reshape(-1, 2), weights=weights.ravel(), exact_degree=ref.exact_degree
    )


def polygon_monomial_moment(vertices, p: int, q: int) -> float:
    """int_P x^p y^q via the divergence theorem: 1/(p+1) oint x^(p+1) y^q n_x ds"""
    vertices = np.asarray(vertices, dtype=float)
    n = (p + q + 3) // 2 + 1
    t, w = roots_legendre(n)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    start = vertices
    end = np.roll(vertices, -1, axis=0)
    pts = start[:, None, :] + t[None, :, None] * (end - start)[:, None, :]
    dy = (end - start)[:, 1]
    integrand = pts[..., 0] ** (p + 1) * pts[..., 1] ** q
    return float(np.sum(dy[:, None] * integrand * w[None, :]) / (p + 1))


def scaled_monomials(degree: int, centroid, diameter: float) -> ScaledMonomialBasis:
    return ScaledMonomialBasis(
        degree=degree,
        centroid=np.asarray(centroid, dtype=float),
        diameter=float(diameter),
        exponents=monomial_exponents(degree),
    )


def monomial_eval(basis: ScaledMonomialBasis, points) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Values (nq, nb), gradients (nq, nb, 2) and laplacians (nq, nb)"""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    h = basis.diameter
    xi = (points[:, 0] - basis.centroid[0]) / h
    eta = (points[:, 1] - basis.centroid[1]) / h
    k = basis.degree
    px = np.ones((points.shape[0], k + 1))
    py = np.ones((points.shape[0], k + 1))
    for e in range(1, k + 1):
        px[:, e] = px[:, e - 1] * xi
        py[:, e] = py[:, e - 1] * eta

    ea = np.array([alpha[0] for alpha in basis.exponents])
    eb = np.array([alpha[1] for alpha in basis.exponents])
    values = px[:, ea] * py[:, eb]
    grads = np.empty(values.shape + (2,))
    grads[..., 0] = ea * px[:, np.maximum(ea - 1, 0)] * py[:, eb] / h
    grads[..., 1] = eb * px[:, ea] * py[:, np.maximum(eb - 1, 0)] / h
    laps = (
        ea * (ea - 1) * px[:, np.maximum(ea - 2, 0)] * py[:, eb]
        + eb * (eb - 1) * px[:, ea] * py[:, np.maximum(eb - 2, 0)]
    ) / h**2
    return values, grads, laps


def monomial_mass_matrix(basis: ScaledMonomialBasis, rule: QuadratureRule) -> np.ndarray:
    """H_ab = int_P m_a m_b"""
    if rule.exact_degree < 2 * basis.degree:
        logger.warning(
            f"QUAD: Rule of degree {rule.exact_degree} under-integrates the degree-{basis.degree} mass matrix"
        )
    values, _, _ = monomial_eval(basis, rule.points)
    H = values.T @ (rule.weights[:, None] * values)
    return 0.5 * (H + H.T)


def laplacian_coefficients(basis: ScaledMonomialBasis) -> List[List[Tuple[int, float]]]:
    """Delta m_alpha expanded in the same basis: list of (index, coefficient)"""
    h2 = basis.diameter**2
    out: List[List[Tuple[int, float]]] = []
    for a, b in basis.exponents:
        terms = []
        if a >= 2:
            terms.append((exponent_index(a - 2, b), a * (a - 1) / h2))
        if b >= 2:
            terms.append((exponent_index(a, b - 2), b * (b - 1) / h2))
        out.append(terms)
    return out
