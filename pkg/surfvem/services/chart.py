"""
Surface charts: parametrizations, orthogonalized tangent frame, diagonal
metric tensor, its derivatives and the chart-form PDE coefficients.

Every function is vectorised over chart points of shape (..., 2).
"""
import logging
from typing import Annotated, Optional, Tuple

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, ValidationError

from ..exceptions import ConfigError, DomainError, SingularMetricError
from ..models import Chart, ChartKind, DomainKind

logger = logging.getLogger(__name__)

DOMAIN_TOL = 1e-12
METRIC_FLOOR = 1e-14
FRAME_STEP = 1e-6
DERIVATIVE_STEP = 1e-5

_NAMES = {kind.value: kind for kind in ChartKind if kind is not ChartKind.USER}
_DEFAULT_DOMAINS = {
    ChartKind.FLAT: DomainKind.UNIT_SQUARE,
    ChartKind.MONGE_TRIG: DomainKind.QUARTER_DISK,
    ChartKind.STEREO_NORTH: DomainKind.UNIT_DISK,
    ChartKind.STEREO_SOUTH: DomainKind.UNIT_DISK,
}

# single points reduce to numpy scalars
Array = Annotated[np.ndarray, BeforeValidator(np.asarray)]


class MetricData(BaseModel):
    """Metric package at a batch of chart points"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    g11: Array
    g22: Array
    det_g: Array
    sqrt_det_g: Array
    inv_g11: Array
    inv_g22: Array
    inv_sqrt_g11: Array
    inv_sqrt_g22: Array
    frame: Tuple[Array, Array]


class MetricDerivatives(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    dg11_dx: Array
    dg11_dy: Array
    dg22_dx: Array
    dg22_dy: Array


class PdeCoefficients(BaseModel):
    """K = sqrt(det G) G^-1, w~ = sqrt(det G) G^-1/2 w^, gamma~ = sqrt(det G) gamma"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    k11: Array
    k22: Array
    w_tilde: Array
    gamma_tilde: Array
    weight: Array

    @property
    def K(self) -> np.ndarray:
        """Diffusion tensor as (..., 2, 2)"""
        out = np.zeros(self.k11.shape + (2, 2))
        out[..., 0, 0] = self.k11
        out[..., 1, 1] = self.k22
        return out


def make_chart(
    name: str,
    r: Optional[float] = None,
    a: Optional[float] = None,
    freq: Optional[int] = None,
    domain: Optional[DomainKind] = None,
) -> Chart:
    """Build a built-in chart from its CLI name"""
    kind = _NAMES.get(name)
    if kind is None:
        raise ConfigError(f"unknown chart '{name}'", chart=name)
    try:
        chart = Chart(
            kind=kind,
            domain=domain or _DEFAULT_DOMAINS[kind],
            r=2.0 if r is None else r,
            a=0.0 if a is None else a,
            freq=5 if freq is None else freq,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid chart parameters: {e}", chart=name) from e
    if kind is ChartKind.MONGE_TRIG:
        _check_height(chart)
    logger.info(f"CHART: Built {name} on {chart.domain.value} (r={chart.r}, a={chart.a}, freq={chart.freq})")
    return chart


def _check_height(chart: Chart) -> None:
    rho = np.linspace(0.0, 1.0 + DOMAIN_TOL, 8193)
    F, _, _ = _monge_radial(chart, rho)
    if np.min(F) <= 0.0:
        raise DomainError(
            "height function is not real-valued on the domain: r - rho + a cos^2 must stay positive",
            r=chart.r, a=chart.a, freq=chart.freq,
        )


def _points(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != 2:
        raise DomainError(f"chart points need a trailing dimension of 2, got shape {s.shape}")
    return s


def inside_domain(domain: DomainKind, s, tol: float = DOMAIN_TOL) -> np.ndarray:
    """Boolean mask of points within tol of the domain"""
    s = _points(s)
    x, y = s[..., 0], s[..., 1]
    radius = np.hypot(x, y)
    if domain is DomainKind.UNIT_SQUARE:
        return (x >= -tol) & (x <= 1.0 + tol) & (y >= -tol) & (y <= 1.0 + tol)
    if domain is DomainKind.QUARTER_DISK:
        return (x >= -tol) & (y >= -tol) & (radius <= 1.0 + tol)
    return radius <= 1.0 + tol


def _check(chart: Chart, s) -> np.ndarray:
    s = _points(s)
    mask = inside_domain(chart.domain, s)
    if not np.all(mask):
        bad = s[~mask].reshape(-1, 2)[0]
        raise DomainError(
            f"point ({bad[0]:.6g}, {bad[1]:.6g}) outside chart domain {chart.domain.value}",
            domain=chart.domain.value,
        )
    return s


def _monge_radial(chart: Chart, rho: np.ndarray):
    """F(rho) = r - rho + a cos^2(omega rho) and its first two rho-derivatives"""
    omega = chart.freq * np.pi / 2.0
    F = chart.r - rho + chart.a * np.cos(omega * rho) ** 2
    F_r = -1.0 - chart.a * omega * np.sin(2.0 * omega * rho)
    F_rr = -2.0 * chart.a * omega**2 * np.cos(2.0 * omega * rho)
    return F, F_r, F_rr


def _monge_height(chart: Chart, s: np.ndarray):
    """Height h and its first and second partial derivatives"""
    x, y = s[..., 0], s[..., 1]
    F, F_r, F_rr = _monge_radial(chart, x * x + y * y)
    h = np.sqrt(F)
    p = x * F_r / h
    q = y * F_r / h
    h3 = h**3
    h_xx = F_r / h + 2.0 * x * x * F_rr / h - x * x * F_r**2 / h3
    h_yy = F_r / h + 2.0 * y * y * F_rr / h - y * y * F_r**2 / h3
    h_xy = 2.0 * x * y * F_rr / h - x * y * F_r**2 / h3
    return h, p, q, h_xx, h_xy, h_yy


def _stereo_sign(chart: Chart) -> float:
    return 1.0 if chart.kind is ChartKind.STEREO_NORTH else -1.0


def map_point(chart: Chart, s) -> np.ndarray:
    """phi(s) in ambient 3-space"""
    s = _check(chart, s)
    x, y = s[..., 0], s[..., 1]
    if chart.kind is ChartKind.FLAT:
        z = np.zeros_like(x)
    elif chart.kind is ChartKind.MONGE_TRIG:
        z = _monge_height(chart, s)[0]
    elif chart.kind in (ChartKind.STEREO_NORTH, ChartKind.STEREO_SOUTH):
        rho = x * x + y * y
        z = _stereo_sign(chart) * (1.0 - rho) / (1.0 + rho)
        return np.stack([2.0 * x / (1.0 + rho), 2.0 * y / (1.0 + rho), z], axis=-1)
    else:
        return np.asarray(chart.parametrization(s), dtype=float)
    return np.stack([x, y, z], axis=-1)


def tangent_vectors(chart: Chart, s) -> Tuple[np.ndarray, np.ndarray]:
    """Partial derivatives t1 = d phi/dx, t2 = d phi/dy"""
    s = _check(chart, s)
    x, y = s[..., 0], s[..., 1]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    if chart.kind is ChartKind.FLAT:
        return np.stack([one, zero, zero], -1), np.stack([zero, one, zero], -1)
    if chart.kind is ChartKind.MONGE_TRIG:
        _, p, q, _, _, _ = _monge_height(chart, s)
        return np.stack([one, zero, p], -1), np.stack([zero, one, q], -1)
    if chart.kind in (ChartKind.STEREO_NORTH, ChartKind.STEREO_SOUTH):
        sign = _stereo_sign(chart)
        den = (1.0 + x * x + y * y) ** 2
        t1 = np.stack([2.0 * (1.0 - x * x + y * y), -4.0 * x * y, -sign * 4.0 * x], -1) / den[..., None]
        t2 = np.stack([-4.0 * x * y, 2.0 * (1.0 + x * x - y * y), -sign * 4.0 * y], -1) / den[..., None]
        return t1, t2
    return _fd_tangents(chart, s)


def _fd_tangents(chart: Chart, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # stencils may step just outside the domain, so no membership check here
    step = FRAME_STEP
    ex = np.array([step, 0.0])
    ey = np.array([0.0, step])
    phi = chart.parametrization
    t1 = (np.asarray(phi(s + ex), dtype=float) - np.asarray(phi(s - ex), dtype=float)) / (2.0 * step)
    t2 = (np.asarray(phi(s + ey), dtype=float) - np.asarray(phi(s - ey), dtype=float)) / (2.0 * step)
    return t1, t2


def metric_at(chart: Chart, s) -> MetricData:
    """Gram-Schmidt frame (t1 first) and the diagonal metric it induces"""
    t1, t2 = tangent_vectors(chart, s)
    return _metric_from_tangents(chart, t1, t2)


def _metric_from_tangents(chart: Chart, t1: np.ndarray, t2: np.ndarray) -> MetricData:
    n1 = np.sum(t1 * t1, axis=-1)
    v1 = t1
    if np.any(n1 < METRIC_FLOOR):
        raise SingularMetricError("first tangent vector vanishes", chart=chart.kind.value)
    v2 = t2 - (np.sum(t2 * t1, axis=-1) / n1)[..., None] * t1
    g11 = n1
    g22 = np.sum(v2 * v2, axis=-1)
    if np.any(g22 < METRIC_FLOOR):
        raise SingularMetricError("orthogonalized second tangent vector vanishes", chart=chart.kind.value)
    det_g = g11 * g22
    sqrt_g11 = np.sqrt(g11)
    sqrt_g22 = np.sqrt(g22)
    return MetricData(
        g11=g11,
        g22=g22,
        det_g=det_g,
        sqrt_det_g=np.sqrt(det_g),
        inv_g11=1.0 / g11,
        inv_g22=1.0 / g22,
        inv_sqrt_g11=1.0 / sqrt_g11,
        inv_sqrt_g22=1.0 / sqrt_g22,
        frame=(v1, v2),
    )


def _fd_metric_derivatives(chart: Chart, s: np.ndarray) -> MetricDerivatives:
    step = DERIVATIVE_STEP
    ex = np.array([step, 0.0])
    ey = np.array([0.0, step])

    def metric(points):
        return _metric_from_tangents(chart, *_fd_tangents(chart, points))

    plus_x, minus_x = metric(s + ex), metric(s - ex)
    plus_y, minus_y = metric(s + ey), metric(s - ey)
    return MetricDerivatives(
        dg11_dx=(plus_x.g11 - minus_x.g11) / (2 * step),
        dg11_dy=(plus_y.g11 - minus_y.g11) / (2 * step),
        dg22_dx=(plus_x.g22 - minus_x.g22) / (2 * step),
        dg22_dy=(plus_y.g22 - minus_y.g22) / (2 * step),
    )


def metric_derivatives_at(chart: Chart, s) -> MetricDerivatives:
    """Partial derivatives of g11 and g22; closed form for built-in charts"""
    s = _check(chart, s)
    x, y = s[..., 0], s[..., 1]
    if chart.kind is ChartKind.FLAT:
        zero = np.zeros_like(x)
        return MetricDerivatives(dg11_dx=zero, dg11_dy=zero.copy(), dg22_dx=zero.copy(), dg22_dy=zero.copy())
    if chart.kind in (ChartKind.STEREO_NORTH, ChartKind.STEREO_SOUTH):
        den = (1.0 + x * x + y * y) ** 3
        dx = -16.0 * x / den
        dy = -16.0 * y / den
        return MetricDerivatives(dg11_dx=dx, dg11_dy=dy, dg22_dx=dx.copy(), dg22_dy=dy.copy())
    if chart.kind is ChartKind.MONGE_TRIG:
        _, p, q, h_xx, h_xy, h_yy = _monge_height(chart, s)
        e = 1.0 + p * p
        return MetricDerivatives(
            dg11_dx=2.0 * p * h_xx,
            dg11_dy=2.0 * p * h_xy,
            dg22_dx=2.0 * q * h_xy / e - 2.0 * q * q * p * h_xx / e**2,
            dg22_dy=2.0 * q * h_yy / e - 2.0 * q * q * p * h_xy / e**2,
        )
    return _fd_metric_derivatives(chart, s)


def pde_coefficients_at(chart: Chart, s, w_hat=(0.0, 0.0), gamma: float = 0.0) -> PdeCoefficients:
    """Chart-form coefficients of the intrinsic advection-diffusion-reaction problem"""
    metric = metric_at(chart, s)
    w_hat = np.asarray(w_hat, dtype=float)
    sqrt_det = metric.sqrt_det_g
    w_tilde = np.stack(
        [sqrt_det * metric.inv_sqrt_g11 * w_hat[0], sqrt_det * metric.inv_sqrt_g22 * w_hat[1]], axis=-1
    )
    return PdeCoefficients(
        k11=sqrt_det * metric.inv_g11,
        k22=sqrt_det * metric.inv_g22,
        w_tilde=w_tilde,
        gamma_tilde=sqrt_det * gamma,
        weight=sqrt_det,
    )


def anisotropy_from_metric(g11, g22) -> np.ndarray:
    """sqrt(max(g)^3 / min(g)) = sqrt(det G) * kappa(G^-1) for a diagonal metric"""
    g11 = np.asarray(g11, dtype=float)
    g22 = np.asarray(g22, dtype=float)
    big = np.maximum(g11, g22)
    small = np.minimum(g11, g22)
    return np.sqrt(big**3 / small)


def anisotropy_at(chart: Chart, s) -> np.ndarray:
    metric = metric_at(chart, s)
    return anisotropy_from_metric(metric.g11, metric.g22)


def sample_domain(domain: DomainKind, n: int = 100) -> np.ndarray:
    """n x n tensor grid of the bounding box restricted to the domain"""
    if domain is DomainKind.UNIT_DISK:
        axis = np.linspace(-1.0, 1.0, n)
    else:
        axis = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    points = np.stack([X.ravel(), Y.ravel()], axis=-1)
    return points[inside_domain(domain, points)]


def metric_bounds(chart: Chart, n: int = 100) -> dict:
    """Sampled coercivity witnesses g_*, g^* and the anisotropy extremes"""
    points = sample_domain(chart.domain, n)
    metric = metric_at(chart, points)
    g_min = float(np.min(np.minimum(metric.g11, metric.g22)))
    g_max = float(np.max(np.maximum(metric.g11, metric.g22)))
    ratio = np.maximum(metric.g11, metric.g22) / np.minimum(metric.g11, metric.g22)
    bounds = {
        "g_min": g_min,
        "g_max": g_max,
        "max_metric_ratio": float(np.max(ratio)),
        "max_anisotropy": float(np.max(anisotropy_from_metric(metric.g11, metric.g22))),
    }
    logger.info(
        f"CHART: Metric bounds on {points.shape[0]} samples: g_*={g_min:.4g}, g^*={g_max:.4g}, "
        f"max ratio={bounds['max_metric_ratio']:.4g}"
    )
    return bounds
