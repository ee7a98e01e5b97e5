import hashlib
import json
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ChartKind(str, Enum):
    """Built-in parametrization families"""
    FLAT = "flat"
    MONGE_TRIG = "monge_trig"
    STEREO_NORTH = "stereo_north"
    STEREO_SOUTH = "stereo_south"
    USER = "user"


class DomainKind(str, Enum):
    """Planar chart domains"""
    QUARTER_DISK = "quarter_disk"
    UNIT_DISK = "unit_disk"
    UNIT_SQUARE = "unit_square"


class MeshFamily(str, Enum):
    TRI = "tri"
    POLY = "poly"


class StabKind(str, Enum):
    """Stabilization of the non-polynomial part of the stiffness"""
    DOFI_DOFI = "dofi_dofi"
    D_RECIPE = "d_recipe"
    AUTO = "auto"

    def resolve(self, k: int) -> "StabKind":
        """D-recipe for k >= 3, dofi-dofi below, unless fixed explicitly"""
        if self is StabKind.AUTO:
            return StabKind.D_RECIPE if k >= 3 else StabKind.DOFI_DOFI
        return self


_ALLOWED_DOMAINS = {
    ChartKind.FLAT: {DomainKind.UNIT_SQUARE, DomainKind.QUARTER_DISK},
    ChartKind.MONGE_TRIG: {DomainKind.QUARTER_DISK},
    ChartKind.STEREO_NORTH: {DomainKind.UNIT_DISK},
    ChartKind.STEREO_SOUTH: {DomainKind.UNIT_DISK},
    ChartKind.USER: set(DomainKind),
}


class Chart(BaseModel):
    """Surface parametrization over a planar domain"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: ChartKind = Field(..., description="Parametrization family")
    domain: DomainKind = Field(..., description="Chart domain")
    r: float = Field(default=2.0, description="Sphere radius parameter of the Monge height")
    a: float = Field(default=0.0, description="Amplitude of the cosine perturbation")
    freq: int = Field(default=5, description="Frequency of the cosine perturbation")
    parametrization: Optional[Callable[[np.ndarray], np.ndarray]] = Field(
        default=None, exclude=True, description="User map from (..., 2) chart points to (..., 3)"
    )

    @model_validator(mode="after")
    def check_domain(self) -> "Chart":
        if self.domain not in _ALLOWED_DOMAINS[self.kind]:
            raise ValueError(f"chart {self.kind.value} cannot live on domain {self.domain.value}")
        if self.kind is ChartKind.USER and self.parametrization is None:
            raise ValueError("user chart needs a parametrization callable")
        return self

    @classmethod
    def user(cls, parametrization: Callable[[np.ndarray], np.ndarray], domain: DomainKind) -> "Chart":
        """Chart given only by its map; metric data come from finite differences"""
        return cls(kind=ChartKind.USER, domain=domain, parametrization=parametrization)


class EquationCoefficients(BaseModel):
    """Advection field (in the orthonormal frame) and reaction coefficient"""
    model_config = ConfigDict(frozen=True)

    w_hat: Tuple[float, float] = Field(default=(0.0, 0.0), description="Advection components along v1/|v1|, v2/|v2|")
    gamma: float = Field(default=0.0, description="Reaction coefficient")


class PolyMesh(BaseModel):
    """Immutable polygonal mesh with derived edge incidence"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    vertices: np.ndarray = Field(..., description="(n, 2) vertex coordinates")
    cells: Tuple[Tuple[int, ...], ...] = Field(..., description="Counterclockwise vertex cycles")
    edges: np.ndarray = Field(..., description="(E, 2) sorted vertex pairs")
    edge_cells: np.ndarray = Field(..., description="(E, 2) left/right cell of edge a->b, -1 for none")
    cell_edges: Tuple[Tuple[int, ...], ...] = Field(..., description="Edge id of local edge j (vertex j to j+1)")
    boundary_vertex_flags: np.ndarray = Field(..., description="(n,) boundary vertex flags")
    boundary_edge_flags: np.ndarray = Field(..., description="(E,) boundary edge flags")
    cell_areas: np.ndarray
    cell_centroids: np.ndarray
    cell_diameters: np.ndarray
    h: float = Field(..., description="Maximum cell diameter")
    warnings: Tuple[str, ...] = Field(default=(), description="Import-time warning records")

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def cell_vertices(self, cell: int) -> np.ndarray:
        return self.vertices[list(self.cells[cell])]


class MeshFile(BaseModel):
    """JSON mesh schema"""
    vertices: List[Tuple[float, float]]
    cells: List[List[int]]
    boundary_vertices: Optional[List[int]] = None


class RegularityReport(BaseModel):
    """Shape-regularity audit of a mesh"""
    rho_estimate: float = Field(..., description="min over cells of 2 r_P / h_P")
    edge_ratio: float = Field(..., description="max over cells of longest/shortest edge")
    min_edge_over_hP: float = Field(..., description="min over cells of shortest edge / h_P")
    star_shaped_flags: List[bool] = Field(..., description="Per-cell star-shapedness w.r.t. a centroid disk")

    @property
    def all_star_shaped(self) -> bool:
        return all(self.star_shaped_flags)


class SolveReport(BaseModel):
    """Statistics of one sparse direct solve"""
    n_dofs: int
    residual: float = Field(..., description="||Ax - b|| / ||b||")
    cond_estimate: float = Field(..., description="1-norm condition estimate")
    factor_time_ms: float
    refined: bool = Field(default=False, description="Whether iterative refinement was applied")


_TC1_RADII = (1.1, 1.01, 1.001)
_TC3_AMPLITUDES = (0.5, 2.0)


def _member(value: float, allowed: Tuple[float, ...]) -> bool:
    return any(abs(value - candidate) <= 1e-12 for candidate in allowed)


class ExperimentConfig(BaseModel):
    """Configuration of one convergence study"""
    model_config = ConfigDict(extra="forbid")

    test_case: int = Field(..., ge=1, le=4, description="Test case 1-4")
    orders: List[int] = Field(default_factory=lambda: [1, 2, 3, 4], description="VEM orders to run")
    mesh_family: Optional[MeshFamily] = Field(default=None, description="tri or poly")
    levels: Optional[int] = Field(default=None, ge=1, le=7, description="Number of mesh levels")
    r: Optional[float] = Field(default=None, description="Monge radius parameter")
    a: Optional[float] = Field(default=None, description="Monge perturbation amplitude")
    freq: Optional[int] = Field(default=None, description="Monge perturbation frequency")
    stab_kind: StabKind = Field(default=StabKind.AUTO, description="Stabilization")
    w_hat: Tuple[float, float] = Field(default=(0.0, 0.0), description="Advection field")
    gamma: float = Field(default=0.0, description="Reaction coefficient")
    seed: int = Field(default=0, description="Seed for Voronoi generation")
    output_dir: Optional[str] = Field(default=None, description="Output directory")
    n_boundary_nodes: Optional[int] = Field(default=None, ge=4, description="Nodes on the curved boundary")
    n_cells: Optional[int] = Field(default=None, ge=4, description="Polygonal cell count (TC2 set size, TC4 base)")
    lloyd_iterations: int = Field(default=100, ge=0, description="Lloyd relaxation sweeps")
    fit_window: Optional[int] = Field(default=None, ge=2, description="Levels used by the least-squares slope")
    parallel_levels: bool = Field(default=False, description="Run levels of one order concurrently")
    record_timings: bool = Field(default=False, description="Fill the runtime_ms column")
    surface_weighted: bool = Field(default=False, description="Weight error norms by sqrt(det G)")
    mesh_files: Optional[List[str]] = Field(default=None, description="One JSON mesh per level, coarsest first")

    @field_validator("orders")
    @classmethod
    def check_orders(cls, orders: List[int]) -> List[int]:
        if not orders:
            raise ValueError("at least one order is required")
        for k in orders:
            if k not in (1, 2, 3, 4):
                raise ValueError(f"order {k} not in 1..4")
        return sorted(set(orders))

    @model_validator(mode="after")
    def resolve_test_case(self) -> "ExperimentConfig":
        tc = self.test_case
        if self.mesh_files is not None:
            if not self.mesh_files:
                raise ValueError("mesh_files must name at least one mesh")
            self.levels = self.levels or len(self.mesh_files)
            if self.levels != len(self.mesh_files):
                raise ValueError(f"{len(self.mesh_files)} mesh files given for {self.levels} levels")
        if tc == 4:
            if self.r is not None or self.a is not None or self.freq is not None:
                raise ValueError("test case 4 fixes the stereographic charts; r, a and freq are not accepted")
            if self.w_hat != (0.0, 0.0) or self.gamma != 0.0:
                raise ValueError("test case 4 is the Laplace problem; w_hat and gamma must be zero")
            self.mesh_family = self.mesh_family or MeshFamily.POLY
            self.levels = self.levels or 5
            self.n_boundary_nodes = self.n_boundary_nodes or 32
            self.n_cells = self.n_cells or 100
            self.fit_window = self.fit_window or 3
            return self

        if tc == 1:
            self.r = 1.1 if self.r is None else self.r
            self.a = 0.0 if self.a is None else self.a
            if self.a != 0.0:
                raise ValueError("test case 1 requires a = 0")
            if not _member(self.r, _TC1_RADII):
                raise ValueError(f"test case 1 requires r in {_TC1_RADII}")
            self.mesh_family = self.mesh_family or MeshFamily.TRI
            self.levels = self.levels or 4
        elif tc == 2:
            self.r = 1.1 if self.r is None else self.r
            self.a = 0.0 if self.a is None else self.a
            if self.mesh_family is MeshFamily.TRI:
                raise ValueError("test case 2 uses polygonal meshes only")
            self.mesh_family = MeshFamily.POLY
            self.levels = self.levels or 5
            self.n_cells = self.n_cells or 25
        else:
            self.r = 2.0 if self.r is None else self.r
            self.a = 0.5 if self.a is None else self.a
            if self.r != 2.0:
                raise ValueError("test case 3 requires r = 2")
            if not _member(self.a, _TC3_AMPLITUDES):
                raise ValueError(f"test case 3 requires a in {_TC3_AMPLITUDES}")
            if self.freq is not None and self.freq != 5:
                raise ValueError("test case 3 requires freq = 5")
            self.mesh_family = self.mesh_family or MeshFamily.TRI
            self.levels = self.levels or 6
            self.fit_window = self.fit_window or 2

        self.freq = 5 if self.freq is None else self.freq
        self.n_boundary_nodes = self.n_boundary_nodes or 8
        self.fit_window = self.fit_window or self.levels
        return self

    def config_hash(self) -> str:
        """sha256 of the canonical JSON of everything that determines the numbers"""
        payload = self.model_dump(
            mode="json", exclude={"output_dir", "parallel_levels", "record_timings"}
        )
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ConvergenceRow(BaseModel):
    """One (order, level) line of convergence.csv"""
    test_case: int
    mesh_family: MeshFamily
    k: int
    level: int
    h: float
    n_cells: int
    n_dofs: int
    err_l2: float
    err_h1: float
    eoc_l2: Optional[float] = None
    eoc_h1: Optional[float] = None
    cond_estimate: float
    runtime_ms: Optional[float] = None
    config_hash: str
    mesh_checksum: str


class ConvergenceReport(BaseModel):
    """Convergence rows of one order plus run metadata"""
    k: int
    mesh_family: MeshFamily
    stab_kind: StabKind
    chart_parameters: Dict[str, Any] = Field(default_factory=dict)
    rows: List[ConvergenceRow] = Field(default_factory=list)
    slope_l2: Optional[float] = None
    slope_h1: Optional[float] = None


class RegularityRow(BaseModel):
    """One mesh level of regularity.csv"""
    test_case: int
    mesh_family: MeshFamily
    level: int
    n_cells: int
    n_boundary_nodes: int
    h: float
    rho_estimate: float
    edge_ratio: float
    min_edge_over_hP: float
    all_star_shaped: bool
    mesh_checksum: str
