import numpy as np
import pytest
from scipy import sparse

from surfvem.exceptions import DomainError, SolveError
from surfvem.models import DomainKind, EquationCoefficients, StabKind
from surfvem.services.assembly import (
    apply_dirichlet,
    assemble,
    global_numbering,
    interpolate_global,
    solve,
    solve_two_chart,
)
from surfvem.services.mesh import build_polymesh, generate_triangulation, generate_voronoi_polymesh
from surfvem.services.quadbasis import monomial_exponents
from surfvem.services.vemcore import ElementGeometry, dof_layout, local_forms

SQUARE = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]


def polynomial_pair(k):
    """q of total degree k and f = -lap q"""
    terms = [(a, b, 1.0 + 0.25 * i) for i, (a, b) in enumerate(monomial_exponents(k))]

    def q(p):
        x, y = p[..., 0], p[..., 1]
        return sum(c * x**a * y**b for a, b, c in terms)

    def f(p):
        x, y = p[..., 0], p[..., 1]
        out = np.zeros(p.shape[:-1])
        for a, b, c in terms:
            if a >= 2:
                out -= c * a * (a - 1) * x ** (a - 2) * y**b
            if b >= 2:
                out -= c * b * (b - 1) * x**a * y ** (b - 2)
        return out

    return q, f


@pytest.fixture
def two_triangles():
    return build_polymesh(SQUARE, [(0, 1, 2), (0, 2, 3)])


def test_numbering_counts(two_triangles):
    dof_map = global_numbering(two_triangles, 2)
    assert dof_map.n_dofs == 4 + 5 + 2
    assert dof_map.n_edge_dofs == 5
    assert dof_map.n_moment_dofs == 2
    assert dof_map.cell_dofs[0].size == 7
    # only the diagonal and the moments are interior
    assert np.count_nonzero(~dof_map.boundary_mask) == 3

    square = build_polymesh(SQUARE, [(0, 1, 2, 3)])
    assert global_numbering(square, 1).n_dofs == 4


@pytest.mark.parametrize("k", [2, 3, 4])
def test_shared_edges_agree_on_node_positions(k):
    mesh = generate_triangulation(DomainKind.QUARTER_DISK, 1, 8)
    dof_map = global_numbering(mesh, k)
    for c in range(mesh.n_cells):
        layout = dof_layout(ElementGeometry.from_mesh(mesh, c), k)
        nodal = dof_map.cell_dofs[c][:layout.n_nodal]
        np.testing.assert_allclose(dof_map.dof_points[nodal], layout.nodal_points, atol=1e-14)
    used = np.unique(np.concatenate(dof_map.cell_dofs))
    np.testing.assert_array_equal(used, np.arange(dof_map.n_dofs))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_assembled_stiffness_properties(flat_quarter_chart, k):
    mesh = generate_triangulation(DomainKind.QUARTER_DISK, 1, 8)
    system = assemble(mesh, flat_quarter_chart, k)
    A = system.matrix
    assert abs(A - A.T).max() < 1e-12 * abs(A).max()
    constant = interpolate_global(mesh, system.dof_map, lambda p: np.ones(p.shape[0]))
    np.testing.assert_allclose(A @ constant, 0.0, atol=1e-10 * abs(A).max())
    assert system.stab_kind is StabKind.AUTO.resolve(k)


def test_single_cell_mesh_matches_local_forms(flat_chart):
    vertices = 0.5 + 0.4 * np.stack([np.cos(np.arange(5) * 0.4 * np.pi), np.sin(np.arange(5) * 0.4 * np.pi)], -1)
    mesh = build_polymesh(vertices, [tuple(range(5))])
    system = assemble(mesh, flat_chart, 3)
    forms = local_forms(ElementGeometry.from_mesh(mesh, 0), 3, flat_chart)
    dofs = system.dof_map.cell_dofs[0]
    np.testing.assert_allclose(system.matrix.toarray()[np.ix_(dofs, dofs)], forms.A, atol=1e-14)


def test_assembly_does_not_depend_on_cell_order(flat_quarter_chart):
    mesh = generate_voronoi_polymesh(DomainKind.QUARTER_DISK, 12, 8, seed=2, lloyd_iterations=10)
    forcing = lambda p: np.sin(3.0 * p[:, 0]) + p[:, 1]
    forward = assemble(mesh, flat_quarter_chart, 2, forcing=forcing)
    backward = assemble(mesh, flat_quarter_chart, 2, forcing=forcing, cell_order=range(mesh.n_cells - 1, -1, -1))
    np.testing.assert_array_equal(forward.matrix.indptr, backward.matrix.indptr)
    np.testing.assert_array_equal(forward.matrix.indices, backward.matrix.indices)
    np.testing.assert_array_equal(forward.matrix.data, backward.matrix.data)
    np.testing.assert_array_equal(forward.rhs, backward.rhs)


def test_load_is_linear_in_forcing(flat_quarter_chart):
    mesh = generate_triangulation(DomainKind.QUARTER_DISK, 0, 8)
    forcing = lambda p: np.cos(p[:, 0]) * p[:, 1]
    once = assemble(mesh, flat_quarter_chart, 2, forcing=forcing).rhs
    twice = assemble(mesh, flat_quarter_chart, 2, forcing=lambda p: 2.0 * forcing(p)).rhs
    np.testing.assert_allclose(twice, 2.0 * once, rtol=1e-13, atol=1e-16)


def test_advection_breaks_symmetry(flat_quarter_chart):
    mesh = generate_triangulation(DomainKind.QUARTER_DISK, 0, 8)
    system = assemble(mesh, flat_quarter_chart, 2, coefficients=EquationCoefficients(w_hat=(1.0, 0.5), gamma=1.0))
    A = system.matrix
    assert abs(A - A.T).max() > 1e-3


def test_dirichlet_rows_are_unit(two_triangles, flat_chart):
    system = apply_dirichlet(assemble(two_triangles, flat_chart, 2), lambda p: p[:, 0] + 2.0)
    A = system.matrix.toarray()
    for i in np.flatnonzero(system.dirichlet_mask):
        expected = np.zeros(system.n_dofs)
        expected[i] = 1.0
        np.testing.assert_array_equal(A[i], expected)
        np.testing.assert_array_equal(A[:, i], expected)
        assert system.rhs[i] == pytest.approx(system.dof_map.dof_points[i, 0] + 2.0)


def test_solve_identity_system(two_triangles, flat_chart):
    system = assemble(two_triangles, flat_chart, 1)
    b = np.arange(1.0, 5.0)
    solution = solve(system.model_copy(update={"matrix": sparse.identity(4, format="csr"), "rhs": b}))
    np.testing.assert_allclose(solution.values, b)
    assert solution.report.residual < 1e-15
    assert solution.report.cond_estimate == pytest.approx(1.0)
    assert not solution.report.refined


def test_singular_system_raises(two_triangles, flat_chart):
    system = assemble(two_triangles, flat_chart, 1)
    singular = sparse.diags([1.0, 0.0, 1.0, 1.0]).tocsr()
    with pytest.raises(SolveError):
        solve(system.model_copy(update={"matrix": singular, "rhs": np.ones(4)}))


@pytest.mark.parametrize("k", [1, 2, 3, 4])
@pytest.mark.parametrize("family", ["tri", "poly"])
def test_patch_test_reproduces_polynomials(flat_chart, flat_quarter_chart, k, family):
    if family == "tri":
        chart = flat_chart
        mesh = generate_triangulation(DomainKind.UNIT_SQUARE, 1, 8)
    else:
        chart = flat_quarter_chart
        mesh = generate_voronoi_polymesh(DomainKind.QUARTER_DISK, 12, 8, seed=1, lloyd_iterations=10)
    q, f = polynomial_pair(k)
    system = apply_dirichlet(assemble(mesh, chart, k, forcing=f), q)
    solution = solve(system)
    expected = interpolate_global(mesh, system.dof_map, q)
    np.testing.assert_allclose(solution.values, expected, atol=1e-8 * np.max(np.abs(expected)))


def test_hemispheres_on_the_same_mesh_agree():
    mesh = generate_triangulation(DomainKind.UNIT_DISK, 0, 16)
    interface = lambda p: p[:, 0] * p[:, 1]
    forcing = lambda p: np.ones(p.shape[0])
    north, south = solve_two_chart(mesh, mesh, 2, interface, forcing, forcing)
    np.testing.assert_allclose(north.values, south.values, atol=1e-12)
    assert north.chart.kind.value == "stereo_north"
    assert south.chart.kind.value == "stereo_south"


def test_element_failure_reports_cell(flat_chart):
    # second triangle lies outside the flat chart domain
    vertices = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [2.0, 0.5]]
    mesh = build_polymesh(vertices, [(0, 1, 2), (1, 3, 2)])
    with pytest.raises(DomainError) as info:
        assemble(mesh, flat_chart, 1)
    assert info.value.context["cell"] == 1
    assert info.value.to_dict()["context"]["cell"] == 1
