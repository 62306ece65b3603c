import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crafem.mesh import MeshForest, intermediate_triangulation, refine, uniform_refine
from crafem.quadrature import DEG5_POINTS, DEG5_WEIGHTS
from crafem.space import (
    LAMBDA,
    CRFunction,
    P0Function,
    P2Function,
    barycentric,
    enrich,
    enrich_then_interpolate,
    interpolate_nc,
    interpolation_errors,
    l2_project_p0,
    nc_divergence,
    nc_gradient,
    random_p2,
    side_means,
    tangential_jump,
    transfer,
)

from conftest import lshape_forest, random_refinement, square_forest, unit_triangle_forest

seeds = st.integers(min_value=0, max_value=2**32 - 1)
DIAG = (0, 2)


def vandermonde_values(T, v: CRFunction, xy_per_elem):
    """Oracle: solve for the affine function through the three side-midpoint values."""
    out = []
    for k in range(T.n_elements):
        verts = T.vertex_coords[k]
        mids = np.array([0.5 * (verts[(i + 1) % 3] + verts[(i + 2) % 3]) for i in range(3)])
        V = np.column_stack([np.ones(3), mids])
        coef = np.linalg.solve(V, v.element_coeffs()[k])  # (3, c)
        pts = xy_per_elem[k]
        out.append(np.column_stack([np.ones(len(pts)), pts]) @ coef)
    return np.array(out)


def hat_function(T, z):
    """Conforming P1 hat of interior node z, as CR coefficients and as a P2 function."""
    vertex = np.zeros((T.forest.n_vertices, 1))
    vertex[z] = 1.0
    mid = 0.5 * (vertex[T.sides[:, 0]] + vertex[T.sides[:, 1]])
    return CRFunction(T, mid), P2Function(T, vertex, mid)


def gradient_means_p2(w: P2Function):
    """Elementwise mean gradients of a P2 function (degree 1 integrand, 7-point rule is exact)."""
    return np.einsum("q,nqcd->ncd", DEG5_WEIGHTS, w.gradient(DEG5_POINTS))


# -- basics -------------------------------------------------------------------------
def test_cr_evaluation_matches_vandermonde(rng):
    T = uniform_refine(lshape_forest().bottom, 1)
    v = CRFunction.random(T, rng, 2)
    bary = rng.dirichlet(np.ones(3), size=4)
    xy = T.points(bary)
    np.testing.assert_allclose(v.evaluate(bary), vandermonde_values(T, v, xy), atol=1e-12)
    # value at a side midpoint equals the stored coefficient
    mids = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
    np.testing.assert_allclose(v.evaluate(mids), v.element_coeffs(), atol=1e-13)


def test_barycentric_roundtrip(rng):
    T = uniform_refine(square_forest().bottom, 1)
    bary = rng.dirichlet(np.ones(3), size=5)
    np.testing.assert_allclose(barycentric(T.vertex_coords, T.points(bary)), np.broadcast_to(bary, (T.n_elements, 5, 3)), atol=1e-13)


def test_boundary_coefficients_rejected(square):
    T = square.bottom
    vals = np.zeros(T.n_sides)
    vals[0] = 1.0  # bottom side is a boundary side
    with pytest.raises(ValueError):
        CRFunction(T, vals)


def test_diagonal_basis_gradient(square):
    T = square.bottom
    vals = np.zeros(T.n_sides)
    vals[T.side_index(*DIAG)] = 1.0
    g = nc_gradient(CRFunction(T, vals)).values
    k = T.elem_ids.tolist().index(0)  # element (1, 2, 0): vertices (1,0), (1,1), (0,0)
    np.testing.assert_allclose(g[k, 0], [-2.0, 2.0], atol=1e-14)


def test_zero_function_has_zero_gradient_and_divergence(square):
    T = uniform_refine(square.bottom)
    v = CRFunction.zeros(T, 2)
    assert np.all(nc_gradient(v).values == 0)
    assert np.all(nc_divergence(v).values == 0)
    with pytest.raises(ValueError):
        nc_divergence(CRFunction.zeros(T, 1))


def test_affine_field_has_constant_gradient(square):
    T = uniform_refine(square.bottom, 2)
    # interior coefficients of an affine function; the trace condition only matters for boundary sides
    means = side_means(T, lambda x, y: 2.0 + 3.0 * x - y)
    np.testing.assert_allclose(means[:, 0], 2.0 + 3.0 * T.side_midpoint[:, 0] - T.side_midpoint[:, 1], atol=1e-13)


# -- interpolation ------------------------------------------------------------------
def test_side_mean_of_x_squared_on_hypotenuse():
    T = unit_triangle_forest().bottom
    means = side_means(T, lambda x, y: x**2)
    assert means[T.side_index(1, 2), 0] == pytest.approx(1.0 / 3.0, abs=1e-14)


def test_interpolation_reproduces_cr_functions(rng):
    T = random_refinement(lshape_forest().bottom, 4, steps=2)
    v = CRFunction.random(T, rng, 2)
    np.testing.assert_allclose(interpolate_nc(T, v, 2).values, v.values, atol=1e-13)


def test_interpolation_of_vanishing_affine_is_exact():
    # x y (1 - x)(1 - y) is not affine; use an affine field that is zero on the whole boundary of a triangle instead
    T = unit_triangle_forest().bottom
    Iv = interpolate_nc(T, lambda x, y: 0.0 * x)
    assert np.all(Iv.values == 0)


def test_interpolation_gradient_mean_property(rng):
    T = uniform_refine(square_forest().bottom, 2)
    w = random_p2(T, rng)
    Iw = interpolate_nc(T, w)
    np.testing.assert_allclose(Iw.gradient().values, gradient_means_p2(w), atol=1e-12)


def test_best_approximation_against_random_competitors(rng):
    T = uniform_refine(lshape_forest().bottom, 1)
    v = random_p2(T, rng)
    Iv = interpolate_nc(T, v)
    gv = v.gradient(DEG5_POINTS)

    def err(w):
        d = gv - w.gradient().values[:, None]
        return T.area @ np.einsum("q,nqcd->n", DEG5_WEIGHTS, d**2)

    best = err(Iv)
    for _ in range(100):
        assert best <= err(CRFunction.random(T, rng)) + 1e-12


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_orthogonality_across_refinement(seed):
    rng = np.random.default_rng(seed)
    T = random_refinement(square_forest().bottom, seed, steps=1)
    Tstar = random_refinement(T, seed + 1, steps=2)
    from crafem.mesh import ancestor_map

    anc = ancestor_map(T, Tstar)
    w = CRFunction.random(T, rng)
    v = CRFunction.random(Tstar, rng)
    gw = w.gradient().values
    lhs = np.sum(Tstar.area * np.einsum("ncd,ncd->n", gw[anc], v.gradient().values))
    rhs = np.sum(T.area * np.einsum("ncd,ncd->n", gw, interpolate_nc(T, v).gradient().values))
    assert lhs == pytest.approx(rhs, abs=1e-10)


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_stability_on_random_quadratics(seed):
    rng = np.random.default_rng(seed)
    T = random_refinement(square_forest().bottom, seed, steps=3)
    l2, h1, full = interpolation_errors(T, random_p2(T, rng, 1 + seed % 2))
    assert l2 <= LAMBDA * h1 + 1e-12
    assert h1 <= full + 1e-12


# -- enrichment and transfer ----------------------------------------------------------
def test_enrich_zero_and_hat(square):
    T = uniform_refine(square.bottom, 2)
    z = int(np.setdiff1d(T.nodes, T.boundary_nodes)[0])
    hat_cr, hat_p2 = hat_function(T, z)
    E = enrich(T, hat_cr)
    np.testing.assert_allclose(E.vertex[T.nodes], hat_p2.vertex[T.nodes], atol=1e-14)
    np.testing.assert_allclose(E.midpoint, hat_p2.midpoint, atol=1e-14)
    E0 = enrich(T, CRFunction.zeros(T))
    assert not np.any(E0.vertex) and not np.any(E0.midpoint)


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_enrich_preserves_side_and_gradient_means(seed):
    rng = np.random.default_rng(seed)
    T = random_refinement(lshape_forest().bottom, seed, steps=2)
    v = CRFunction.random(T, rng, 2)
    E = enrich(T, v)
    np.testing.assert_allclose(side_means(T, E, 2), v.values, atol=1e-12)
    np.testing.assert_allclose(gradient_means_p2(E), v.gradient().values, atol=1e-11)
    # conforming with zero trace
    assert np.all(E.vertex[T.boundary_nodes] == 0) and np.all(E.midpoint[T.boundary] == 0)


def test_enrich_then_interpolate_identity_and_conservation(rng):
    T = refine(square_forest().bottom, [DIAG])
    v = CRFunction.random(T, rng)
    np.testing.assert_allclose(enrich_then_interpolate(T, T, v).values, v.values, atol=1e-13)
    Tstar = refine(T, [(0, 4)] if T.has_side(0, 4) else [T.side_keys()[1]])
    w = enrich_then_interpolate(T, Tstar, v)
    kept = np.isin(Tstar.elem_ids, T.elem_ids)
    for k in np.flatnonzero(kept):
        kt = T.elem_ids.tolist().index(Tstar.elem_ids[k])
        np.testing.assert_allclose(w.gradient().values[k], v.gradient().values[kt], atol=1e-12)


def test_transfer_identity(rng):
    T = uniform_refine(lshape_forest().bottom)
    v = CRFunction.random(T, rng)
    np.testing.assert_allclose(transfer(T, T, v).values, v.values)


def test_transfer_keeps_jump_free_hat():
    forest = square_forest()
    T = uniform_refine(forest.bottom, 2)
    z = int(np.setdiff1d(T.nodes, T.boundary_nodes)[0])
    hat_cr, hat_p2 = hat_function(T, z)
    assert np.abs(tangential_jump(hat_cr)[~T.boundary]).max() < 1e-13
    Tstar = random_refinement(T, 5, steps=2)
    res = transfer(T, Tstar, hat_cr, details=True)
    np.testing.assert_allclose(res.result.values, interpolate_nc(Tstar, hat_p2).values, atol=1e-13)
    assert res.stability_ratio is None  # both sides of the bound vanish


def test_transfer_square_to_four_triangles(rng):
    forest = square_forest()
    T = forest.bottom
    Tstar = refine(T, [DIAG])
    v = CRFunction(T, np.where(T.boundary, 0.0, rng.standard_normal(T.n_sides)))
    res = transfer(T, Tstar, v, details=True)
    assert res.max_jump <= 1e-12
    # the only free function is a multiple of the diagonal basis: no tangential jump on the
    # refined diagonal, yet the boundary corners are reset to zero, so the measured ratio is unbounded
    assert np.abs(tangential_jump(v)[T.side_index(*DIAG)]).max() < 1e-14
    assert res.stability_ratio == float("inf")


def test_transfer_stability_ratio_finite_for_generic_functions(rng):
    T = uniform_refine(square_forest().bottom, 2)
    Tstar = random_refinement(T, 2, steps=2)
    ratios = [transfer(T, Tstar, CRFunction.random(T, rng), details=True).stability_ratio for _ in range(10)]
    assert all(r is not None and np.isfinite(r) for r in ratios)


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_transfer_conservation_and_membership(seed):
    rng = np.random.default_rng(seed)
    T = random_refinement(lshape_forest().bottom, seed, steps=1)
    Tstar = random_refinement(T, seed + 11, steps=3)
    v = CRFunction.random(T, rng, 1 + seed % 2)
    res = transfer(T, Tstar, v, details=True)
    assert res.max_jump <= 1e-10
    shared = np.isin(Tstar.elem_ids, T.elem_ids)
    pos = {e: k for k, e in enumerate(T.elem_ids.tolist())}
    src = np.array([pos[e] for e in Tstar.elem_ids[shared].tolist()], dtype=int)
    np.testing.assert_allclose(res.result.element_coeffs()[shared], v.element_coeffs()[src], atol=1e-12)
    assert res.intermediate.tri == intermediate_triangulation(T, Tstar)


# -- P0 -----------------------------------------------------------------------------
def test_p0_projection_examples():
    T = unit_triangle_forest().bottom
    assert l2_project_p0(T, lambda x, y: 0 * x + 7.0).values[0, 0] == pytest.approx(7.0)
    assert l2_project_p0(T, lambda x, y: x).values[0, 0] == pytest.approx(1.0 / 3.0, abs=1e-15)
    fine = uniform_refine(T, 2)
    q = P0Function(fine, np.arange(fine.n_elements, dtype=float))
    expected = (fine.area @ q.values[:, 0]) / T.area[0]
    assert l2_project_p0(T, q).values[0, 0] == pytest.approx(expected, abs=1e-14)


def test_p0_mean_zero_flag(square):
    T = square.bottom
    P0Function(T, [1.0, -1.0], mean_zero=True)
    with pytest.raises(ValueError):
        P0Function(T, [1.0, 0.0], mean_zero=True)


def test_csv_export(tmp_path, rng):
    T = refine(square_forest().bottom, [DIAG])
    v = CRFunction.random(T, rng, 2)
    v.to_csv(tmp_path / "v.csv")
    rows = list(csv.reader(open(tmp_path / "v.csv")))
    assert rows[0] == ["side_a", "side_b", "component", "value"]
    assert len(rows) == 1 + 2 * T.n_sides
    back = np.array([float(r[3]) for r in rows[1:]]).reshape(-1, 2)
    np.testing.assert_array_equal(back, v.values)
    P0Function(T, np.ones(T.n_elements)).to_csv(tmp_path / "p.csv")
    assert len(list(csv.reader(open(tmp_path / "p.csv")))) == 1 + T.n_elements
