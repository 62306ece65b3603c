import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crafem.mesh import (
    MeshError,
    MeshForest,
    Triangulation,
    bdd_ratio,
    count_new_elements,
    intermediate_triangulation,
    is_lower_diamond,
    join,
    load_mesh,
    meet,
    parse_mesh,
    refd,
    refd_by_refinement,
    refine,
    uniform_refine,
    write_mesh,
)

from conftest import lshape_forest, random_refinement, square_forest, unit_triangle_forest

seeds = st.integers(min_value=0, max_value=2**32 - 1)

BOTTOM = (0, 1)
DIAG = (0, 2)
LEFT = (0, 3)
RIGHT = (1, 2)


# -- loading ----------------------------------------------------------------------
def test_square_loads_with_two_roots_and_five_sides(square):
    T = square.bottom
    assert T.n_elements == 2
    assert T.side_keys() == [(0, 1), (0, 2), (0, 3), (1, 2), (2, 3)]
    assert T.boundary.tolist() == [True, False, True, True, True]


def test_matching_violation_is_reported_with_element_ids():
    # second triangle lists the diagonal as a non-refinement edge
    with pytest.raises(MeshError) as exc:
        MeshForest([[0, 0], [1, 0], [1, 1], [0, 1]], [[1, 2, 0], [2, 0, 3]])
    assert set(exc.value.elements) == {0, 1}


def test_lshape_refinement_edges_match_pairwise(lshape):
    T = lshape.bottom
    assert T.n_elements == 6
    # hand check: every interior side is the refinement edge of both or of neither neighbour
    for s in np.flatnonzero(~T.boundary):
        k0, k1 = T.side_elems[s]
        is_ref = [T.elem_sides[k, 0] == s for k in (k0, k1)]
        assert is_ref[0] == is_ref[1]


def test_parse_errors_and_roundtrip(tmp_path):
    with pytest.raises(MeshError):
        parse_mesh(["vertices 1", "0 0", "triangles 1", "0 1 2"])
    with pytest.raises(MeshError):
        parse_mesh(["vertices 2", "0 0"])
    path = tmp_path / "m.msh"
    write_mesh(path, [[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
    path.write_text("# comment\n" + path.read_text())
    forest = load_mesh(path)
    assert forest.bottom.n_elements == 1
    np.testing.assert_array_equal(forest.coords, [[0, 0], [1, 0], [0, 1]])


def test_overlapping_roots_rejected():
    with pytest.raises(MeshError):
        MeshForest([[0, 0], [1, 0], [0, 1], [1, 1]], [[0, 1, 2], [0, 1, 2]])


# -- refine ------------------------------------------------------------------------
def test_refine_empty_is_identity(square):
    T = square.bottom
    assert refine(T, []) == T


def test_refine_diagonal_gives_four_new_elements(square):
    T = refine(square.bottom, [DIAG])
    assert T.n_elements == 4
    assert count_new_elements(T) == 4


def test_refine_bottom_side_gives_five_leaves(square):
    T = refine(square.bottom, [BOTTOM])
    assert T.n_elements == 5
    assert not T.has_side(*BOTTOM) and not T.has_side(*DIAG)


def test_refine_rejects_foreign_side(square):
    with pytest.raises(MeshError):
        refine(square.bottom, [(1, 3)])


def test_uniform_refine_square_has_eight_leaves(square):
    T = square.bottom
    U = uniform_refine(T)
    assert U.n_elements == 8
    assert not any(U.has_side(a, b) for a, b in T.side_keys())


def test_children_halve_area(square):
    T = uniform_refine(square.bottom, 3)
    f = square
    for e in T.elem_ids.tolist():
        p = f.parent[e]
        if p < 0:
            continue
        c = f.coords

        def area(t):
            (x0, y0), (x1, y1), (x2, y2) = c[list(t)]
            return 0.5 * abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))

        assert area(f.elements[e]) == pytest.approx(0.5 * area(f.elements[p]), rel=1e-14)


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_refine_equals_refine_of_closures(seed):
    T = random_refinement(square_forest().bottom, seed, steps=2)
    rng = np.random.default_rng(seed)
    keys = T.side_keys()
    M = [keys[i] for i in rng.choice(len(keys), size=min(3, len(keys)), replace=False)]
    closure = set().union(*(refd(T, S) for S in M))
    assert refine(T, M) == refine(T, sorted(closure))


def _undo_variants(T, Tstar):
    """Leaf sets obtained from Tstar by undoing one bisection of two sibling leaves."""
    f = Tstar.forest
    parents = {f.parent[e] for e in Tstar.leaf_set if f.parent[e] >= 0}
    for p in parents:
        kids = set(f.children[p])
        if kids <= Tstar.leaf_set:
            yield (Tstar.leaf_set - kids) | {p}


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_refine_is_coarsest_by_leaf_undo(seed):
    T = random_refinement(lshape_forest().bottom, seed, steps=1)
    rng = np.random.default_rng(seed + 1)
    keys = T.side_keys()
    M = [keys[i] for i in rng.choice(len(keys), size=2, replace=False)]
    Tstar = refine(T, M)
    for leaves in _undo_variants(T, Tstar):
        try:
            U = Triangulation(Tstar.forest, leaves)
        except MeshError:
            continue  # undoing breaks conformity
        # otherwise the undone mesh no longer refines T or still contains a marked side
        assert not (T <= U) or any(U.has_side(*S) for S in M)


# -- refd ----------------------------------------------------------------------------
def test_refd_examples(square):
    T = square.bottom
    assert refd(T, DIAG) == {DIAG}
    assert refd(T, BOTTOM) == {BOTTOM, DIAG}


def test_refd_rejects_foreign_side(square):
    with pytest.raises(MeshError):
        refd(square.bottom, (1, 3))


@given(seeds)
@settings(max_examples=25, deadline=None)
def test_refd_graph_matches_refinement_oracle(seed):
    forest = lshape_forest() if seed % 2 else square_forest()
    T = random_refinement(forest.bottom, seed, steps=2)
    for S in T.side_keys():
        got = refd(T, S)
        assert S in got
        assert got == refd_by_refinement(T, S)


def test_refd_of_compatibly_divisible_side_is_singleton(lshape):
    T = uniform_refine(lshape.bottom)
    for s in range(T.n_sides):
        k0, k1 = T.side_elems[s]
        if T.elem_sides[k0, 0] == s and (k1 < 0 or T.elem_sides[k1, 0] == s):
            assert T.refd_index[s] == (s,)


# -- lattice ----------------------------------------------------------------------------
def test_meet_join_idempotent(square):
    T = refine(square.bottom, [BOTTOM])
    assert meet(T, T) == T and join(T, T) == T


def test_left_right_halves(square):
    base = refine(square.bottom, [DIAG])
    T1 = refine(base, [LEFT])
    T2 = refine(base, [RIGHT])
    assert meet(T1, T2) == base
    # leaf-set oracle for disjoint refinement regions
    expected = (T1.leaf_set - base.leaf_set) | (T2.leaf_set - base.leaf_set) | (base.leaf_set & T1.leaf_set & T2.leaf_set)
    assert join(T1, T2).leaf_set == expected


def test_order_absorption(square):
    T = refine(square.bottom, [DIAG])
    R = refine(T, [BOTTOM])
    assert join(T, R) == R and meet(T, R) == T


def test_foreign_forest_rejected():
    with pytest.raises(MeshError):
        meet(square_forest().bottom, square_forest().bottom)


@given(seeds, seeds, seeds)
@settings(max_examples=20, deadline=None)
def test_lattice_laws(s1, s2, s3):
    forest = lshape_forest()
    base = forest.bottom
    A, B, C = (random_refinement(base, s, steps=2, marks=2) for s in (s1, s2, s3))
    assert meet(A, B) == meet(B, A) and join(A, B) == join(B, A)
    assert meet(meet(A, B), C) == meet(A, meet(B, C))
    assert join(join(A, B), C) == join(A, join(B, C))
    assert meet(A, join(A, B)) == A and join(A, meet(A, B)) == A
    m, j = meet(A, B), join(A, B)
    assert m <= A <= j and m <= B <= j


# -- mesh size and shape ---------------------------------------------------------------
@given(seeds)
@settings(max_examples=20, deadline=None)
def test_mesh_size_reduction(seed):
    T = random_refinement(lshape_forest().bottom, seed, steps=1)
    Tstar = random_refinement(T, seed + 7, steps=2)
    from crafem.mesh import ancestor_map

    anc = ancestor_map(T, Tstar)
    refined = ~np.isin(Tstar.elem_ids, T.elem_ids)
    ratio = Tstar.area[refined] / T.area[anc[refined]]
    assert np.all(ratio <= 0.5 + 1e-14)


def test_shape_regularity_bounded_by_early_generations():
    forest = lshape_forest()
    early = uniform_refine(forest.bottom, 2)  # generations up to 4
    bound = max(np.max(early.diameter() / np.sqrt(early.area)), np.max(forest.bottom.diameter() / np.sqrt(forest.bottom.area)))
    T = random_refinement(forest.bottom, 3, steps=8, marks=4)
    assert np.max(T.diameter() / np.sqrt(T.area)) <= bound * (1 + 1e-12)


def test_side_geometry(square):
    T = refine(square.bottom, [BOTTOM])
    c = square.coords
    for s, (a, b) in enumerate(T.side_keys()):
        assert T.side_length[s] == pytest.approx(np.linalg.norm(c[a] - c[b]))
        np.testing.assert_allclose(T.side_midpoint[s], 0.5 * (c[a] + c[b]))
        assert T.boundary[s] == (T.side_elems[s, 1] < 0)
    np.testing.assert_allclose(T.h2, T.area)


# -- diamonds and intermediate triangulation ---------------------------------------------
def test_lower_diamond_examples(square):
    base = refine(square.bottom, [DIAG])
    assert is_lower_diamond(base, base, [base])
    T1 = refine(base, [LEFT])
    T2 = refine(base, [RIGHT])
    assert is_lower_diamond(meet(T1, T2), join(T1, T2), [T1, T2])
    R = refine(base, [BOTTOM])
    assert not is_lower_diamond(base, R, [R, R])


def test_intermediate_triangulation_trivial_cases(square):
    T = refine(square.bottom, [DIAG])
    assert intermediate_triangulation(T, T) == T
    U = uniform_refine(T)
    assert intermediate_triangulation(T, U) == U


def test_intermediate_triangulation_bottom_side(square):
    # uniform refinement already contains refine(T, {bottom}), so the meet is that mesh
    T = square.bottom
    Tstar = refine(T, [BOTTOM])
    K = intermediate_triangulation(T, Tstar)
    assert K == Tstar and K.n_elements == 5


@given(seeds)
@settings(max_examples=15, deadline=None)
def test_intermediate_triangulation_properties(seed):
    T = random_refinement(lshape_forest().bottom, seed, steps=1)
    Tstar = random_refinement(T, seed + 3, steps=4)
    K = intermediate_triangulation(T, Tstar)  # asserts its defining properties
    assert T <= K <= Tstar
    lost = {k for k in T.side_keys() if not K.has_side(*k)}
    assert lost == {k for k in T.side_keys() if not Tstar.has_side(*k)}


def test_intermediate_triangulation_rejects_unordered(square):
    T = refine(square.bottom, [DIAG])
    with pytest.raises(MeshError):
        intermediate_triangulation(T, square.bottom)


# -- complexity counters ----------------------------------------------------------------
def test_bdd_ratio_single_boundary_mark():
    forest = unit_triangle_forest()
    T0 = forest.bottom
    T1 = refine(T0, [(1, 2)])
    assert bdd_ratio([(T0, [(1, 2)]), (T1, [])]) == [None, 2.0]


def test_bdd_ratio_single_interior_mark(square):
    T0 = square.bottom
    T1 = refine(T0, [DIAG])
    assert bdd_ratio([(T0, [DIAG]), (T1, [])]) == [None, 4.0]


def test_bdd_ratio_errors():
    with pytest.raises(ValueError):
        bdd_ratio([])
