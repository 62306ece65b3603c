"""Newest vertex bisection forest and the lattice of its conforming leaf cuts.

Elements are vertex triples ``(v0, v1, v2)``: ``v0`` is the newest vertex and
``(v1, v2)`` the refinement edge.  Bisection inserts the midpoint ``m`` of the
refinement edge and creates the children ``(m, v1, v0)`` and ``(m, v0, v2)``.
Local side ``i`` of an element is the side opposite local vertex ``i``, so
local side 0 is always the refinement edge.

A :class:`Triangulation` is an immutable set of forest leaves.  The forest is
append-only and shared, so any number of triangulations can coexist and be
compared with :func:`meet` and :func:`join`.
"""
from __future__ import annotations

import logging
import threading
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Side = tuple[int, int]

# local side i (opposite vertex i) -> local vertex pair
LOCAL_SIDES = np.array([[1, 2], [2, 0], [0, 1]])


class MeshError(ValueError):
    """Invalid mesh input or lattice operation; ``elements`` names the culprits."""

    def __init__(self, message: str, elements: Iterable[int] = ()):
        self.elements = tuple(int(e) for e in elements)
        if self.elements:
            message = f"{message} (elements {list(self.elements)})"
        super().__init__(message)


def side_key(a: int, b: int) -> Side:
    a, b = int(a), int(b)
    return (a, b) if a < b else (b, a)


class MeshForest:
    """Binary forest of NVB elements over an initial triangulation."""

    def __init__(self, vertices: Sequence[Sequence[float]], triangles: Sequence[Sequence[int]]):
        coords = np.asarray(vertices, dtype=float)
        tris = np.asarray(triangles, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise MeshError("vertices must be an (N, 2) array")
        if tris.ndim != 2 or tris.shape[1] != 3 or len(tris) == 0:
            raise MeshError("triangles must be a non-empty (M, 3) array")
        if tris.min() < 0 or tris.max() >= len(coords):
            raise MeshError("triangle references unknown vertex")

        self._coords: list[tuple[float, float]] = [tuple(p) for p in coords.tolist()]
        self._coords_cache: np.ndarray | None = None
        self.elements: list[tuple[int, int, int]] = [tuple(t) for t in tris.tolist()]
        self.parent: list[int] = [-1] * len(tris)
        self.children: list[tuple[int, int] | None] = [None] * len(tris)
        self.generation: list[int] = [0] * len(tris)
        self.n_roots = len(tris)
        self._midpoints: dict[Side, int] = {}
        self._lock = threading.Lock()

        self._validate_roots(coords, tris)
        self.bottom = Triangulation(self, range(self.n_roots))
        self._check_matching()

    # -- construction checks -------------------------------------------------
    def _validate_roots(self, coords: np.ndarray, tris: np.ndarray) -> None:
        p = coords[tris]
        det = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
            p[:, 2, 0] - p[:, 0, 0]
        ) * (p[:, 1, 1] - p[:, 0, 1])
        bad = np.flatnonzero(np.abs(det) <= 1e-14 * max(1.0, np.abs(det).max()))
        if len(bad):
            raise MeshError("degenerate root triangles", bad)

        count: dict[Side, list[int]] = {}
        for e, t in enumerate(tris.tolist()):
            for i, j in LOCAL_SIDES:
                count.setdefault(side_key(t[i], t[j]), []).append(e)
        over = [els for els in count.values() if len(els) > 2]
        if over:
            raise MeshError("side shared by more than two root elements", over[0])

        # two roots sharing a side must lie on opposite sides of it
        for (a, b), els in count.items():
            if len(els) != 2:
                continue
            d = coords[b] - coords[a]
            sign = []
            for e in els:
                c = next(v for v in tris[e].tolist() if v != a and v != b)
                q = coords[c] - coords[a]
                sign.append(np.sign(d[0] * q[1] - d[1] * q[0]))
            if sign[0] == sign[1]:
                raise MeshError("overlapping root elements", els)

        used = np.unique(tris)
        self.boundary_edges: set[Side] = set()
        for (a, b), els in count.items():
            if len(els) != 1:
                continue
            # a boundary side must not contain another vertex (hanging node)
            pa, pb = coords[a], coords[b]
            d = pb - pa
            q = coords[used] - pa
            t = q @ d / (d @ d)
            cross = q[:, 0] * d[1] - q[:, 1] * d[0]
            inside = (t > 1e-12) & (t < 1 - 1e-12) & (np.abs(cross) <= 1e-12 * (d @ d))
            if inside.any():
                raise MeshError("non-conforming root triangulation (hanging node)", els)
            self.boundary_edges.add((a, b))

    def _check_matching(self) -> None:
        T = self.bottom
        ref = T.elem_sides[:, 0]
        for s in range(T.n_sides):
            k0, k1 = T.side_elems[s]
            if k1 < 0:
                continue
            r0, r1 = ref[k0] == s, ref[k1] == s
            if r0 != r1:
                raise MeshError(
                    "matching assumption violated: shared refinement edge is not "
                    "the refinement edge of the neighbour",
                    (T.elem_ids[k0], T.elem_ids[k1]),
                )

    # -- accessors -----------------------------------------------------------
    @property
    def coords(self) -> np.ndarray:
        c = self._coords_cache
        if c is None or len(c) != len(self._coords):
            with self._lock:
                c = np.array(self._coords, dtype=float)
                self._coords_cache = c
        return c

    @property
    def n_vertices(self) -> int:
        return len(self._coords)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def refinement_edge(self, e: int) -> Side:
        _, v1, v2 = self.elements[e]
        return side_key(v1, v2)

    def midpoint_of(self, a: int, b: int) -> int | None:
        return self._midpoints.get(side_key(a, b))

    def ancestors(self, e: int) -> list[int]:
        out = []
        p = self.parent[e]
        while p >= 0:
            out.append(p)
            p = self.parent[p]
        return out

    def root_of(self, e: int) -> int:
        while self.parent[e] >= 0:
            e = self.parent[e]
        return e

    # -- the single writer ---------------------------------------------------
    def bisect(self, e: int) -> tuple[int, int]:
        """Children of ``e``, created on first request."""
        ch = self.children[e]
        if ch is not None:
            return ch
        with self._lock:
            ch = self.children[e]
            if ch is not None:
                return ch
            v0, v1, v2 = self.elements[e]
            key = side_key(v1, v2)
            m = self._midpoints.get(key)
            if m is None:
                m = len(self._coords)
                (x1, y1), (x2, y2) = self._coords[v1], self._coords[v2]
                self._coords.append((0.5 * (x1 + x2), 0.5 * (y1 + y2)))
                self._midpoints[key] = m
                if key in self.boundary_edges:
                    self.boundary_edges.add(side_key(key[0], m))
                    self.boundary_edges.add(side_key(m, key[1]))
            gen = self.generation[e] + 1
            c1 = len(self.elements)
            self.elements.append((m, v1, v0))
            self.elements.append((m, v0, v2))
            self.parent += [e, e]
            self.children += [None, None]
            self.generation += [gen, gen]
            ch = (c1, c1 + 1)
            self.children[e] = ch
            return ch


def load_mesh(path: str | Path) -> MeshForest:
    """Read the plain-text mesh format.

    ``vertices N`` followed by N lines ``x y``; ``triangles M`` followed by M
    lines ``v0 v1 v2`` (0-based, refinement edge ``v1``-``v2``).  ``#`` starts
    a comment.
    """
    lines = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return parse_mesh(lines, source=str(path))


def parse_mesh(lines: Sequence[str], source: str = "<string>") -> MeshForest:
    it = iter(lines)

    def section(name: str) -> int:
        try:
            head = next(it).split()
        except StopIteration:
            raise MeshError(f"{source}: missing '{name}' section") from None
        if len(head) != 2 or head[0] != name:
            raise MeshError(f"{source}: expected '{name} <count>', got {' '.join(head)!r}")
        try:
            return int(head[1])
        except ValueError:
            raise MeshError(f"{source}: bad count in {' '.join(head)!r}") from None

    try:
        nv = section("vertices")
        verts = [[float(x) for x in next(it).split()] for _ in range(nv)]
        nt = section("triangles")
        tris = [[int(x) for x in next(it).split()] for _ in range(nt)]
    except (StopIteration, ValueError) as exc:
        raise MeshError(f"{source}: malformed mesh file ({exc})") from None
    if any(len(v) != 2 for v in verts) or any(len(t) != 3 for t in tris):
        raise MeshError(f"{source}: wrong number of entries on a vertex or triangle line")
    return MeshForest(verts, tris)


def write_mesh(path: str | Path, vertices, triangles) -> None:
    vertices = np.asarray(vertices, float)
    out = [f"vertices {len(vertices)}"]
    out += [f"{x!r} {y!r}" for x, y in vertices.tolist()]
    out.append(f"triangles {len(triangles)}")
    out += [" ".join(str(int(v)) for v in t) for t in triangles]
    Path(path).write_text("\n".join(out) + "\n")


class Triangulation:
    """Immutable conforming leaf cut of a :class:`MeshForest`.

    Sides are indexed ``0..n_sides-1`` in lexicographic order of their sorted
    endpoint pairs; the pair itself is the stable global side identifier.
    """

    def __init__(self, forest: MeshForest, leaves: Iterable[int], check: bool = True):
        self.forest = forest
        self.leaf_set = frozenset(int(e) for e in leaves)
        self.elem_ids = np.array(sorted(self.leaf_set), dtype=np.int64)
        if check:
            self._check_conforming()

    def __repr__(self) -> str:
        return f"Triangulation({self.n_elements} elements, {self.n_sides} sides)"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Triangulation)
            and other.forest is self.forest
            and other.leaf_set == self.leaf_set
        )

    def __hash__(self) -> int:
        return hash(self.leaf_set)

    def __le__(self, other: "Triangulation") -> bool:
        _same_forest(self, other)
        return self.leaf_set <= other.tree_nodes

    def __ge__(self, other: "Triangulation") -> bool:
        return other <= self

    # -- topology ------------------------------------------------------------
    @cached_property
    def elements(self) -> np.ndarray:
        el = self.forest.elements
        return np.array([el[e] for e in self.elem_ids.tolist()], dtype=np.int64).reshape(-1, 3)

    @property
    def n_elements(self) -> int:
        return len(self.elem_ids)

    @cached_property
    def _side_tables(self):
        local = self.elements[:, LOCAL_SIDES]  # (n, 3, 2)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        nv = self.forest.n_vertices
        codes = pairs[:, 0] * nv + pairs[:, 1]
        uniq, first, inv, counts = np.unique(codes, return_index=True, return_inverse=True, return_counts=True)
        sides = pairs[first]
        elem_sides = inv.reshape(-1, 3)
        owner = np.repeat(np.arange(self.n_elements), 3)
        side_elems = np.full((len(uniq), 2), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        sorted_owner = owner[order]
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        side_elems[:, 0] = sorted_owner[starts]
        two = counts >= 2
        side_elems[two, 1] = sorted_owner[starts[two] + 1]
        return uniq, sides, elem_sides, side_elems, counts, nv

    @property
    def sides(self) -> np.ndarray:
        """(m, 2) sorted endpoint vertex ids."""
        return self._side_tables[1]

    @property
    def n_sides(self) -> int:
        return len(self._side_tables[0])

    @property
    def elem_sides(self) -> np.ndarray:
        """(n, 3) side index of local side i (opposite local vertex i)."""
        return self._side_tables[2]

    @property
    def side_elems(self) -> np.ndarray:
        """(m, 2) adjacent element indices, lower index first; -1 on the boundary."""
        return self._side_tables[3]

    @cached_property
    def boundary(self) -> np.ndarray:
        return self.side_elems[:, 1] < 0

    def _check_conforming(self) -> None:
        _, sides, _, side_elems, counts, _ = self._side_tables
        if counts.max(initial=0) > 2:
            bad = np.flatnonzero(counts > 2)[0]
            raise MeshError("overlapping elements", self.elem_ids[side_elems[bad][side_elems[bad] >= 0]])
        bnd = self.forest.boundary_edges
        for s in np.flatnonzero(counts == 1).tolist():
            a, b = sides[s]
            if (int(a), int(b)) not in bnd:
                raise MeshError("non-conforming triangulation (hanging node)", [self.elem_ids[side_elems[s, 0]]])

    def side_index(self, a: int, b: int) -> int:
        """Index of side ``{a, b}``; raises ``KeyError`` if it is not a side."""
        a, b = side_key(a, b)
        codes, nv = self._side_tables[0], self._side_tables[5]
        if a < 0 or b >= nv:
            raise KeyError((a, b))
        c = a * nv + b
        i = int(np.searchsorted(codes, c))
        if i >= len(codes) or codes[i] != c:
            raise KeyError((a, b))
        return i

    def has_side(self, a: int, b: int) -> bool:
        try:
            self.side_index(a, b)
        except KeyError:
            return False
        return True

    def side_indices(self, keys: Iterable[Side]) -> np.ndarray:
        return np.array([self.side_index(a, b) for a, b in keys], dtype=np.int64)

    def side_keys(self, idx: Iterable[int] | None = None) -> list[Side]:
        s = self.sides if idx is None else self.sides[np.asarray(list(idx), dtype=np.int64)]
        return [(int(a), int(b)) for a, b in s.reshape(-1, 2).tolist()]

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.unique(self.elements)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.sides[self.boundary])

    @cached_property
    def tree_nodes(self) -> frozenset[int]:
        parent = self.forest.parent
        seen = set(self.leaf_set)
        for e in self.leaf_set:
            p = parent[e]
            while p >= 0 and p not in seen:
                seen.add(p)
                p = parent[p]
        return frozenset(seen)

    # -- geometry ------------------------------------------------------------
    @cached_property
    def vertex_coords(self) -> np.ndarray:
        """(n, 3, 2) element vertex coordinates."""
        return self.forest.coords[self.elements]

    @cached_property
    def area(self) -> np.ndarray:
        p = self.vertex_coords
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def h2(self) -> np.ndarray:
        """Squared mesh size h_T^2 = |T|."""
        return self.area

    @cached_property
    def grad_bary(self) -> np.ndarray:
        """(n, 3, 2) gradients of the barycentric coordinates."""
        p = self.vertex_coords
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns
        inv = np.linalg.inv(jac)  # rows are grad lambda_1, grad lambda_2
        g = np.empty((self.n_elements, 3, 2))
        g[:, 1:] = inv
        g[:, 0] = -inv[:, 0] - inv[:, 1]
        return g

    @cached_property
    def side_length(self) -> np.ndarray:
        c = self.forest.coords
        return np.linalg.norm(c[self.sides[:, 1]] - c[self.sides[:, 0]], axis=1)

    @cached_property
    def side_midpoint(self) -> np.ndarray:
        c = self.forest.coords
        return 0.5 * (c[self.sides[:, 0]] + c[self.sides[:, 1]])

    @cached_property
    def side_tangent(self) -> np.ndarray:
        """Unit tangent pointing from the lower to the higher endpoint id."""
        c = self.forest.coords
        d = c[self.sides[:, 1]] - c[self.sides[:, 0]]
        return d / self.side_length[:, None]

    def points(self, bary: np.ndarray) -> np.ndarray:
        """Physical points (n, k, 2) for barycentric coordinates (k, 3)."""
        return np.einsum("kj,njd->nkd", bary, self.vertex_coords)

    def diameter(self) -> np.ndarray:
        p = self.vertex_coords
        return np.max(np.linalg.norm(p[:, LOCAL_SIDES[:, 0]] - p[:, LOCAL_SIDES[:, 1]], axis=2), axis=1)

    # -- refinement structure ------------------------------------------------
    @cached_property
    def refd_index(self) -> list[tuple[int, ...]]:
        """For each side S the sorted side indices of refd(T; S).

        Bisecting S requires every adjacent element whose refinement edge is
        not S to be bisected first, i.e. its refinement edge must be bisected
        too; refd(T; S) is the set of sides reachable through that relation.
        """
        ref = self.elem_sides[:, 0]
        se = self.side_elems
        out0 = np.where(ref[se[:, 0]] != np.arange(self.n_sides), ref[se[:, 0]], -1)
        r1 = np.where(se[:, 1] >= 0, ref[np.maximum(se[:, 1], 0)], -1)
        out1 = np.where((se[:, 1] >= 0) & (r1 != np.arange(self.n_sides)), r1, -1)
        succ = np.stack([out0, out1], axis=1).tolist()

        memo: list[frozenset[int] | None] = [None] * self.n_sides
        active = [False] * self.n_sides

        def reach(s: int) -> frozenset[int]:
            got = memo[s]
            if got is not None:
                return got
            if active[s]:
                raise MeshError("cyclic refinement dependency", [])
            active[s] = True
            acc = {s}
            for t in succ[s]:
                if t >= 0:
                    acc |= reach(t)
            active[s] = False
            memo[s] = frozenset(acc)
            return memo[s]

        result = []
        for s in range(self.n_sides):
            if succ[s][0] < 0 and succ[s][1] < 0:
                memo[s] = frozenset((s,))
        for s in range(self.n_sides):
            result.append(tuple(sorted(reach(s))))
        return result

    @cached_property
    def refd_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """``(indptr, indices)`` flattening :attr:`refd_index` for vectorised sums."""
        sets = self.refd_index
        indptr = np.zeros(len(sets) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(r) for r in sets])
        indices = np.fromiter((i for r in sets for i in r), dtype=np.int64, count=int(indptr[-1]))
        return indptr, indices


def _same_forest(*tris: Triangulation) -> MeshForest:
    forest = tris[0].forest
    for t in tris[1:]:
        if t.forest is not forest:
            raise MeshError("triangulations belong to different forests")
    return forest


def refine(T: Triangulation, marked: Iterable[Side]) -> Triangulation:
    """Coarsest conforming refinement of ``T`` in which all marked sides are bisected.

    Marked sides are given by endpoint pairs.  Recursive NVB: to bisect an
    element whose refinement-edge neighbour is not compatible, the neighbour
    is bisected first.
    """
    keys = []
    for a, b in marked:
        if not T.has_side(a, b):
            raise MeshError(f"side {side_key(a, b)} is not a side of the triangulation")
        keys.append(side_key(a, b))
    if not keys:
        return T

    forest = T.forest
    elements = forest.elements
    leaves = set(T.leaf_set)
    overlay: dict[Side, list[int]] = {}
    sides, side_elems, elem_ids = T.sides, T.side_elems, T.elem_ids

    def on_edge(key: Side) -> list[int]:
        got = overlay.get(key)
        if got is not None:
            return got
        try:
            s = T.side_index(*key)
        except KeyError:
            got = []
        else:
            got = [int(elem_ids[k]) for k in side_elems[s] if k >= 0]
        overlay[key] = got
        return got

    def edges_of(e: int) -> list[Side]:
        a, b, c = elements[e]
        return [side_key(b, c), side_key(c, a), side_key(a, b)]

    def split(e: int) -> None:
        for k in edges_of(e):
            on_edge(k).remove(e)
        children = forest.bisect(e)
        leaves.discard(e)
        for c in children:
            leaves.add(c)
            for k in edges_of(c):
                on_edge(k).append(c)

    def bisect_leaf(e: int) -> None:
        _, v1, v2 = elements[e]
        E = side_key(v1, v2)
        nb = [k for k in on_edge(E) if k != e]
        if nb and forest.refinement_edge(nb[0]) != E:
            bisect_leaf(nb[0])
            nb = [k for k in on_edge(E) if k != e]
        if e not in leaves:  # pragma: no cover - excluded by the matching assumption
            raise MeshError("refinement recursion revisited an element", [e])
        split(e)
        for k in nb:
            split(k)

    for key in keys:
        while on_edge(key):
            bisect_leaf(on_edge(key)[0])

    return Triangulation(forest, leaves)


def refd(T: Triangulation, S: Side) -> set[Side]:
    """Sides of ``T`` bisected in the smallest refinement that bisects ``S``."""
    try:
        s = T.side_index(*S)
    except KeyError:
        raise MeshError(f"side {side_key(*S)} is not a side of the triangulation") from None
    return set(T.side_keys(T.refd_index[s]))


def refd_by_refinement(T: Triangulation, S: Side) -> set[Side]:
    """refd by explicit refinement and side-set difference (independent route)."""
    fine = refine(T, [S])
    return {k for k in T.side_keys() if not fine.has_side(*k)}


def meet(T1: Triangulation, T2: Triangulation) -> Triangulation:
    """Finest common coarsening."""
    forest = _same_forest(T1, T2)
    t1, t2 = T1.tree_nodes, T2.tree_nodes
    leaves = {e for e in T1.leaf_set if e in t2} | {e for e in T2.leaf_set if e in t1}
    return Triangulation(forest, leaves)


def join(T1: Triangulation, T2: Triangulation) -> Triangulation:
    """Coarsest common refinement."""
    forest = _same_forest(T1, T2)
    t1, t2 = T1.tree_nodes, T2.tree_nodes
    leaves = {e for e in T1.leaf_set if e not in t2 or e in T2.leaf_set}
    leaves |= {e for e in T2.leaf_set if e not in t1 or e in T1.leaf_set}
    return Triangulation(forest, leaves)


def meet_all(tris: Sequence[Triangulation]) -> Triangulation:
    out = tris[0]
    for t in tris[1:]:
        out = meet(out, t)
    return out


def join_all(tris: Sequence[Triangulation]) -> Triangulation:
    out = tris[0]
    for t in tris[1:]:
        out = join(out, t)
    return out


def uniform_refine(T: Triangulation, times: int = 1) -> Triangulation:
    """REFINE(T; E(T)): every side bisected once (every element split into four)."""
    for _ in range(times):
        T = refine(T, T.side_keys())
    return T


def ancestor_map(coarse: Triangulation, fine: Triangulation) -> np.ndarray:
    """For each element of ``fine`` the index in ``coarse`` of the element containing it."""
    _same_forest(coarse, fine)
    pos = {int(e): i for i, e in enumerate(coarse.elem_ids.tolist())}
    parent = coarse.forest.parent
    out = np.empty(fine.n_elements, dtype=np.int64)
    for i, e in enumerate(fine.elem_ids.tolist()):
        while e not in pos:
            e = parent[e]
            if e < 0:
                raise MeshError("triangulation is not a refinement of the coarse one")
        out[i] = pos[e]
    return out


def is_lower_diamond(
    t_meet: Triangulation, t_join: Triangulation, tris: Sequence[Triangulation]
) -> bool:
    """Whether ``(t_meet, t_join; tris)`` is a lower diamond."""
    if not tris:
        return False
    _same_forest(t_meet, t_join, *tris)
    if meet_all(tris) != t_meet or join_all(tris) != t_join:
        return False
    parent = t_meet.forest.parent
    coarsened = [Tj.leaf_set - t_join.leaf_set for Tj in tris]
    closures = []
    for D in coarsened:
        closure = set(D)
        for e in D:
            p = parent[e]
            while p >= 0:
                closure.add(p)
                p = parent[p]
        closures.append(closure)
    for i in range(len(tris)):
        for j in range(i + 1, len(tris)):
            if coarsened[i] & closures[j] or coarsened[j] & closures[i]:
                return False
    return True


def intermediate_triangulation(T: Triangulation, Tstar: Triangulation) -> Triangulation:
    """uniform_refine(T) met with ``Tstar``; asserts its defining properties."""
    if not T <= Tstar:
        raise MeshError("intermediate triangulation needs T <= T*")
    K = meet(uniform_refine(T), Tstar)
    anc = ancestor_map(T, K)
    ratio = T.area[anc] / K.area
    assert np.all(ratio >= 1 - 1e-12) and np.all(ratio <= 16 + 1e-9), "h_K <= h_T <= 4 h_K violated"
    assert T.leaf_set & Tstar.leaf_set == T.leaf_set & K.leaf_set
    eT = set(T.side_keys())
    eS = {k for k in eT if Tstar.has_side(*k)}
    eK = {k for k in eT if K.has_side(*k)}
    assert eS == eK, "E(T) n E(T*) != E(T) n E(K)"
    return K


def count_new_elements(T: Triangulation) -> int:
    """#(T \\ T_bottom)."""
    return sum(1 for e in T.leaf_set if e >= T.forest.n_roots)


def bdd_ratio(trace: Sequence[tuple[Triangulation, Iterable[Side]]]) -> list[float | None]:
    """#(T_k \\ T_bottom) / sum_{j<k} #M_j for each k; ``None`` where 0/0."""
    if not trace:
        raise ValueError("empty trace")
    out: list[float | None] = []
    marked = 0
    for T, M in trace:
        new = count_new_elements(T)
        if marked == 0:
            out.append(None if new == 0 else float("inf"))
        else:
            out.append(new / marked)
        marked += len(list(M))
    return out
