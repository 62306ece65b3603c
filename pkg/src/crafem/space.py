"""Crouzeix-Raviart and auxiliary spaces and the operators between them.

* :func:`interpolate_nc` -- nonconforming interpolation by side means;
* :func:`enrich` -- conforming companion (P1 averaging plus edge bubbles)
  preserving elementwise gradient means;
* :func:`transfer` -- averaging transfer from CR(T) into CR(T*) that is exact
  on unrefined elements.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .mesh import MeshError, Triangulation, ancestor_map, intermediate_triangulation
from .quadrature import DEG2_POINTS, DEG2_WEIGHTS, DEG5_POINTS, DEG5_WEIGHTS, gauss_interval

logger = logging.getLogger(__name__)

#: Upper bound for the interpolation stability constant.
LAMBDA = 0.4396
#: Default weight of the data term in the generalised energy (> 2 LAMBDA^2).
DEFAULT_GAMMA = 0.5


@dataclass(frozen=True)
class SpaceConstants:
    stability: float = LAMBDA
    gamma: float = DEFAULT_GAMMA

    @property
    def gamma_min(self) -> float:
        return 2.0 * self.stability**2


def _as_components(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values[:, None] if values.ndim == 1 else values


@dataclass(eq=False)
class CRFunction:
    """Piecewise affine function given by its values at side midpoints.

    ``values`` has shape ``(n_sides, ncomp)``.  Boundary coefficients vanish.
    """

    tri: Triangulation
    values: np.ndarray

    def __post_init__(self):
        self.values = _as_components(self.values).copy()
        if self.values.shape[0] != self.tri.n_sides or self.values.shape[1] not in (1, 2):
            raise ValueError(f"expected ({self.tri.n_sides}, 1|2) coefficients, got {self.values.shape}")
        bnd = self.values[self.tri.boundary]
        scale = 1.0 + np.abs(self.values).max(initial=0.0)
        if np.abs(bnd).max(initial=0.0) > 1e-10 * scale:
            raise ValueError("Crouzeix-Raviart coefficients on boundary sides must vanish")
        self.values[self.tri.boundary] = 0.0

    @classmethod
    def zeros(cls, tri: Triangulation, ncomp: int = 1) -> "CRFunction":
        return cls(tri, np.zeros((tri.n_sides, ncomp)))

    @classmethod
    def random(cls, tri: Triangulation, rng: np.random.Generator, ncomp: int = 1) -> "CRFunction":
        v = rng.standard_normal((tri.n_sides, ncomp))
        v[tri.boundary] = 0.0
        return cls(tri, v)

    @property
    def ncomp(self) -> int:
        return self.values.shape[1]

    def element_coeffs(self) -> np.ndarray:
        """(n, 3, c): coefficient of local side i (opposite vertex i)."""
        return self.values[self.tri.elem_sides]

    def gradient(self) -> "NCGradientField":
        g = -2.0 * np.einsum("nic,nid->ncd", self.element_coeffs(), self.tri.grad_bary)
        return NCGradientField(self.tri, g)

    def vertex_values(self) -> np.ndarray:
        """(n, 3, c) elementwise traces at the element vertices."""
        c = self.element_coeffs()
        return c.sum(axis=1, keepdims=True) - 2.0 * c

    def evaluate(self, bary: np.ndarray, elems: np.ndarray | None = None) -> np.ndarray:
        """Values (k, q, c) at barycentric points ``bary`` (q, 3) or (k, q, 3)."""
        c = self.element_coeffs()
        if elems is not None:
            c = c[elems]
        phi = 1.0 - 2.0 * np.asarray(bary)
        if phi.ndim == 2:
            return np.einsum("qi,kic->kqc", phi, c)
        return np.einsum("kqi,kic->kqc", phi, c)

    def __add__(self, other: "CRFunction") -> "CRFunction":
        _check_same(self, other)
        return CRFunction(self.tri, self.values + other.values)

    def __sub__(self, other: "CRFunction") -> "CRFunction":
        _check_same(self, other)
        return CRFunction(self.tri, self.values - other.values)

    def __mul__(self, a: float) -> "CRFunction":
        return CRFunction(self.tri, a * self.values)

    __rmul__ = __mul__

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["side_a", "side_b", "component", "value"])
            for (a, b), row in zip(self.tri.side_keys(), self.values.tolist()):
                for c, v in enumerate(row):
                    w.writerow([a, b, c, repr(v)])


def _check_same(u, v) -> None:
    if u.tri != v.tri:
        raise ValueError("functions live on different triangulations")


@dataclass(eq=False)
class P0Function:
    """Elementwise constants, ``values`` of shape (n, c)."""

    tri: Triangulation
    values: np.ndarray
    mean_zero: bool = False

    def __post_init__(self):
        self.values = _as_components(self.values).copy()
        if self.values.shape[0] != self.tri.n_elements:
            raise ValueError("one value per element expected")
        if self.mean_zero:
            mean = self.tri.area @ self.values
            scale = np.sqrt(self.tri.area @ (self.values**2)).max(initial=0.0)
            if np.abs(mean).max() > 1e-12 * max(scale, 1e-300) and np.abs(mean).max() > 1e-14:
                raise ValueError(f"P0 function flagged mean-zero has mean {mean}")

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.tri.area[:, None] * self.values**2)))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["element", "component", "value"])
            for e, row in zip(self.tri.elem_ids.tolist(), self.values.tolist()):
                for c, v in enumerate(row):
                    w.writerow([e, c, repr(v)])


@dataclass(eq=False)
class NCGradientField:
    """Elementwise constant gradients, shape (n, c, 2)."""

    tri: Triangulation
    values: np.ndarray

    def divergence(self) -> P0Function:
        if self.values.shape[1] != 2:
            raise ValueError("divergence needs a 2-vector field")
        return P0Function(self.tri, self.values[:, 0, 0] + self.values[:, 1, 1])

    def norm_sq(self, region: np.ndarray | None = None) -> float:
        sq = self.tri.area * np.sum(self.values**2, axis=(1, 2))
        return float(sq.sum() if region is None else sq[region].sum())


@dataclass(eq=False)
class P2Function:
    """Continuous piecewise quadratic: values at vertices and side midpoints."""

    tri: Triangulation
    vertex: np.ndarray  # (n_forest_vertices, c); only nodes of tri are meaningful
    midpoint: np.ndarray  # (n_sides, c)

    @property
    def ncomp(self) -> int:
        return self.midpoint.shape[1]

    def _local(self):
        v = self.vertex[self.tri.elements]  # (n, 3, c)
        m = self.midpoint[self.tri.elem_sides]  # (n, 3, c), side i opposite vertex i
        return v, m

    def evaluate(self, bary: np.ndarray, elems: np.ndarray | None = None) -> np.ndarray:
        """Values (k, q, c) at barycentric points (q, 3) or (k, q, 3)."""
        v, m = self._local()
        if elems is not None:
            v, m = v[elems], m[elems]
        lam = np.asarray(bary, dtype=float)
        if lam.ndim == 2:
            lam = np.broadcast_to(lam, (len(v),) + lam.shape)
        vb = lam * (2.0 * lam - 1.0)
        mb = 4.0 * np.stack([lam[..., 1] * lam[..., 2], lam[..., 2] * lam[..., 0], lam[..., 0] * lam[..., 1]], axis=-1)
        return np.einsum("kqi,kic->kqc", vb, v) + np.einsum("kqi,kic->kqc", mb, m)

    def gradient(self, bary: np.ndarray) -> np.ndarray:
        """Gradients (n, q, c, 2) at barycentric points (q, 3)."""
        v, m = self._local()
        lam = np.asarray(bary, dtype=float)
        g = self.tri.grad_bary  # (n, 3, 2)
        # d/dx [lam_i (2 lam_i - 1)] = (4 lam_i - 1) grad lam_i
        dv = np.einsum("qi,nid->nqid", 4.0 * lam - 1.0, g)
        pairs = ((1, 2), (2, 0), (0, 1))
        dm = np.stack(
            [4.0 * (np.einsum("q,nd->nqd", lam[:, a], g[:, b]) + np.einsum("q,nd->nqd", lam[:, b], g[:, a]))
             for a, b in pairs],
            axis=2,
        )
        return np.einsum("nqid,nic->nqcd", dv, v) + np.einsum("nqid,nic->nqcd", dm, m)


Field = Union[CRFunction, P2Function, Callable]


# -- helpers ------------------------------------------------------------------
def barycentric(vertex_coords: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Barycentric coordinates (k, q, 3) of points (k, q, 2) in triangles (k, 3, 2)."""
    p0 = vertex_coords[:, 0]
    jac = np.stack([vertex_coords[:, 1] - p0, vertex_coords[:, 2] - p0], axis=2)
    rhs = pts - p0[:, None, :]
    l12 = np.einsum("kij,kqj->kqi", np.linalg.inv(jac), rhs)
    return np.concatenate([1.0 - l12.sum(axis=2, keepdims=True), l12], axis=2)


def _subsides(tri: Triangulation, a: int, b: int) -> list[int]:
    try:
        return [tri.side_index(a, b)]
    except KeyError:
        m = tri.forest.midpoint_of(a, b)
        if m is None:
            raise MeshError(f"side {(a, b)} is not resolved by the finer triangulation") from None
        return _subsides(tri, a, m) + _subsides(tri, m, b)


def _side_means_from_finer(T: Triangulation, v: CRFunction | P2Function) -> np.ndarray:
    """(1/|S|) int_S v ds for S in E(T), v living on a refinement of T."""
    src = v.tri
    lengths = src.side_length
    if isinstance(v, CRFunction):
        side_int = lengths[:, None] * v.values
    else:
        va = v.vertex[src.sides[:, 0]]
        vb = v.vertex[src.sides[:, 1]]
        side_int = lengths[:, None] * (va + 4.0 * v.midpoint + vb) / 6.0
    out = np.zeros((T.n_sides, side_int.shape[1]))
    for s, (a, b) in enumerate(T.sides.tolist()):
        out[s] = side_int[_subsides(src, a, b)].sum(axis=0)
    return out / T.side_length[:, None]


def _side_means_from_coarser(T: Triangulation, v: P2Function) -> np.ndarray:
    anc = ancestor_map(v.tri, T)
    k = anc[T.side_elems[:, 0]]
    c = T.forest.coords
    pts = np.stack([c[T.sides[:, 0]], T.side_midpoint, c[T.sides[:, 1]]], axis=1)
    lam = barycentric(v.tri.vertex_coords[k], pts)
    vals = v.evaluate(lam, elems=k)  # (m, 3, c)
    return (vals[:, 0] + 4.0 * vals[:, 1] + vals[:, 2]) / 6.0


def _side_means_from_callable(T: Triangulation, v: Callable, ncomp: int, order: int = 5) -> np.ndarray:
    t, w = gauss_interval(order)
    c = T.forest.coords
    a, b = c[T.sides[:, 0]], c[T.sides[:, 1]]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    vals = np.asarray(v(pts[..., 0], pts[..., 1]), dtype=float)
    if vals.ndim == 2:
        vals = vals[..., None]
    if vals.shape[-1] != ncomp:
        raise ValueError("callable returned the wrong number of components")
    return np.einsum("q,mqc->mc", w, vals)


def interpolate_nc(T: Triangulation, v: Field, ncomp: int = 1) -> CRFunction:
    """Nonconforming interpolation: coefficient at m_S is the mean of v over S.

    ``v`` may be a CR or P2 function on a refinement of ``T``, a P2 function
    on a coarsening of ``T`` (continuous, so side means are unambiguous), or a
    callable ``v(x, y)`` evaluated by 5-point Gauss rules per side.
    """
    means = side_means(T, v, ncomp)
    means[T.boundary] = 0.0
    return CRFunction(T, means)


def side_means(T: Triangulation, v: Field, ncomp: int = 1) -> np.ndarray:
    """(n_sides, c) array of (1/|S|) int_S v ds, boundary sides included."""
    if isinstance(v, (CRFunction, P2Function)):
        if v.tri.forest is not T.forest:
            raise MeshError("function lives on a foreign forest")
        if T <= v.tri:
            means = _side_means_from_finer(T, v)
        elif isinstance(v, P2Function) and v.tri <= T:
            means = _side_means_from_coarser(T, v)
        else:
            raise MeshError("function is not associated with a refinement of T")
    elif callable(v):
        means = _side_means_from_callable(T, v, ncomp)
    else:
        raise TypeError(f"cannot interpolate {type(v).__name__}")
    return means


def enrich(T: Triangulation, v: CRFunction) -> P2Function:
    """Conforming P2 companion of ``v`` with the same side means and zero trace.

    Vertex values are averages of the elementwise traces (zero at boundary
    nodes); the midpoint values then add the edge bubble that restores the
    side mean, so elementwise gradient means agree with those of ``v``.
    """
    if v.tri != T:
        raise ValueError("v must live on T")
    nv = T.forest.n_vertices
    c = v.ncomp
    acc = np.zeros((nv, c))
    cnt = np.zeros(nv)
    np.add.at(acc, T.elements.ravel(), v.vertex_values().reshape(-1, c))
    np.add.at(cnt, T.elements.ravel(), 1.0)
    vertex = np.divide(acc, np.maximum(cnt, 1.0)[:, None])
    vertex[T.boundary_nodes] = 0.0
    wa = vertex[T.sides[:, 0]]
    wb = vertex[T.sides[:, 1]]
    # Simpson: |S|/6 (wa + 4 wm + wb) = |S| v(m_S)
    mid = (6.0 * v.values - wa - wb) / 4.0
    return P2Function(T, vertex, mid)


def enrich_then_interpolate(T: Triangulation, Tstar: Triangulation, v: CRFunction) -> CRFunction:
    """I_{T*} composed with the enrichment on ``T``."""
    if not T <= Tstar:
        raise MeshError("needs T <= T*")
    return interpolate_nc(Tstar, enrich(T, v))


def prolong(coarse: CRFunction, fine: Triangulation) -> tuple[np.ndarray, np.ndarray]:
    """Coarse CR function seen on a refinement: (gradients (n, c, 2), ancestor map)."""
    anc = ancestor_map(coarse.tri, fine)
    return coarse.gradient().values[anc], anc


def evaluate_on(fn: CRFunction, fine: Triangulation, bary: np.ndarray, anc: np.ndarray | None = None) -> np.ndarray:
    """Values (n_fine, q, c) of ``fn`` (on a coarsening of ``fine``) at fine barycentric points."""
    if anc is None:
        anc = ancestor_map(fn.tri, fine)
    pts = fine.points(bary)
    lam = barycentric(fn.tri.vertex_coords[anc], pts)
    return fn.evaluate(lam, elems=anc)


def _star_classes(T: Triangulation, K: Triangulation) -> np.ndarray:
    """Class label for every (element, local vertex) of ``K``.

    Two star members of a node z are connected when they share a side of K
    through z that is not a side of T.
    """
    n = K.n_elements
    parent = list(range(3 * n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    local_pos = {}
    for k, tri in enumerate(K.elements.tolist()):
        for i, z in enumerate(tri):
            local_pos[(k, z)] = 3 * k + i
    for s in np.flatnonzero(~K.boundary).tolist():
        a, b = K.sides[s].tolist()
        if T.has_side(a, b):
            continue
        k0, k1 = K.side_elems[s].tolist()
        for z in (a, b):
            r0, r1 = find(local_pos[(k0, z)]), find(local_pos[(k1, z)])
            if r0 != r1:
                parent[r0] = r1
    return np.array([find(i) for i in range(3 * n)]).reshape(n, 3)


@dataclass
class TransferResult:
    result: CRFunction  # on T*
    intermediate: CRFunction  # on the intermediate triangulation
    max_jump: float  # largest midpoint jump of the intermediate function on sides of T*
    stability_ratio: float | None


def transfer(T: Triangulation, Tstar: Triangulation, v: CRFunction, *, details: bool = False):
    """Averaging transfer of ``v`` in CR(T) into CR(Tstar), exact on T n Tstar.

    Built on the intermediate triangulation K: nodal values are averages of
    the traces of ``v`` over star classes that are connected across refined
    sides (zero on the boundary); coefficients on sides kept from ``T`` are
    copied from ``v``.
    """
    if v.tri != T:
        raise ValueError("v must live on T")
    if not T <= Tstar:
        raise MeshError("transfer needs T <= T*")
    if T == Tstar:
        out = CRFunction(T, v.values)
        if details:
            return TransferResult(out, out, 0.0, None)
        return out

    K = intermediate_triangulation(T, Tstar)
    anc = ancestor_map(T, K)
    c = v.ncomp
    # traces of v at the vertices of every K element
    lam = barycentric(T.vertex_coords[anc], K.vertex_coords)
    traces = v.evaluate(lam, elems=anc)  # (nK, 3, c)
    labels = _star_classes(T, K)
    flat = labels.ravel()
    sums = np.zeros((3 * K.n_elements, c))
    cnt = np.zeros(3 * K.n_elements)
    np.add.at(sums, flat, traces.reshape(-1, c))
    np.add.at(cnt, flat, 1.0)
    nodal = (sums[flat] / cnt[flat, None]).reshape(K.n_elements, 3, c)
    on_bnd = np.isin(K.elements, K.boundary_nodes)
    nodal[on_bnd] = 0.0

    coeff = np.zeros((K.n_sides, c))
    vertex_pos = {}
    for k, tri in enumerate(K.elements.tolist()):
        for i, z in enumerate(tri):
            vertex_pos[(k, z)] = i
    for s, (a, b) in enumerate(K.sides.tolist()):
        if T.has_side(a, b):
            coeff[s] = v.values[T.side_index(a, b)]
        else:
            k0, k1 = K.side_elems[s].tolist()
            val = 0.5 * (nodal[k0, vertex_pos[(k0, a)]] + nodal[k0, vertex_pos[(k0, b)]])
            if k1 >= 0:
                alt = 0.5 * (nodal[k1, vertex_pos[(k1, a)]] + nodal[k1, vertex_pos[(k1, b)]])
                assert np.allclose(val, alt, atol=1e-12 * (1 + np.abs(val).max())), "averaged nodal values discontinuous"
            coeff[s] = val
    coeff[K.boundary] = 0.0
    JK = CRFunction(K, coeff)

    # evaluate on T* side midpoints from both neighbours
    ancK = ancestor_map(K, Tstar)
    values = np.zeros((Tstar.n_sides, c))
    max_jump = 0.0
    mids = Tstar.side_midpoint
    for col in (0, 1):
        ks = Tstar.side_elems[:, col]
        has = ks >= 0
        kk = ancK[ks[has]]
        lam = barycentric(K.vertex_coords[kk], mids[has][:, None, :])
        vals = JK.evaluate(lam, elems=kk)[:, 0]
        if col == 0:
            values[has] = vals
        else:
            max_jump = float(np.abs(vals - values[has]).max(initial=0.0))
    bnd = np.abs(values[Tstar.boundary]).max(initial=0.0)
    max_jump = max(max_jump, bnd)
    values[Tstar.boundary] = 0.0
    out = CRFunction(Tstar, values)
    if not details:
        return out
    return TransferResult(out, JK, max_jump, transfer_stability_ratio(T, out, v))


def transfer_stability_ratio(T: Triangulation, Jv: CRFunction, v: CRFunction) -> float | None:
    """(||h_T^-1 (v - Jv)||^2 + ||grad_NC (v - Jv)||^2) / sum of h_S ||[grad v . t]||_S^2
    over E(T) \\ E(T*); ``None`` when both vanish."""
    Tstar = Jv.tri
    anc = ancestor_map(T, Tstar)
    diff_vals = evaluate_on(v, Tstar, DEG2_POINTS, anc) - Jv.evaluate(DEG2_POINTS)
    l2 = np.sum(Tstar.area[:, None] / T.area[anc][:, None] * DEG2_WEIGHTS[None, :] * np.sum(diff_vals**2, axis=2))
    g = v.gradient().values[anc] - Jv.gradient().values
    h1 = np.sum(Tstar.area * np.sum(g**2, axis=(1, 2)))
    refined = np.array([not Tstar.has_side(a, b) for a, b in T.sides.tolist()], dtype=bool)
    jumps = tangential_jump(v)
    rhs = float(np.sum((T.side_length**2 * np.sum(jumps**2, axis=1))[refined]))
    lhs = float(l2 + h1)
    if lhs < 1e-14 and rhs < 1e-14:
        return None
    return lhs / rhs if rhs > 0 else float("inf")


def tangential_jump(v: CRFunction) -> np.ndarray:
    """(m, c) jump of grad_NC v . t per side (trace on boundary sides).

    Sign: lower-index element minus higher-index element.
    """
    T = v.tri
    g = v.gradient().values  # (n, c, 2)
    t = T.side_tangent
    k0, k1 = T.side_elems[:, 0], T.side_elems[:, 1]
    j = np.einsum("mcd,md->mc", g[k0], t)
    inner = k1 >= 0
    j[inner] -= np.einsum("mcd,md->mc", g[k1[inner]], t[inner])
    return j


def l2_project_p0(T: Triangulation, q, ncomp: int = 1, degree: int | None = None) -> P0Function:
    """Elementwise averages of ``q`` (callable, or P0 on T or on a refinement)."""
    if isinstance(q, P0Function):
        if q.tri == T:
            return P0Function(T, q.values)
        anc = ancestor_map(T, q.tri)
        acc = np.zeros((T.n_elements, q.values.shape[1]))
        np.add.at(acc, anc, q.tri.area[:, None] * q.values)
        return P0Function(T, acc / T.area[:, None])
    from .quadrature import triangle_rule

    pts, wts = triangle_rule(degree)
    xy = T.points(pts)
    vals = np.asarray(q(xy[..., 0], xy[..., 1]), dtype=float)
    if vals.ndim == 2:
        vals = vals[..., None]
    return P0Function(T, np.einsum("q,nqc->nc", wts, vals))


def nc_gradient(v: CRFunction) -> NCGradientField:
    return v.gradient()


def nc_divergence(v: CRFunction) -> P0Function:
    if v.ncomp != 2:
        raise ValueError("divergence requested on a scalar field")
    return v.gradient().divergence()


def interpolation_errors(T: Triangulation, v: P2Function) -> tuple[float, float, float]:
    """(||h^-1 (v - I v)||, ||grad_NC (v - I v)||, ||grad v||) for conforming P2 ``v`` on T."""
    Iv = interpolate_nc(T, v, v.ncomp)
    d = v.evaluate(DEG5_POINTS) - Iv.evaluate(DEG5_POINTS)
    l2 = np.sum(DEG5_WEIGHTS[None, :] * np.sum(d**2, axis=2), axis=1)  # |T|-normalised, times |T|/h^2 = 1
    gv = v.gradient(DEG5_POINTS)
    gd = gv - Iv.gradient().values[:, None]
    h1d = T.area * np.sum(DEG5_WEIGHTS[None, :] * np.sum(gd**2, axis=(2, 3)), axis=1)
    h1v = T.area * np.sum(DEG5_WEIGHTS[None, :] * np.sum(gv**2, axis=(2, 3)), axis=1)
    return float(np.sqrt(l2.sum())), float(np.sqrt(h1d.sum())), float(np.sqrt(h1v.sum()))


def random_p2(T: Triangulation, rng: np.random.Generator, ncomp: int = 1) -> P2Function:
    """Random continuous piecewise quadratic with zero boundary trace."""
    vertex = rng.standard_normal((T.forest.n_vertices, ncomp))
    vertex[T.boundary_nodes] = 0.0
    mid = rng.standard_normal((T.n_sides, ncomp))
    mid[T.boundary] = 0.0
    return P2Function(T, vertex, mid)
