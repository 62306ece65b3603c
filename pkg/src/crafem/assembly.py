"""Assembly and solution of the Crouzeix-Raviart Poisson and Stokes problems.

Poisson: find u in CR_0(T) with (grad_NC u, grad_NC v) = (f, v).
Stokes:  find (u, p) in CR_0(T)^2 x P0_0(T) with
         (grad_NC u, grad_NC v) + (p, div_NC v) = (f, v),  (q, div_NC u) = 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Triangulation, ancestor_map
from .quadrature import triangle_rule
from .space import CRFunction, P0Function

logger = logging.getLogger(__name__)

#: Above this many unknowns the Poisson system is solved by preconditioned CG.
DIRECT_SOLVE_LIMIT = 400_000
CG_RTOL = 1e-12


class SolverError(RuntimeError):
    pass


@dataclass
class RhsField:
    """Right-hand side ``f(x, y)`` returning shape ``x.shape`` (scalar) or ``x.shape + (2,)``.

    ``degree`` is the polynomial degree of ``f`` or ``None`` for general data;
    the quadrature is chosen exact for degree ``degree + 1`` integrands.
    """

    func: Callable
    ncomp: int = 1
    degree: Optional[int] = None
    zero: bool = False

    @property
    def quad_degree(self) -> Optional[int]:
        return None if self.degree is None else self.degree + 1

    def __call__(self, x, y) -> np.ndarray:
        val = np.asarray(self.func(x, y), dtype=float)
        if self.ncomp == 1:
            val = np.broadcast_to(val, np.shape(x))[..., None]
        else:
            val = np.broadcast_to(val, np.shape(x) + (2,))
        return val

    def at_quadrature(self, T: Triangulation) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(points (q,3), weights (q,), values (n, q, c))."""
        pts, wts = triangle_rule(self.quad_degree)
        xy = T.points(pts)
        return pts, wts, self(xy[..., 0], xy[..., 1])

    @classmethod
    def constant(cls, value) -> "RhsField":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        if value.size == 1:
            c = float(value[0])
            return cls(lambda x, y: np.full(np.shape(x), c), 1, 0)
        v = value.copy()
        return cls(lambda x, y: np.broadcast_to(v, np.shape(x) + (2,)), 2, 0)

    @classmethod
    def zeros(cls, ncomp: int = 1) -> "RhsField":
        out = cls.constant(0.0) if ncomp == 1 else cls.constant([0.0, 0.0])
        out.zero = True
        return out


@dataclass
class SparseSystem:
    """Reduced system: boundary sides eliminated.

    ``dof_map[k]`` gives the unknown index of (side k, component c) as
    ``dof_map[k] + c * n_free`` for free sides and -1 for constrained ones.
    For Stokes the pressures of elements 1..n-1 follow the velocity
    unknowns (element 0 is pinned).
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dof_map: np.ndarray
    constrained: np.ndarray
    ncomp: int = 1
    n_pressure: int = 0

    @property
    def n_free(self) -> int:
        return int((self.dof_map >= 0).sum())

    def dump_matrix_market(self, stem: str | Path) -> None:
        scipy.io.mmwrite(f"{stem}_matrix.mtx", self.matrix, symmetry="symmetric")
        scipy.io.mmwrite(f"{stem}_rhs.mtx", self.rhs[:, None])


def local_stiffness(T: Triangulation) -> np.ndarray:
    """(n, 3, 3) element stiffness |T| * 4 grad(lam_i) . grad(lam_j) of the CR basis."""
    g = T.grad_bary
    return 4.0 * T.area[:, None, None] * np.einsum("nid,njd->nij", g, g)


def stiffness_matrix(T: Triangulation) -> sp.csr_matrix:
    """Full scalar CR stiffness matrix on all sides."""
    K = local_stiffness(T)
    rows = np.repeat(T.elem_sides, 3, axis=1).ravel()
    cols = np.tile(T.elem_sides, (1, 3)).ravel()
    return sp.csr_matrix((K.ravel(), (rows, cols)), shape=(T.n_sides, T.n_sides))


def load_vector(T: Triangulation, f: RhsField) -> np.ndarray:
    """(n_sides, c) entries int f phi_S (all sides, boundary included)."""
    pts, wts, vals = f.at_quadrature(T)
    phi = 1.0 - 2.0 * pts  # (q, 3)
    local = T.area[:, None, None] * np.einsum("q,qi,nqc->nic", wts, phi, vals)
    out = np.zeros((T.n_sides, f.ncomp))
    np.add.at(out, T.elem_sides.ravel(), local.reshape(-1, f.ncomp))
    return out


def _dof_map(T: Triangulation) -> np.ndarray:
    dm = np.full(T.n_sides, -1, dtype=np.int64)
    free = np.flatnonzero(~T.boundary)
    dm[free] = np.arange(len(free))
    return dm


def assemble_poisson(T: Triangulation, f: RhsField) -> SparseSystem:
    if f.ncomp != 1:
        raise ValueError("Poisson needs a scalar right-hand side")
    free = ~T.boundary
    A = stiffness_matrix(T)[free][:, free].tocsr()
    b = load_vector(T, f)[free, 0]
    return SparseSystem(A, b, _dof_map(T), np.flatnonzero(T.boundary))


def _solve_spd(A: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
    if A.shape[0] == 0:
        return np.zeros(0)
    if A.shape[0] <= DIRECT_SOLVE_LIMIT:
        return spla.spsolve(A.tocsc(), b)
    d = A.diagonal()
    M = sp.diags(1.0 / d)
    x, info = spla.cg(A, b, rtol=CG_RTOL, atol=0.0, M=M, maxiter=20 * A.shape[0])
    if info != 0:
        raise SolverError(f"conjugate gradients did not converge (info={info})")
    return x


def solve_poisson(T: Triangulation, f: RhsField, system: SparseSystem | None = None) -> CRFunction:
    sysm = system or assemble_poisson(T, f)
    x = _solve_spd(sysm.matrix, sysm.rhs)
    res = np.linalg.norm(sysm.matrix @ x - sysm.rhs)
    if res > 1e-12 * (np.linalg.norm(sysm.rhs) + 1.0):
        raise SolverError(f"Poisson residual {res:.3e} too large")
    vals = np.zeros(T.n_sides)
    vals[sysm.dof_map >= 0] = x
    return CRFunction(T, vals)


def galerkin_residual(u: CRFunction, f: RhsField) -> float:
    """max_i |(grad_NC u, grad_NC phi_i) - (f, phi_i)| over free basis functions."""
    T = u.tri
    r = stiffness_matrix(T) @ u.values - load_vector(T, f)
    return float(np.abs(r[~T.boundary]).max(initial=0.0))


def divergence_matrix(T: Triangulation) -> sp.csr_matrix:
    """(n_elements, 2 n_sides) matrix of q_T-tested divergence: entry |T| d(phi_S e_c)/dx_c."""
    vals = -2.0 * T.area[:, None, None] * T.grad_bary  # (n, 3, 2)
    n, m = T.n_elements, T.n_sides
    rows = np.repeat(np.arange(n), 6)
    cols = (T.elem_sides[:, :, None] + m * np.arange(2)[None, None, :]).ravel()
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(n, 2 * m))


def assemble_stokes(T: Triangulation, f: RhsField) -> SparseSystem:
    """Saddle system [[A, B1^T], [B1, 0]] with the pressure of the first element pinned to 0.

    The divergence rows sum to zero on CR_0(T)^2 (side means match and vanish
    on the boundary), so dropping one row removes the constant pressure mode
    without losing a constraint.  A dense mean-value multiplier row would
    destroy the sparsity of the LU factors.
    """
    if f.ncomp != 2:
        raise ValueError("Stokes needs a 2-vector right-hand side")
    free = ~T.boundary
    K = stiffness_matrix(T)[free][:, free]
    A = sp.block_diag([K, K])
    free2 = np.concatenate([free, free])
    B = divergence_matrix(T)[:, free2][1:]
    M = sp.bmat([[A, B.T], [B, None]], format="csr")
    fb = load_vector(T, f)[free]
    rhs = np.concatenate([fb[:, 0], fb[:, 1], np.zeros(T.n_elements - 1)])
    return SparseSystem(M, rhs, _dof_map(T), np.flatnonzero(T.boundary), ncomp=2, n_pressure=T.n_elements - 1)


def solve_stokes(
    T: Triangulation, f: RhsField, system: SparseSystem | None = None
) -> tuple[CRFunction, P0Function]:
    sysm = system or assemble_stokes(T, f)
    nf = sysm.n_free
    x = spla.spsolve(sysm.matrix.tocsc(), sysm.rhs)
    if not np.all(np.isfinite(x)):
        raise SolverError("singular Stokes system")
    res = np.linalg.norm(sysm.matrix @ x - sysm.rhs)
    if res > 1e-10 * (np.linalg.norm(sysm.rhs) + 1.0):
        raise SolverError(f"Stokes residual {res:.3e} too large")
    vel = np.zeros((T.n_sides, 2))
    free = sysm.dof_map >= 0
    vel[free, 0] = x[:nf]
    vel[free, 1] = x[nf : 2 * nf]
    p = np.concatenate([[0.0], x[2 * nf :]])
    p = p - (T.area @ p) / T.area.sum()
    return CRFunction(T, vel), P0Function(T, p, mean_zero=True)


def best_approximation(u: CRFunction, Tstar: Triangulation) -> CRFunction:
    """grad_NC-orthogonal projection of ``u`` (on a coarsening of Tstar) into CR_0(Tstar)."""
    anc = ancestor_map(u.tri, Tstar)
    g = u.gradient().values[anc]  # (n*, c, 2)
    rhs_local = -2.0 * Tstar.area[:, None, None] * np.einsum("ncd,nid->nic", g, Tstar.grad_bary)
    c = u.ncomp
    rhs = np.zeros((Tstar.n_sides, c))
    np.add.at(rhs, Tstar.elem_sides.ravel(), rhs_local.reshape(-1, c))
    free = ~Tstar.boundary
    A = stiffness_matrix(Tstar)[free][:, free].tocsr()
    vals = np.zeros((Tstar.n_sides, c))
    for k in range(c):
        vals[free, k] = _solve_spd(A, rhs[free, k])
    return CRFunction(Tstar, vals)


def solve(T: Triangulation, kind: str, f: RhsField):
    """Dispatch on problem kind; returns ``(u, p)`` with ``p`` None for Poisson."""
    if kind == "poisson":
        return solve_poisson(T, f), None
    if kind == "stokes":
        return solve_stokes(T, f)
    raise ValueError(f"unknown problem kind {kind!r}")


@dataclass
class ReferenceSolution:
    """Stand-in for the solution on the (unrepresentable) top of the lattice."""

    tri: Optional[Triangulation]
    velocity: Optional[CRFunction]
    pressure: Optional[P0Function]
    exact: bool = False


def reference_solution(problem, T_ref: Triangulation | None = None) -> ReferenceSolution:
    """Solve on ``T_ref``; bypassed when the problem has an exact solution."""
    if problem.exact_gradient is not None and T_ref is None:
        return ReferenceSolution(None, None, None, exact=True)
    if T_ref is None:
        raise ValueError("a reference triangulation is needed when no exact solution is known")
    u, p = solve(T_ref, problem.kind, problem.f)
    return ReferenceSolution(T_ref, u, p)
