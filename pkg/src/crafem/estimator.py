"""Side-based error indicators, data oscillation and the generalised energy."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .assembly import RhsField, load_vector
from .mesh import MeshError, Triangulation, ancestor_map
from .quadrature import triangle_rule
from .space import LAMBDA, DEFAULT_GAMMA, CRFunction, P0Function, tangential_jump

logger = logging.getLogger(__name__)


def data_weights(T: Triangulation, f: RhsField) -> np.ndarray:
    """Per element ||h_T f||_T^2 = |T| int_T |f|^2."""
    _, wts, vals = f.at_quadrature(T)
    return T.area**2 * np.einsum("q,nqc->n", wts, vals**2)


@dataclass
class IndicatorTable:
    tri: Triangulation
    volume: np.ndarray  # ||h_T f||^2 over the side patch
    jump: np.ndarray  # h_S ||[grad_NC u . t]||_S^2
    total: np.ndarray

    def __post_init__(self):
        if np.any(self.volume < 0) or np.any(self.jump < 0):
            raise ValueError("negative indicator entry")

    def sum(self, idx=None) -> float:
        return float(self.total.sum() if idx is None else self.total[np.asarray(idx, dtype=np.int64)].sum())

    def on_sides(self, keys) -> float:
        """Sum over sides given by endpoint pairs."""
        return self.sum(self.tri.side_indices(keys)) if keys else 0.0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["side_a", "side_b", "volume", "jump", "total"])
            for (a, b), v, j, t in zip(self.tri.side_keys(), self.volume.tolist(), self.jump.tolist(), self.total.tolist()):
                w.writerow([a, b, repr(v), repr(j), repr(t)])

    def to_json(self) -> str:
        return json.dumps(
            [
                {"side": [a, b], "volume": v, "jump": j, "total": t}
                for (a, b), v, j, t in zip(self.tri.side_keys(), self.volume.tolist(), self.jump.tolist(), self.total.tolist())
            ]
        )


def indicators(T: Triangulation, u: CRFunction, f: RhsField) -> IndicatorTable:
    """eta^2(S) = sum_{T in patch(S)} ||h_T f||_T^2 + h_S^2 |[grad_NC u . t]|^2."""
    if u.tri != T:
        raise MeshError("u does not live on T")
    w = data_weights(T, f)
    se = T.side_elems
    volume = w[se[:, 0]] + np.where(se[:, 1] >= 0, w[np.maximum(se[:, 1], 0)], 0.0)
    jump = T.side_length**2 * np.sum(tangential_jump(u) ** 2, axis=1)
    return IndicatorTable(T, volume, jump, volume + jump)


def refd_sums(T: Triangulation, table: IndicatorTable) -> np.ndarray:
    """eta^2(refd(T; S)) for every side S."""
    indptr, indices = T.refd_csr
    if len(indices) == 0:
        return np.zeros(0)
    return np.add.reduceat(table.total[indices], indptr[:-1])


def eta_bar(T: Triangulation, table: IndicatorTable) -> tuple[float, np.ndarray]:
    """(max_S eta^2(refd(T; S)), per-side values)."""
    if table.tri != T:
        raise MeshError("indicator table belongs to another triangulation")
    vals = refd_sums(T, table)
    return float(vals.max(initial=0.0)), vals


@dataclass
class EnergyRecord:
    gamma: float
    dirichlet: float  # 1/2 ||grad_NC u||^2
    load: float  # int f . u
    data: float  # gamma ||h f||^2 (0 for the top stand-in)

    @property
    def total(self) -> float:
        return -(self.dirichlet - self.load) + self.data

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def _check_gamma(gamma: float) -> None:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if gamma <= 2 * LAMBDA**2:
        warnings.warn(f"gamma={gamma} does not exceed 2*Lambda^2={2 * LAMBDA**2:.4f}; energy may not be monotone")


def energy(T: Triangulation, u: CRFunction, f: RhsField, gamma: float = DEFAULT_GAMMA) -> EnergyRecord:
    _check_gamma(gamma)
    dirichlet = 0.5 * u.gradient().norm_sq()
    load = float(np.sum(load_vector(T, f) * u.values))
    return EnergyRecord(gamma, dirichlet, load, gamma * float(data_weights(T, f).sum()))


def energy_of_top(problem, reference: Optional[CRFunction] = None, gamma: float = DEFAULT_GAMMA) -> EnergyRecord:
    """Energy of the top stand-in: exact value if known, else the reference solution, data term omitted."""
    if problem.exact_energy is not None:
        return EnergyRecord(gamma, problem.exact_energy, 2.0 * problem.exact_energy, 0.0)
    if reference is None:
        raise ValueError("no exact energy and no reference solution")
    rec = energy(reference.tri, reference, problem.f, gamma)
    return EnergyRecord(gamma, rec.dirichlet, rec.load, 0.0)


@dataclass
class OscillationRecord:
    per_element: np.ndarray

    @property
    def total(self) -> float:
        return float(self.per_element.sum())


def oscillation(T: Triangulation, f: RhsField, degree: int | None = None) -> OscillationRecord:
    """Per element h_T^2 ||f - f_T||_T^2 with f_T the element mean."""
    pts, wts = triangle_rule(degree if degree is not None else f.quad_degree)
    xy = T.points(pts)
    vals = f(xy[..., 0], xy[..., 1])
    mean = np.einsum("q,nqc->nc", wts, vals)
    dev = np.einsum("q,nqc->n", wts, (vals - mean[:, None, :]) ** 2)
    return OscillationRecord(T.area**2 * dev)


def error_to_exact(u: CRFunction, problem) -> float:
    """||grad_NC (u_exact - u)||^2 by high-order quadrature."""
    T = u.tri
    pts, wts = triangle_rule(problem.error_quad_degree)
    xy = T.points(pts)
    g = problem.exact_gradient(xy[..., 0], xy[..., 1])  # (n, q, c, 2)
    d = g - u.gradient().values[:, None]
    return float(np.sum(T.area * np.einsum("q,nqcd->n", wts, d**2)))


def error_to_reference(u: CRFunction, reference: CRFunction) -> float:
    """||grad_NC (u_ref - u)||^2 for ``u`` on a coarsening of the reference mesh."""
    anc = ancestor_map(u.tri, reference.tri)
    d = reference.gradient().values - u.gradient().values[anc]
    return float(np.sum(reference.tri.area * np.sum(d**2, axis=(1, 2))))


def coarsened_mask(T: Triangulation, Tstar: Triangulation) -> np.ndarray:
    """Elements of T that are not elements of Tstar."""
    return ~np.isin(T.elem_ids, Tstar.elem_ids)


def refined_sides(T: Triangulation, Tstar: Triangulation) -> np.ndarray:
    """Indices of E(T) \\ E(Tstar)."""
    return np.array([i for i, (a, b) in enumerate(T.sides.tolist()) if not Tstar.has_side(a, b)], dtype=np.int64)


@dataclass
class EnergyGapReport:
    energy_gap: float  # G(T) - G(T*)
    dirichlet_gap: float  # ||grad_NC (u* - u)||^2
    data_coarsened: float  # ||h_T f||^2 over Omega(T \ T*)
    eta_refined: float  # eta^2(E(T) \ E(T*))
    gamma: float
    stability: float = LAMBDA

    @property
    def quasi_error(self) -> float:
        return self.dirichlet_gap + self.data_coarsened

    @property
    def lower_bracket(self) -> float:
        return 0.25 * self.dirichlet_gap + (self.gamma / 2 - self.stability**2) * self.data_coarsened

    @property
    def upper_bracket(self) -> float:
        return 0.75 * self.dirichlet_gap + (self.gamma + self.stability**2) * self.data_coarsened

    def bracket_holds(self, slack: float = 1e-12) -> bool:
        tol = slack * max(1.0, abs(self.energy_gap), self.upper_bracket)
        return self.lower_bracket - tol <= self.energy_gap <= self.upper_bracket + tol

    def ratios(self, floor: float = 1e-14) -> tuple[Optional[float], Optional[float]]:
        """(quasi-error / eta^2, energy gap / eta^2); None for 0/0 samples."""
        out = []
        for num in (self.quasi_error, self.energy_gap):
            if abs(num) < floor and self.eta_refined < floor:
                out.append(None)
            else:
                out.append(num / self.eta_refined if self.eta_refined > 0 else float("inf"))
        return out[0], out[1]


def energy_difference_vs_error(
    T: Triangulation,
    Tstar: Triangulation,
    problem,
    u: CRFunction | None = None,
    ustar: CRFunction | None = None,
    gamma: float = DEFAULT_GAMMA,
) -> EnergyGapReport:
    """Energy gap, quasi-error and refined-side estimator for a nested pair T <= T*."""
    from .assembly import solve

    if not T <= Tstar:
        raise MeshError("needs T <= T*")
    if u is None:
        u = solve(T, problem.kind, problem.f)[0]
    if ustar is None:
        ustar = solve(Tstar, problem.kind, problem.f)[0]
    f = problem.f
    gap = energy(T, u, f, gamma).total - energy(Tstar, ustar, f, gamma).total
    dir_gap = error_to_reference(u, ustar)
    data = float(data_weights(T, f)[coarsened_mask(T, Tstar)].sum())
    table = indicators(T, u, f)
    eta = table.sum(refined_sides(T, Tstar))
    rep = EnergyGapReport(gap, dir_gap, data, eta, gamma)
    floor = -1e-12 * max(1.0, abs(energy(T, u, f, gamma).total))
    if rep.energy_gap < floor or rep.quasi_error < 0 or rep.eta_refined < 0:
        raise AssertionError(f"negative energy gap or error quantity: {rep}")
    return rep


def pressure_bound_ratio(
    T: Triangulation, Tstar: Triangulation, u: CRFunction, p: P0Function, ustar: CRFunction, pstar: P0Function, f: RhsField
) -> Optional[float]:
    """||p* - p|| / (||grad_NC (u* - u)|| + ||h_T f||_{Omega(T \\ T*)}); None for 0/0."""
    anc = ancestor_map(T, Tstar)
    dp = pstar.values - p.values[anc]
    num = float(np.sqrt(np.sum(Tstar.area[:, None] * dp**2)))
    den = np.sqrt(error_to_reference(u, ustar)) + np.sqrt(data_weights(T, f)[coarsened_mask(T, Tstar)].sum())
    if num < 1e-14 and den < 1e-14:
        return None
    return num / den if den > 0 else float("inf")
