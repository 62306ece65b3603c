"""Executable checks of the exact identities and measured equivalence constants.

Every check returns a :class:`RatioReport` (or a list of them) that can be
serialised to JSON.  Quantities with explicit constants are gated; the rest
are reported as measured values only.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .afem import AfemConfig, afem_run
from .assembly import RhsField, solve
from .estimator import (
    data_weights,
    energy,
    energy_difference_vs_error,
    pressure_bound_ratio,
)
from .mesh import (
    MeshForest,
    Triangulation,
    ancestor_map,
    count_new_elements,
    is_lower_diamond,
    join_all,
    meet_all,
    refine,
    uniform_refine,
)
from .space import (
    DEG2_POINTS,
    DEG2_WEIGHTS,
    CRFunction,
    enrich_then_interpolate,
    interpolate_nc,
    transfer,
)

logger = logging.getLogger(__name__)

#: Samples with numerator and denominator both below this are 0/0 and dropped.
DEGENERATE = 1e-14
EXACT_TOL = 1e-10


@dataclass
class RatioReport:
    name: str
    anchor: str  # the property being checked, in words
    samples: list[float] = field(default_factory=list)
    bracket: Optional[tuple[float, float]] = None  # None: measured only
    witnesses: list[dict] = field(default_factory=list)
    note: str = ""

    @property
    def measured_only(self) -> bool:
        return self.bracket is None

    @property
    def stats(self) -> dict:
        if not self.samples:
            return {"count": 0, "min": None, "max": None, "mean": None}
        a = np.asarray(self.samples, dtype=float)
        return {"count": len(a), "min": float(a.min()), "max": float(a.max()), "mean": float(a.mean())}

    @property
    def passed(self) -> bool:
        if self.witnesses:
            return False
        if self.bracket is None:
            return all(math.isfinite(s) for s in self.samples)
        lo, hi = self.bracket
        return all(lo <= s <= hi for s in self.samples)

    @property
    def vacuous(self) -> bool:
        return not self.samples and not self.witnesses

    @property
    def verdict(self) -> str:
        if self.vacuous:
            return "pass (vacuous)"
        if not self.passed:
            return "fail"
        return "measured" if self.measured_only else "pass"

    def add(self, value: float, witness: dict | None = None) -> None:
        self.samples.append(float(value))
        if self.bracket is not None and not (self.bracket[0] <= value <= self.bracket[1]):
            self.witnesses.append(witness or {"value": value})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "anchor": self.anchor,
            "samples": self.samples,
            "stats": self.stats,
            "bracket": list(self.bracket) if self.bracket else None,
            "verdict": self.verdict,
            "witnesses": self.witnesses,
            "note": self.note,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _ratio(num: float, den: float) -> Optional[float]:
    if abs(num) < DEGENERATE and abs(den) < DEGENERATE:
        return None
    return num / den if den != 0 else math.inf


# -- corpora -----------------------------------------------------------------
def random_refinement(T: Triangulation, rng: np.random.Generator, n_marks: int) -> Triangulation:
    keys = T.side_keys()
    pick = rng.choice(len(keys), size=min(n_marks, len(keys)), replace=False)
    return refine(T, [keys[i] for i in np.sort(pick)])


def nested_pairs(
    forest: MeshForest, n: int, seed: int, base_uniform: int = 1, max_steps: int = 3
) -> list[tuple[Triangulation, Triangulation]]:
    """``n`` seeded nested pairs T <= T* built by random marking."""
    rng = np.random.default_rng(seed)
    base = uniform_refine(forest.bottom, base_uniform)
    out = []
    for _ in range(n):
        T = base
        for _ in range(int(rng.integers(0, max_steps))):
            T = random_refinement(T, rng, int(rng.integers(1, 4)))
        Tstar = T
        for _ in range(int(rng.integers(1, max_steps + 1))):
            Tstar = random_refinement(Tstar, rng, int(rng.integers(1, 5)))
        out.append((T, Tstar))
    return out


@dataclass
class IdentityCase:
    T: Triangulation
    Tstar: Triangulation
    seed: int
    corrupt: float = 0.0  # added to one interpolation coefficient (fault injection)


def identity_corpus(forests: Sequence[MeshForest], n: int, seed: int) -> list[IdentityCase]:
    cases = []
    per = [n // len(forests) + (1 if i < n % len(forests) else 0) for i in range(len(forests))]
    for i, (forest, k) in enumerate(zip(forests, per)):
        for j, (T, Ts) in enumerate(nested_pairs(forest, k, seed + 1000 * i)):
            cases.append(IdentityCase(T, Ts, seed + 1000 * i + j))
    return cases


# -- exact identities ----------------------------------------------------------
def _grad_mean_residual(T: Triangulation, fine_grad: np.ndarray, fine: Triangulation, coarse_grad: np.ndarray) -> float:
    anc = ancestor_map(T, fine)
    acc = np.zeros_like(coarse_grad)
    np.add.at(acc, anc, fine.area[:, None, None] * fine_grad)
    return float(np.abs(acc / T.area[:, None, None] - coarse_grad).max(initial=0.0))


def identity_residuals(case: IdentityCase) -> dict[str, float]:
    """Residuals of the exact identities on one nested pair."""
    T, Ts = case.T, case.Tstar
    rng = np.random.default_rng(case.seed)
    kept = np.isin(Ts.elem_ids, T.elem_ids)
    anc = ancestor_map(T, Ts)
    out = {}

    # projection property of the interpolation and its orthogonality
    v = CRFunction.random(Ts, rng)
    Iv = interpolate_nc(T, v)
    if case.corrupt:
        vals = Iv.values.copy()
        vals[int(np.flatnonzero(~T.boundary)[0])] += case.corrupt
        Iv = CRFunction(T, vals)
    out["gradient mean of interpolation"] = _grad_mean_residual(T, v.gradient().values, Ts, Iv.gradient().values)
    w = CRFunction.random(T, rng)
    gw = w.gradient().values
    lhs = float(np.sum(Ts.area[:, None, None] * gw[anc] * v.gradient().values))
    rhs = float(np.sum(T.area[:, None, None] * gw * Iv.gradient().values))
    out["orthogonality of interpolation error"] = abs(lhs - rhs)

    # conservation of interpolation after enrichment
    z = CRFunction.random(T, rng)
    IEz = enrich_then_interpolate(T, Ts, z)
    gz = z.gradient().values
    out["gradient mean of enrich-interpolate"] = _grad_mean_residual(T, IEz.gradient().values, Ts, gz)
    vz = z.evaluate(DEG2_POINTS)  # values at the element's side midpoints
    fine_vals = IEz.evaluate(DEG2_POINTS)
    out["conservation of enrich-interpolate"] = float(
        np.abs(fine_vals[kept] - vz[anc[kept]]).max(initial=0.0)
    )

    # transfer: conservation on unrefined elements and CR membership
    res = transfer(T, Ts, z, details=True)
    Jz = res.result.evaluate(DEG2_POINTS)
    out["conservation of transfer"] = float(np.abs(Jz[kept] - vz[anc[kept]]).max(initial=0.0))
    out["transfer lands in CR of the finer mesh"] = res.max_jump
    return out


def check_exact_identities(corpus: Sequence[IdentityCase], tol: float = EXACT_TOL) -> RatioReport:
    """Maximum residual per case; every residual must be <= ``tol``."""
    rep = RatioReport(
        "exact-identities",
        "interpolation projection and orthogonality, conservation of enrich-interpolate and transfer",
        bracket=(0.0, tol),
    )
    if not corpus:
        rep.note = "empty corpus"
        return rep
    for i, case in enumerate(corpus):
        r = identity_residuals(case)
        worst = max(r, key=r.get)
        rep.samples.append(r[worst])
        for name, val in r.items():
            if not val <= tol:
                rep.witnesses.append({"case": i, "identity": name, "residual": val, "seed": case.seed})
    return rep


def stability_samples(forest: MeshForest, n: int, seed: int) -> list[tuple[float, float, float]]:
    """(||h^-1 (v - Iv)||, ||grad_NC (v - Iv)||, ||grad v||) for random conforming P2 inputs."""
    from .space import interpolation_errors, random_p2

    rng = np.random.default_rng(seed)
    meshes = [uniform_refine(forest.bottom, k) for k in (1, 2, 3)]
    out = []
    for i in range(n):
        T = meshes[i % len(meshes)]
        if i % 2:
            T = random_refinement(T, rng, 3)
        out.append(interpolation_errors(T, random_p2(T, rng)))
    return out


# -- energy bracket and estimator equivalence ------------------------------------
@dataclass
class SolvedPair:
    problem: object
    T: Triangulation
    Tstar: Triangulation
    u: CRFunction
    ustar: CRFunction
    p: object = None
    pstar: object = None


def solve_pairs(problem, pairs: Iterable[tuple[Triangulation, Triangulation]]) -> list[SolvedPair]:
    cache: dict = {}

    def get(T):
        if T not in cache:
            cache[T] = solve(T, problem.kind, problem.f)
        return cache[T]

    out = []
    for T, Ts in pairs:
        (u, p), (us, ps) = get(T), get(Ts)
        out.append(SolvedPair(problem, T, Ts, u, us, p, ps))
    return out


def check_energy_bracket(corpus: Sequence[SolvedPair], gamma: float = 0.5) -> tuple[RatioReport, RatioReport]:
    """Gated: position of the energy gap inside the explicit bracket (must lie in [0, 1]),
    and monotonicity G(T*) <= G(T) + 1e-10."""
    pos = RatioReport(
        "energy-bracket",
        "energy gap between quarter and three-quarter Dirichlet gap plus data terms",
        bracket=(-1e-9, 1.0 + 1e-9),
        note="sample = (gap - lower) / (upper - lower)",
    )
    mono = RatioReport("energy-monotonicity", "energy does not increase under refinement", bracket=(-1e-10, math.inf),
                       note="sample = G(T) - G(T*)")
    for i, s in enumerate(corpus):
        r = energy_difference_vs_error(s.T, s.Tstar, s.problem, s.u, s.ustar, gamma)
        mono.add(r.energy_gap, {"case": i, "gap": r.energy_gap})
        if not r.bracket_holds():
            pos.witnesses.append({"case": i, "lower": r.lower_bracket, "gap": r.energy_gap, "upper": r.upper_bracket})
        width = r.upper_bracket - r.lower_bracket
        if width > DEGENERATE:
            pos.samples.append((r.energy_gap - r.lower_bracket) / width)
    return pos, mono


def check_estimator_equivalence(corpus: Sequence[SolvedPair], gamma: float = 0.5) -> tuple[RatioReport, RatioReport]:
    """Measured ratios quasi-error / eta^2(refined sides) and energy gap / eta^2(refined sides)."""
    quasi = RatioReport("quasi-error-over-estimator", "estimator on refined sides controls the quasi-error")
    gap = RatioReport("energy-gap-over-estimator", "estimator on refined sides is equivalent to the energy gap")
    for i, s in enumerate(corpus):
        r = energy_difference_vs_error(s.T, s.Tstar, s.problem, s.u, s.ustar, gamma)
        if r.quasi_error < 0 or r.eta_refined < 0 or r.energy_gap < -1e-10:
            quasi.witnesses.append({"case": i, "negative": True})
        q, g = r.ratios(DEGENERATE)
        if q is not None:
            quasi.samples.append(q)
        if g is not None:
            gap.samples.append(g)
    return quasi, gap


def check_pressure_bound(corpus: Sequence[SolvedPair]) -> RatioReport:
    rep = RatioReport("pressure-bound", "pressure difference controlled by velocity gap plus data on coarsened area")
    for s in corpus:
        r = pressure_bound_ratio(s.T, s.Tstar, s.u, s.p, s.ustar, s.pstar, s.problem.f)
        if r is not None:
            rep.samples.append(r)
    return rep


# -- lower diamonds -------------------------------------------------------------
@dataclass
class Diamond:
    bottom: Triangulation  # meet
    top: Triangulation  # join
    members: list[Triangulation]


def _element_region(T: Triangulation, Tfine: Triangulation) -> set[int]:
    """Elements of T refined in Tfine."""
    return set(T.leaf_set - Tfine.leaf_set)


def diamond_generator(
    base: Triangulation, m: int, rng: np.random.Generator, marks: int = 2, attempts: int = 200
) -> Diamond:
    """Refine ``m`` regions of ``base`` with pairwise disjoint refinement areas.

    Member j is the join of all regional refinements except the j-th one, so
    that its coarsening area relative to the join is exactly region j.
    """
    if m == 1:
        return Diamond(base, base, [base])
    keys = base.side_keys()
    for _ in range(attempts):
        regions, used = [], set()
        for _ in range(m):
            for _ in range(attempts):
                pick = rng.choice(len(keys), size=marks, replace=False)
                R = refine(base, [keys[i] for i in pick])
                area = _element_region(base, R)
                if not area & used:
                    break
            else:
                break
            regions.append(R)
            used |= area
        if len(regions) != m:
            continue
        members = [join_all([R for i, R in enumerate(regions) if i != j]) for j in range(m)]
        top = join_all(regions)
        bottom = meet_all(members)
        if is_lower_diamond(bottom, top, members):
            return Diamond(bottom, top, members)
    raise RuntimeError("could not generate a lower diamond")


def diamond_residuals(d: Diamond, problem, u_top: CRFunction | None = None) -> dict[str, float]:
    if u_top is None:
        u_top = solve(d.top, problem.kind, problem.f)[0]

    def interp_err(T: Triangulation) -> float:
        Iu = interpolate_nc(T, u_top, u_top.ncomp)
        anc = ancestor_map(T, d.top)
        diff = u_top.gradient().values - Iu.gradient().values[anc]
        return float(np.sum(d.top.area * np.sum(diff**2, axis=(1, 2))))

    lhs = interp_err(d.bottom)
    rhs = sum(interp_err(Tj) for Tj in d.members)
    w_bottom = data_weights(d.bottom, problem.f)
    hf_lhs = float(w_bottom[~np.isin(d.bottom.elem_ids, d.top.elem_ids)].sum())
    hf_rhs = 0.0
    for Tj in d.members:
        wj = data_weights(Tj, problem.f)
        hf_rhs += float(wj[~np.isin(Tj.elem_ids, d.top.elem_ids)].sum())
    scale = max(1.0, lhs, hf_lhs)
    return {
        "interpolation error additivity": abs(lhs - rhs) / scale,
        "data term additivity": abs(hf_lhs - hf_rhs) / scale,
    }


def check_lower_diamond(diamonds: Sequence[Diamond], problem, gamma: float = 0.5) -> tuple[RatioReport, RatioReport]:
    """Gated exact additivity identities and the measured energy ratio."""
    exact = RatioReport("lower-diamond-identities", "interpolation error and data term split over diamond members",
                        bracket=(0.0, EXACT_TOL))
    ratio = RatioReport("lower-diamond-energy", "energy gap of the diamond versus the sum of member gaps")
    for i, d in enumerate(diamonds):
        if not is_lower_diamond(d.bottom, d.top, d.members):
            raise ValueError(f"diamond {i} is not a lower diamond")
        u_top, _ = solve(d.top, problem.kind, problem.f)
        res = diamond_residuals(d, problem, u_top)
        exact.add(max(res.values()), {"case": i, **res})

        def G(T):
            return energy(T, solve(T, problem.kind, problem.f)[0], problem.f, gamma).total

        g_top = G(d.top)
        num = G(d.bottom) - g_top
        den = sum(G(Tj) - g_top for Tj in d.members)
        r = _ratio(num, den)
        if r is not None:
            ratio.samples.append(r)
    return exact, ratio


# -- enumeration and instance-optimality probe -------------------------------------
class EnumerationOverflow(RuntimeError):
    pass


def new_vertex_count(T: Triangulation) -> int:
    return len(T.nodes) - len(T.forest.bottom.nodes)


def brute_force_enumerate(bottom: Triangulation, budget: int, cap: int = 200_000) -> list[Triangulation]:
    """Every conforming refinement of ``bottom`` with at most ``budget`` new vertices.

    Breadth-first over single-side refinements; complete because any proper
    refinement T' of T has a side S of T missing from T', and refine(T, {S})
    is then still coarser than T'.
    """
    base_nodes = len(bottom.nodes)
    seen = {bottom.leaf_set: bottom}
    queue = deque([bottom])
    while queue:
        T = queue.popleft()
        for key in T.side_keys():
            R = refine(T, [key])
            if len(R.nodes) - base_nodes > budget or R.leaf_set in seen:
                continue
            seen[R.leaf_set] = R
            if len(seen) > cap:
                raise EnumerationOverflow(f"more than {cap} triangulations within budget {budget}")
            queue.append(R)
    return sorted(seen.values(), key=lambda t: (len(t.nodes), sorted(t.leaf_set)))


@dataclass
class ProbeReport:
    problem: str
    mu: float
    budget: int
    n_enumerated: int
    iterates: list[dict]
    measured_c: Optional[float]
    tried: list[dict]
    monotone_vs_bottom: bool
    note: str = (
        "Measured only: the constant in the instance-optimality theorem is not explicit, "
        "so this probe reports a value and cannot falsify the theorem at this scale."
    )

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def probe_instance_optimality(problem, mu: float, budget: int, gamma: float = 0.5, max_c: float = 1024.0) -> ProbeReport:
    """Compare AFEM iterates against the best enumerated triangulation of smaller size."""
    forest = problem.forest()
    bottom = forest.bottom
    census = brute_force_enumerate(bottom, budget)
    energies = {}
    for T in census:
        u, _ = solve(T, problem.kind, problem.f)
        energies[T.leaf_set] = energy(T, u, problem.f, gamma).total
    new_elems = np.array([count_new_elements(T) for T in census])
    G = np.array([energies[T.leaf_set] for T in census])

    trace = afem_run(AfemConfig(problem, mu=mu, gamma=gamma, max_iters=50, tol=1e-14, keep_meshes=True), bottom)
    iterates = []
    for T, row in zip(trace.meshes, trace.rows):
        if new_vertex_count(T) > budget:
            break
        iterates.append({"k": row.iter, "n_new": row.n_new, "energy": row.energy})

    tried = []
    measured = None
    c = 1.0
    candidates = [1.0, 2.0, 4.0]
    while True:
        c = candidates.pop(0) if candidates else c * 2.0
        ok, complete = True, True
        for it in iterates:
            limit = it["n_new"] / c
            best = float(G[new_elems <= limit + 1e-12].min())
            # elements outnumber new vertices, so the census covers every candidate when limit <= budget
            complete &= limit <= budget
            if it["energy"] > best + 1e-12:
                ok = False
        tried.append({"c": c, "holds": ok, "census_complete": complete})
        if ok:
            measured = c
            break
        if c >= max_c:
            break
    g0 = energies[bottom.leaf_set]
    monotone = all(it["energy"] <= g0 + 1e-12 for it in iterates if it["k"] >= 1)
    return ProbeReport(problem.name, mu, budget, len(census), iterates, measured, tried, monotone)
