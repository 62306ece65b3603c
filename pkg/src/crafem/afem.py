"""Adaptive loop SOLVE -> ESTIMATE -> MARK -> REFINE with modified maximum marking.

The marking step walks the sides in order of decreasing eta^2(refd(T; S)),
ties broken by the size of refd(T; S) and then by side index.
A side is marked when the indicator mass of its closure that is not already
covered reaches ``mu * eta_bar^2``; its closure then leaves the candidate set.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assembly import solve
from .estimator import IndicatorTable, energy, error_to_exact, eta_bar, indicators
from .mesh import Side, Triangulation, count_new_elements, refine
from .space import DEFAULT_GAMMA

logger = logging.getLogger(__name__)

MARKINGS = ("modified-maximum", "doerfler", "maximum")


@dataclass
class AfemConfig:
    problem: object  # ProblemSpec
    mu: float = 0.5
    gamma: float = DEFAULT_GAMMA
    max_iters: Optional[int] = None
    max_elems: Optional[int] = None
    tol: Optional[float] = 1e-8  # stop once total eta^2 <= tol
    marking: str = "modified-maximum"
    theta: float = 0.5  # bulk parameter for Doerfler marking
    keep_meshes: bool = False

    def __post_init__(self):
        if not 0.0 < self.mu <= 1.0:
            raise ValueError("mu must lie in (0, 1]")
        if self.marking not in MARKINGS:
            raise ValueError(f"unknown marking {self.marking!r}")
        if self.max_iters is None and self.max_elems is None and self.tol is None:
            raise ValueError("at least one stop rule is required")


@dataclass
class Decision:
    side: Side
    value: float  # eta^2(refd(T; S) \ M~) at selection time
    marked: bool


@dataclass
class MarkResult:
    marked: list[Side]
    closure: list[Side]  # M~: union of refd over marked sides
    log: list[Decision]
    eta_bar_sq: float
    threshold: float


def mark(T: Triangulation, table: IndicatorTable, mu: float, refd_values: np.ndarray | None = None) -> MarkResult:
    """Modified maximum marking; see the module docstring."""
    if table.tri != T or len(table.total) != T.n_sides:
        raise ValueError("indicator table incomplete for this triangulation")
    if refd_values is None:
        ebar, refd_values = eta_bar(T, table)
    else:
        ebar = float(refd_values.max(initial=0.0))
    if ebar == 0.0:
        return MarkResult([], [], [], 0.0, 0.0)
    threshold = mu * ebar
    keys = T.side_keys()
    refd_sets = T.refd_index
    total = table.total
    candidate = np.ones(T.n_sides, dtype=bool)
    covered = np.zeros(T.n_sides, dtype=bool)
    # descending refd sum; among equal sums the smaller closure first, then side index
    indptr, _ = T.refd_csr
    order = np.lexsort((np.arange(T.n_sides), np.diff(indptr), -refd_values))
    marked, log = [], []
    for s in order.tolist():
        if not candidate[s]:
            continue
        r = np.asarray(refd_sets[s])
        # precomputed sum minus the covered part keeps the seed side bit-identical to eta_bar
        hit = covered[r]
        value = float(refd_values[s] - total[r[hit]].sum()) if hit.any() else float(refd_values[s])
        ok = value >= threshold
        log.append(Decision(keys[s], value, ok))
        if ok:
            marked.append(s)
            covered[r] = True
        candidate[r] = False
    closure = [keys[i] for i in np.flatnonzero(covered).tolist()]
    return MarkResult([keys[i] for i in marked], closure, log, ebar, threshold)


def replay(T: Triangulation, table: IndicatorTable, mu: float, log: list[Decision]) -> list[Side]:
    """Re-execute a decision log; raises if any recorded step is inconsistent."""
    ebar, refd_values = eta_bar(T, table)
    threshold = mu * ebar
    candidate = set(T.side_keys())
    covered: set[Side] = set()
    out = []
    for d in log:
        if d.side not in candidate:
            raise AssertionError(f"side {d.side} selected after leaving the candidate set")
        idx = T.side_index(*d.side)
        closure = T.side_keys(T.refd_index[idx])
        hit = [T.side_index(*k) for k in closure if k in covered]
        value = float(refd_values[idx] - table.total[hit].sum()) if hit else float(refd_values[idx])
        if abs(value - d.value) > 1e-12 * max(1.0, ebar):
            raise AssertionError(f"recorded value {d.value} != recomputed {value} for side {d.side}")
        if (value >= threshold) != d.marked:
            raise AssertionError(f"outcome mismatch for side {d.side}")
        if d.marked:
            out.append(d.side)
            covered.update(closure)
        candidate.difference_update(closure)
    if candidate and ebar > 0:
        raise AssertionError("log ends before the candidate set is exhausted")
    return out


def mark_doerfler(table: IndicatorTable, theta: float) -> list[Side]:
    """Minimal set of largest indicators carrying a theta-fraction of the total."""
    tot = table.total
    if tot.sum() == 0:
        return []
    order = np.lexsort((np.arange(len(tot)), -tot))
    csum = np.cumsum(tot[order])
    k = int(np.searchsorted(csum, theta * csum[-1] * (1 - 1e-14))) + 1
    return table.tri.side_keys(np.sort(order[:k]))


def mark_maximum(table: IndicatorTable, mu: float) -> list[Side]:
    """Sides with eta^2(S) >= mu * max eta^2."""
    tot = table.total
    if tot.max(initial=0.0) == 0:
        return []
    return table.tri.side_keys(np.flatnonzero(tot >= mu * tot.max()))


@dataclass
class AfemRow:
    iter: int
    n_elems: int
    n_sides: int
    n_marked: int
    n_closure: int
    eta_bar_sq: float
    eta_total_sq: float
    energy: float
    err_ref: Optional[float]
    seconds: float
    n_new: int


@dataclass
class AfemState:
    k: int
    tri: Triangulation
    marks_so_far: int = 0


@dataclass
class AfemTrace:
    rows: list[AfemRow] = field(default_factory=list)
    marks: list[list[Side]] = field(default_factory=list)
    logs: list[list[Decision]] = field(default_factory=list)
    meshes: list[Triangulation] = field(default_factory=list)
    tables: list[IndicatorTable] = field(default_factory=list)
    stop_reason: str = ""

    COLUMNS = ("iter", "n_elems", "n_sides", "n_marked", "eta_bar_sq", "eta_total_sq", "energy", "err_ref", "seconds")

    def bdd_ratios(self) -> list[Optional[float]]:
        """#(T_k \\ T_bottom) / sum_{j<k} #M_j per iteration; None for 0/0."""
        out, acc = [], 0
        for row, m in zip(self.rows, self.marks):
            if acc == 0:
                out.append(None if row.n_new == 0 else float("inf"))
            else:
                out.append(row.n_new / acc)
            acc += len(m)
        return out

    def fill_reference_errors(self, problem, kref: int = 2) -> None:
        """Set ``err_ref`` against the solution on the finest mesh refined ``kref`` more times."""
        from .estimator import error_to_reference
        from .mesh import uniform_refine

        if not self.meshes:
            raise ValueError("reference errors need the meshes (keep_meshes=True)")
        ref_tri = uniform_refine(self.meshes[-1], kref)
        ref = solve(ref_tri, problem.kind, problem.f)[0]
        for T, row in zip(self.meshes, self.rows):
            u = solve(T, problem.kind, problem.f)[0]
            row.err_ref = error_to_reference(u, ref)

    def to_csv(self, timings: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    r.iter,
                    r.n_elems,
                    r.n_sides,
                    r.n_marked,
                    repr(r.eta_bar_sq),
                    repr(r.eta_total_sq),
                    repr(r.energy),
                    "" if r.err_ref is None else repr(r.err_ref),
                    f"{r.seconds:.3f}" if timings else "",
                ]
            )
        return buf.getvalue()


def _select(config: AfemConfig, T: Triangulation, table: IndicatorTable, refd_values, ebar):
    if config.marking == "modified-maximum":
        return mark(T, table, config.mu, refd_values)
    if config.marking == "doerfler":
        m = mark_doerfler(table, config.theta)
    else:
        m = mark_maximum(table, config.mu)
    return MarkResult(m, [], [], ebar, 0.0)


def afem_step(config: AfemConfig, state: AfemState, trace: AfemTrace) -> Optional[AfemState]:
    """One SOLVE-ESTIMATE-MARK-REFINE pass; returns ``None`` when a stop rule fires."""
    problem = config.problem
    T = state.tri
    t0 = time.perf_counter()
    u, _ = solve(T, problem.kind, problem.f)
    table = indicators(T, u, problem.f)
    ebar, refd_values = eta_bar(T, table)
    result = _select(config, T, table, refd_values, ebar)
    if ebar > 0 and config.marking == "modified-maximum" and not result.marked:
        raise AssertionError("positive eta_bar but nothing marked")
    err = error_to_exact(u, problem) if problem.exact_gradient is not None else None
    G = energy(T, u, problem.f, config.gamma).total
    row = AfemRow(
        state.k, T.n_elements, T.n_sides, len(result.marked), len(result.closure), ebar, table.sum(), G, err,
        time.perf_counter() - t0, count_new_elements(T),
    )
    trace.rows.append(row)
    trace.marks.append(result.marked)
    trace.logs.append(result.log)
    if config.keep_meshes:
        trace.meshes.append(T)
        trace.tables.append(table)
    logger.info("iter %d: %d elements, eta^2=%.3e, marked %d", state.k, T.n_elements, row.eta_total_sq, row.n_marked)

    if config.tol is not None and row.eta_total_sq <= config.tol:
        trace.stop_reason = "tolerance"
        return None
    if not result.marked:
        trace.stop_reason = "nothing marked"
        return None
    if config.max_iters is not None and state.k + 1 >= config.max_iters:
        trace.stop_reason = "iteration limit"
        return None
    T_next = refine(T, result.marked)
    row.seconds = time.perf_counter() - t0
    if config.max_elems is not None and T_next.n_elements > config.max_elems:
        trace.stop_reason = "element budget"
        return None
    return AfemState(state.k + 1, T_next, state.marks_so_far + len(result.marked))


def afem_run(config: AfemConfig, initial: Triangulation | None = None) -> AfemTrace:
    if initial is None:
        initial = config.problem.forest().bottom
    trace = AfemTrace()
    state: Optional[AfemState] = AfemState(0, initial)
    while state is not None:
        state = afem_step(config, state, trace)
    return trace
