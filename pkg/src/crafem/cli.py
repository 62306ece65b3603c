"""Command line runner: ``crafem {solve,afem,verify,enumerate,compare-marking}``.

Worker count for fan-out subcommands is read from ``CRAFEM_WORKERS`` (default 1).
Exit status is 0 exactly when every gating check of the subcommand passes.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np

from .afem import MARKINGS, AfemConfig, afem_run, replay
from .assembly import assemble_poisson, assemble_stokes, solve
from .estimator import energy, error_to_exact, error_to_reference
from .mesh import uniform_refine
from .problems import catalog, get_problem
from .space import DEFAULT_GAMMA

logger = logging.getLogger("crafem")

WORKERS_ENV = "CRAFEM_WORKERS"


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def fan_out(fn: Callable, args: Sequence) -> list:
    """Map ``fn`` over ``args`` in worker processes, preserving order."""
    w = min(n_workers(), len(args))
    if w <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=w) as pool:
        return list(pool.map(fn, args))


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- solve ---------------------------------------------------------------------
def cmd_solve(args) -> int:
    problem = get_problem(args.problem)
    T = uniform_refine(problem.forest().bottom, args.refine_uniform)
    u, p = solve(T, problem.kind, problem.f)
    G = energy(T, u, problem.f, args.gamma)
    print(f"problem {problem.name}: {T.n_elements} elements, {T.n_sides} sides, energy {G.total!r}")
    if problem.exact_gradient is not None:
        print(f"energy error squared (exact solution) {error_to_exact(u, problem)!r}")
    elif args.kref > 0:
        ref = solve(uniform_refine(T, args.kref), problem.kind, problem.f)[0]
        print(f"energy error squared (reference, {args.kref} extra refinements) {error_to_reference(u, ref)!r}")
    free = np.flatnonzero(~T.boundary)
    if len(free) <= 8:
        for s in free.tolist():
            a, b = T.side_keys([s])[0]
            vals = ", ".join(repr(float(x)) for x in u.values[s])
            print(f"u(midpoint of side {a}-{b}) = {vals}")
        if p is not None:
            for e, val in zip(T.elem_ids.tolist(), p.values[:, 0].tolist()):
                print(f"p(element {e}) = {val!r}")
    if args.dump_system:
        sysm = assemble_poisson(T, problem.f) if problem.kind == "poisson" else assemble_stokes(T, problem.f)
        sysm.dump_matrix_market(args.dump_system)
    if args.out:
        if args.format == "json":
            payload = {"sides": T.side_keys(), "velocity": u.values.tolist()}
            if p is not None:
                payload["elements"] = T.elem_ids.tolist()
                payload["pressure"] = p.values[:, 0].tolist()
            _emit(json.dumps(payload), args.out)
        else:
            u.to_csv(args.out)
            if p is not None:
                stem, ext = os.path.splitext(args.out)
                p.to_csv(f"{stem}_pressure{ext or '.csv'}")
    return 0


# -- afem ------------------------------------------------------------------------
def _afem_config(args, problem, marking: str = "modified-maximum") -> AfemConfig:
    return AfemConfig(
        problem,
        mu=args.mu,
        gamma=args.gamma,
        max_iters=args.max_iters,
        max_elems=args.max_elems,
        tol=args.tol,
        marking=marking,
        theta=getattr(args, "theta", 0.5),
        keep_meshes=getattr(args, "check_replay", False),
    )


def afem_checks(trace, mu: float) -> dict[str, bool]:
    rows = trace.rows
    checks = {
        "energy non-increasing": all(b.energy <= a.energy + 1e-10 for a, b in zip(rows, rows[1:])),
        "marking non-empty while eta_bar > 0": all(r.n_marked >= 1 or r.eta_bar_sq == 0 for r in rows[:-1]),
        "element growth bounded by marks": all(x is None or x <= 20 for x in trace.bdd_ratios()),
    }
    if trace.meshes:
        ok = True
        for T, tab, log, m in zip(trace.meshes, trace.tables, trace.logs, trace.marks):
            if log and replay(T, tab, mu, log) != m:
                ok = False
        checks["decision logs replay"] = ok
    return checks


def cmd_afem(args) -> int:
    problem = get_problem(args.problem)
    cfg = _afem_config(args, problem)
    cfg.keep_meshes = cfg.keep_meshes or args.reference
    trace = afem_run(cfg)
    if args.reference and problem.exact_gradient is None:
        trace.fill_reference_errors(problem, args.kref)
    _emit(trace.to_csv(timings=args.timings), args.out)
    checks = afem_checks(trace, args.mu)
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}", file=sys.stderr)
    print(f"stopped after {len(trace.rows)} iterations ({trace.stop_reason})", file=sys.stderr)
    return 0 if all(checks.values()) else 1


# -- verify ----------------------------------------------------------------------
SUITES = ("exact", "stability", "bracket", "equivalence", "diamond", "optimality")


def run_suite(job: tuple[str, int, float]) -> list[dict]:
    """Run one verification suite; returns JSON-ready reports with a ``gating`` flag."""
    from . import verify as V
    from .space import LAMBDA

    suite, seed, gamma = job
    sq = get_problem("square-poisson-f1")
    ls = get_problem("lshape-poisson-f1")
    st = get_problem("square-stokes-f10")
    out = []

    def add(rep, gating):
        d = rep.to_dict()
        d["gating"] = gating
        out.append(d)

    if suite == "exact":
        corpus = V.identity_corpus([sq.forest(), ls.forest()], 100, seed)
        add(V.check_exact_identities(corpus), True)
        rng = np.random.default_rng(seed)
        base = uniform_refine(ls.forest().bottom, 2)
        diamonds = [V.diamond_generator(base, m, rng) for m in (1, 2, 3)]
        exact, _ = V.check_lower_diamond(diamonds, ls, gamma)
        add(exact, True)
    elif suite == "stability":
        samples = V.stability_samples(sq.forest(), 100, seed)
        r1 = V.RatioReport("stability-l2", "scaled L2 interpolation error over gradient error", bracket=(0.0, LAMBDA))
        r2 = V.RatioReport("stability-gradient", "gradient interpolation error over gradient norm", bracket=(0.0, 1.0))
        for l2, h1, full in samples:
            if not l2 <= LAMBDA * h1 + 1e-12:
                r1.witnesses.append({"l2": l2, "grad": h1})
            if not h1 <= full + 1e-12:
                r2.witnesses.append({"grad_err": h1, "grad": full})
            if h1 > V.DEGENERATE:
                r1.samples.append(l2 / h1)
            if full > V.DEGENERATE:
                r2.samples.append(h1 / full)
        add(r1, True)
        add(r2, True)
    elif suite in ("bracket", "equivalence"):
        for problem, n in ((ls, 50), (st, 20)):
            pairs = V.solve_pairs(problem, V.nested_pairs(problem.forest(), n, seed))
            if suite == "bracket":
                for rep in V.check_energy_bracket(pairs, gamma):
                    rep.name = f"{rep.name}[{problem.name}]"
                    add(rep, True)
            else:
                for rep in V.check_estimator_equivalence(pairs, gamma):
                    rep.name = f"{rep.name}[{problem.name}]"
                    add(rep, False)
                if problem.kind == "stokes":
                    add(V.check_pressure_bound(pairs), False)
    elif suite == "diamond":
        rng = np.random.default_rng(seed)
        base = uniform_refine(ls.forest().bottom, 2)
        diamonds = [V.diamond_generator(base, m, rng) for m in (1, 2, 2, 3, 3)]
        exact, ratio = V.check_lower_diamond(diamonds, ls, gamma)
        add(exact, True)
        add(ratio, False)
    elif suite == "optimality":
        probe = V.probe_instance_optimality(sq, 1.0, 6, gamma)
        d = probe.to_dict()
        d.update(name="instance-optimality-probe", gating=True,
                 verdict="pass" if probe.measured_c is not None and probe.monotone_vs_bottom else "fail")
        out.append(d)
    else:
        raise ValueError(f"unknown suite {suite!r}")
    return out


def _verdict_ok(d: dict) -> bool:
    return not d.get("gating") or d.get("verdict") in ("pass", "pass (vacuous)", "measured")


def cmd_verify(args) -> int:
    suites = SUITES if args.suite == "all" else (args.suite,)
    results = fan_out(run_suite, [(s, args.seed, args.gamma) for s in suites])
    reports = [r for group in results for r in group]
    _emit(json.dumps(reports, indent=2) + "\n", args.out)
    ok = all(_verdict_ok(d) for d in reports)
    for d in reports:
        print(f"{'PASS' if _verdict_ok(d) else 'FAIL'} {d['name']}: {d['verdict']}", file=sys.stderr)
    return 0 if ok else 1


# -- enumerate -------------------------------------------------------------------
def cmd_enumerate(args) -> int:
    from .verify import brute_force_enumerate, new_vertex_count

    problem = get_problem(args.problem)
    bottom = problem.forest().bottom
    census = brute_force_enumerate(bottom, args.budget)
    counts: dict[int, int] = {}
    for T in census:
        k = new_vertex_count(T)
        counts[k] = counts.get(k, 0) + 1
    if args.format == "json":
        text = json.dumps({"problem": problem.name, "budget": args.budget, "total": len(census),
                           "by_new_vertices": {str(k): v for k, v in sorted(counts.items())}}) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["new_vertices", "count"])
        for k, v in sorted(counts.items()):
            w.writerow([k, v])
        text = buf.getvalue()
    _emit(text, args.out)
    return 0


# -- compare-marking ---------------------------------------------------------------
def _run_marking(job) -> list[list]:
    name, marking, mu, theta, gamma, max_iters, max_elems, tol = job
    problem = get_problem(name)
    cfg = AfemConfig(problem, mu=mu, gamma=gamma, max_iters=max_iters, max_elems=max_elems, tol=tol,
                     marking=marking, theta=theta)
    trace = afem_run(cfg)
    return [[marking, r.iter, r.n_elems, r.n_marked, repr(r.eta_total_sq), repr(r.energy)] for r in trace.rows]


def cmd_compare(args) -> int:
    jobs = [(args.problem, m, args.mu, args.theta, args.gamma, args.max_iters, args.max_elems, args.tol) for m in MARKINGS]
    results = fan_out(_run_marking, jobs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["marking", "iter", "n_elems", "n_marked", "eta_total_sq", "energy"])
    for rows in results:
        w.writerows(rows)
    _emit(buf.getvalue(), args.out)
    return 0


# -- parser ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crafem", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, problem_default="lshape-poisson-f1"):
        p.add_argument("--problem", default=problem_default, help="catalog entry: " + ", ".join(x.name for x in catalog()))
        p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--kref", type=int, default=2, help="extra uniform refinements for reference solutions")

    def loop(p):
        p.add_argument("--mu", type=float, default=0.5)
        p.add_argument("--max-elems", type=int, default=None)
        p.add_argument("--max-iters", type=int, default=None)
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--timings", action="store_true", help="fill the seconds column (output no longer reproducible)")

    p = sub.add_parser("solve", help="solve on a uniformly refined initial mesh")
    common(p, "square-poisson-f1")
    p.add_argument("--refine-uniform", type=int, default=0)
    p.add_argument("--dump-system", default=None, metavar="STEM", help="write Matrix Market files STEM_matrix.mtx/STEM_rhs.mtx")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("afem", help="adaptive run, trace as CSV")
    common(p)
    loop(p)
    p.add_argument("--check-replay", action="store_true", help="keep meshes and replay every decision log")
    p.add_argument("--reference", action="store_true",
                   help="fill err_ref against the finest mesh refined --kref more times (problems without exact solution)")
    p.set_defaults(func=cmd_afem)

    p = sub.add_parser("verify", help="verification suites, JSON reports")
    common(p)
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("enumerate", help="census of refinements within a new-vertex budget")
    common(p, "square-poisson-f1")
    p.add_argument("--budget", type=int, default=4)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("compare-marking", help="modified maximum vs Doerfler vs plain maximum")
    common(p)
    loop(p)
    p.add_argument("--theta", type=float, default=0.5)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if getattr(args, "max_elems", None) is None and getattr(args, "max_iters", None) is None and args.command in ("afem", "compare-marking"):
            args.max_elems = 100_000
        return args.func(args)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 2
    except Exception as exc:  # downstream failures map to a nonzero exit code
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
