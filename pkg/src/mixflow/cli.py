"""Scenario runner: validate, solve, reconstruct, check and write artifacts.

Exit codes: 0 success, 2 config error, 3 validation failure,
4 non-convergence, 5 invariant failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import FlowInvariantError, identity_flow
from .model import RateFunction, ScenarioError, validate_scenario
from .picard import (EnvelopeViolation, NonConvergenceError, apply_G, check_derivative_bounds,
                     contraction_gap, monotone_flow, solve_fixed_point)
from .process import (TruncationError, build_kernel, check_survival_bound, choose_k_max,
                      count_totals, prob_no_arrival)
from .sampler import MajorantError, estimate_from_table, simulate, write_estimates_csv
from .scenarios import ConfigError, Scenario, load_config
from .solution import (PhiTable, all_slices, check_finite_evaporation, check_lipschitz,
                       closed_form_oracle, residual_evolution, residual_uniqueness_form,
                       residual_velocity, write_slice_csv)

__all__ = ["SolveReport", "Check", "run", "run_mc_check", "solve_and_check", "main",
           "EXIT_OK", "EXIT_CONFIG", "EXIT_VALIDATION", "EXIT_NONCONVERGENCE", "EXIT_INVARIANT"]

log = logging.getLogger("mixflow")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_NONCONVERGENCE = 4
EXIT_INVARIANT = 5

MEASURE_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class Check:
    name: str
    value: float
    tol: float | None
    status: str            # "pass", "fail" or "skipped"
    hard: bool = True

    @classmethod
    def upper(cls, name, value, tol, hard=True):
        return cls(name, float(value), tol, "pass" if value <= tol else "fail", hard)


@dataclass
class SolveReport:
    scenario: str
    digest: str
    grid: tuple
    iterations: int = 0
    diagnostics: object = None
    checks: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    refinement: list = field(default_factory=list)

    def add(self, check: Check) -> None:
        if any(c.name == check.name for c in self.checks):
            raise ValueError(f"check {check.name} recorded twice")
        self.checks.append(check)

    @property
    def ok(self) -> bool:
        return all(c.status != "fail" for c in self.checks if c.hard)

    def check(self, name: str) -> Check:
        return next(c for c in self.checks if c.name == name)

    def to_text(self) -> str:
        n_t, n_z = self.grid
        out = [f"scenario  {self.scenario}", f"digest    {self.digest}",
               f"grid      n_t={n_t} n_z={n_z} n_b={n_t}",
               f"status    {'OK' if self.ok else 'INVARIANT FAILURE'}", ""]
        if self.diagnostics is not None:
            d = self.diagnostics
            out += [f"Picard iterations: {d.iterations}  (C = {d.C:.6g}, K_max = {d.k_max})",
                    d.table(), ""]
        out.append(f"{'check':<32} {'value':>12} {'tol':>10}  status")
        for c in self.checks:
            tol = "-" if c.tol is None else f"{c.tol:.1e}"
            flag = "" if c.hard else " (info)"
            out.append(f"{c.name:<32} {c.value:>12.4e} {tol:>10}  {c.status}{flag}")
        if self.refinement:
            out += ["", "refinement (n_t, quantity, value, observed order)"]
            for row in self.refinement:
                out.append("  " + "  ".join(str(x) for x in row))
        if self.seeds:
            out += ["", "seeds: " + ", ".join(f"{k}={v}" for k, v in self.seeds.items())]
        out += ["", "timing (s): " + ", ".join(f"{k}={v:.2f}" for k, v in self.timing.items())]
        return "\n".join(out) + "\n"


def _sum_rule(flow, sc: Scenario) -> float:
    err = 0.0
    for w in sc.mixture.rates:
        kern = build_kernel(flow, w)
        k_max = sc.k_max or choose_k_max(kern.rate_bound, sc.grid.horizon)
        tot = count_totals(kern, k_max)
        err = max(err, float(np.abs(tot.sum(axis=1) - 1.0).max()))
    return err


def _survival(flow, sc: Scenario) -> float:
    return max(check_survival_bound(build_kernel(flow, w, z_nodes=[0.0]), w)
               for w in sc.mixture.rates)


def solve_and_check(sc: Scenario, threads: int = 1):
    """Solve one scenario and run every check.  Returns ``(report, result, phi, slices)``.

    Raises the solver's exceptions unchanged.
    """
    rep = SolveReport(sc.name, sc.digest(), (sc.grid.n_t, sc.grid.n_z))
    rep.seeds["mc"] = sc.mc_seed
    t0 = time.perf_counter()
    validate_scenario(sc.mixture, sc.density, n_check=max(129, sc.grid.n_t))
    res = solve_fixed_point(sc.mixture, sc.density, sc.grid, tol=sc.tol, max_iter=sc.max_iter,
                            threads=threads)
    res.diagnostics.k_max = choose_k_max(
        max(w.sup_norm(sc.grid.horizon) for w in sc.mixture.rates) + sc.mixture.C_W,
        sc.grid.horizon)
    rep.diagnostics = res.diagnostics
    rep.iterations = res.diagnostics.iterations
    rep.timing["solve"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    y = res.flow
    phi = PhiTable(sc.grid, res.phi, sc.mixture.weights)
    slices = all_slices(y, phi)
    mix = sc.mixture
    T = sc.grid.horizon

    # picard checks
    inv = y.check_invariants()
    rep.add(Check.upper("flow_invariants", max(inv.values()), 1e-9))
    rep.add(Check.upper("contraction_envelope", max(0.0, res.diagnostics.envelope_gap()), 1e-6))
    fp = float(np.max(np.abs(apply_G(y, mix, sc.density, check=False).values - y.values)))
    rep.add(Check.upper("fixed_point_residual", fp, 2 * sc.tol))
    a = monotone_flow(sc.grid, rate=1.0, bump=0.3, wobble=0.5)
    b = monotone_flow(sc.grid, rate=1.5, bump=-0.2, wobble=-0.4)
    rep.add(Check.upper("contraction_inequality", max(0.0, contraction_gap(a, b, mix, sc.density).max()),
                        1e-6))
    G0 = apply_G(identity_flow(sc.grid), mix, sc.density)
    for name, r in check_derivative_bounds(G0, mix).items():
        excess = max(r["lower"] - r["min"], r["max"] - r["upper"], 0.0)
        rep.add(Check.upper(f"derivative_{name}", excess, 1e-3))

    # process checks
    rep.add(Check.upper("sum_rule", _sum_rule(y, sc), 1e-8))
    rep.add(Check.upper("survival_bound", max(0.0, _survival(y, sc)), 1e-12))

    # solution checks
    pinv = phi.check_invariants(y, sc.density)
    rep.add(Check.upper("phi_invariants", max(v for k, v in pinv.items() if k != "sum_matches_flow"),
                        1e-9))
    rep.add(Check.upper("coordinate_consistency", pinv["sum_matches_flow"], 1e-10))
    r = np.asarray(mix.weights)
    rep.add(Check.upper("solidity", max(float(np.abs(s.V.sum(0) - (1 - s.y)).max()) for s in slices),
                        1e-6))
    rep.add(Check.upper("conservation", max(float(np.abs(s.V[:, 0] - r).max()) for s in slices), 1e-6))
    rep.add(Check.upper("velocity_residual", residual_velocity(y, slices, mix), 1e-3))
    rep.add(Check.upper("evolution_residual", residual_evolution(y, phi, slices, mix).max(), 1e-3))
    rep.add(Check.upper("uniqueness_form_residual",
                        residual_uniqueness_form(y, slices, mix).max(), 2e-3))
    lip = check_lipschitz(slices, mix, seed=sc.mc_seed)
    rep.add(Check.upper("lipschitz_bound", max(0.0, lip["max_excess"]), 1e-6))
    fe = check_finite_evaporation(y, mix)
    rep.add(Check.upper("finite_evaporation", max(0.0, -fe["min_rate"], fe["max_excess"]), 1e-4))
    if mix.spatially_constant and all(s.kind == "uniform" for s in sc.density.sigmas):
        X, Tm = np.meshgrid(sc.grid.xi, sc.grid.t, indexing="ij")
        err = np.abs(y.values - closed_form_oracle(mix, sc.density, X, Tm))[sc.grid.admissible()]
        rep.add(Check.upper("closed_form_oracle", float(err.max()), 5e-4))
    else:
        rep.add(Check("closed_form_oracle", math.nan, 5e-4, "skipped"))
    rep.timing["checks"] = time.perf_counter() - t1
    return rep, res, phi, slices


def _write_outputs(out: Path, rep: SolveReport, res, slices) -> None:
    res.flow.to_csv(out / "ycurves.csv", header=("xi", "t", "y_C"))
    n_t = len(slices)
    for f in MEASURE_FRACTIONS:
        j = int(round(f * (n_t - 1)))
        write_slice_csv(slices[j], out / f"measure_t{slices[j].t:.4f}.csv")
    res.diagnostics.to_csv(out / "diagnostics.csv")


def _refine(sc: Scenario, levels: int, threads: int) -> list:
    """Residuals on successive grid doublings with observed orders."""
    quantities = ("velocity_residual", "evolution_residual", "uniqueness_form_residual",
                  "closed_form_oracle")
    rows, prev = [], None
    grid = sc.grid
    for _ in range(levels):
        grid = grid.refined(2)
        rep, *_ = solve_and_check(sc.with_grid(grid), threads)
        vals = {q: rep.check(q).value for q in quantities}
        for q in quantities:
            v = vals[q]
            order = ""
            if prev is not None and min(prev[q], v) > 1e-12 and np.isfinite(v):
                order = f"{math.log2(prev[q] / v):.3f}"
            rows.append((grid.n_t, q, f"{v:.4e}", order))
        prev = vals
    return rows


def _mc_queries(grid):
    T = grid.horizon
    zs = (0.0, 0.125, 0.375, 0.5, 0.75, 1.0)
    st = ((0.0, 0.25), (0.0, 1.0), (0.25, 0.5), (0.25, 1.0), (0.5, 0.75), (0.5, 1.0),
          (0.75, 1.0), (1.0, 1.0))
    zi = [int(round(z * (grid.n_z - 1))) for z in zs]
    sti = [(int(round(s * (grid.n_t - 1))), int(round(t * (grid.n_t - 1)))) for s, t in st]
    return zi, sti


def mc_compare(sc: Scenario, flow, corrupt: bool = False, n_traj: int | None = None):
    """MC estimates against the analytic path for every component.

    Returns ``(rows, fraction_within, n_queries)`` where ``rows`` feed
    :func:`~mixflow.sampler.write_estimates_csv`.
    """
    g = sc.grid
    n = sc.mc_trajectories if n_traj is None else n_traj
    zi, sti = _mc_queries(g)
    rows, hits, total = [], 0, 0
    for a, w in enumerate(sc.mixture.rates):
        w_an = w
        if corrupt:
            # negative control: the analytic side uses a rate scaled by 1.5
            w_an = _scaled(w, 1.5)
        kern = build_kernel(flow, w_an)
        k_max = choose_k_max(kern.rate_bound, g.horizon)
        for q, i in enumerate(zi):
            table = simulate(flow, w, float(g.z[i]), n, sc.mc_seed, batch=a * len(zi) + q)
            for m, j in sti:
                s, t = float(g.t[m]), float(g.t[j])
                est = estimate_from_table(table, s, t, k_max=4)
                an = prob_no_arrival(kern, i, m, j, k_max)
                total += 1
                hits += abs(est.total - an.total_volterra) <= 3 * est.total_se + 1e-12
                rows.append((g.z[i], s, t, "all", est.total, est.total_se, n))
                for k in range(5):
                    rows.append((g.z[i], s, t, k, est.per_k[k], est.per_k_se[k], n))
    return rows, hits / max(total, 1), total


def _scaled(w, factor):
    if w.kind == "constant":
        return RateFunction.constant(factor * w.coeffs[0])
    if w.kind == "tabulated":
        return RateFunction.tabulated(factor * w.values, factor * w.dwdy, w.horizon)
    return RateFunction(w.kind, tuple(factor * c for c in w.coeffs), w.time)


def run(config, out, threads: int = 1, mc: bool = False, refine: int = 0,
        corrupt_kernel: bool = False) -> int:
    """Full pipeline; returns the exit status."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        sc = load_config(config)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        validate_scenario(sc.mixture, sc.density, n_check=max(129, sc.grid.n_t))
    except ScenarioError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    try:
        rep, res, phi, slices = solve_and_check(sc, threads)
    except NonConvergenceError as exc:
        log.error("%s; d_k = %s", exc, ", ".join(f"{d:.3e}" for d in exc.distances))
        return EXIT_NONCONVERGENCE
    except (EnvelopeViolation, FlowInvariantError, TruncationError) as exc:
        log.error("invariant failure: %s", exc)
        return EXIT_INVARIANT
    _write_outputs(out, rep, res, slices)

    if mc or corrupt_kernel:
        t0 = time.perf_counter()
        try:
            rows, frac, nq = mc_compare(sc, res.flow, corrupt=corrupt_kernel)
        except MajorantError as exc:
            log.error("invariant failure: %s", exc)
            return EXIT_INVARIANT
        write_estimates_csv(rows, out / "mc_check.csv")
        rep.add(Check.upper("mc_agreement", 1.0 - frac, 0.01))
        rep.timing["mc"] = time.perf_counter() - t0
    if refine:
        t0 = time.perf_counter()
        rep.refinement = _refine(sc, refine, threads)
        rep.timing["refine"] = time.perf_counter() - t0
    (out / "report.txt").write_text(rep.to_text())
    for c in rep.checks:
        if c.status == "fail" and c.hard:
            log.error("check %s failed: %.3e > %.1e", c.name, c.value, c.tol)
    return EXIT_OK if rep.ok else EXIT_INVARIANT


def run_mc_check(config, out, corrupt_kernel: bool = False) -> int:
    """Solve, then compare MC estimates with the analytic probabilities."""
    return run(config, out, mc=True, corrupt_kernel=corrupt_kernel)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="mixflow", description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True, help="scenario YAML file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker cap for component kernels")
    p.add_argument("--mc", action="store_true", help="run the Monte Carlo check")
    p.add_argument("--refine", type=int, default=0, metavar="K",
                   help="also solve at K successive grid doublings and report orders")
    p.add_argument("--corrupt-kernel", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return run(args.config, args.out, threads=max(1, args.threads), mc=args.mc,
               refine=args.refine, corrupt_kernel=args.corrupt_kernel)


if __name__ == "__main__":
    sys.exit(main())
