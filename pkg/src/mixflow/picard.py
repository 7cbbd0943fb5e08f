"""The map ``G`` on flows and its Picard iteration.

``G(theta)(gamma, t) = 1 - sum_a r_a int_{y0}^1 P_a,z(no arrival in (t0, t]) sigma_a(z) dz``.

The ``z`` integral pairs the nodal probabilities (linear between nodes) with
exact hat-function moments of ``sigma``, so the weights sum to ``int sigma``
without quadrature error.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import Flow, FlowInvariantError, GridSpec, flow_distance, identity_flow
from .model import Density, InitialDensity, RateFunction, RateMixture
from .process import build_kernel

__all__ = [
    "NonConvergenceError",
    "EnvelopeViolation",
    "IterationDiagnostics",
    "FixedPointResult",
    "component_phi",
    "apply_G",
    "solve_fixed_point",
    "envelope",
    "check_derivative_bounds",
    "contraction_gap",
    "monotone_flow",
    "low_k_G",
    "G_SLACK",
]

G_SLACK = 1e-9


class NonConvergenceError(RuntimeError):
    """Picard iteration hit ``max_iter``; ``distances`` holds the ``d_k``."""

    def __init__(self, msg, distances):
        super().__init__(msg)
        self.distances = list(distances)


class EnvelopeViolation(RuntimeError):
    """An increment exceeded the contraction envelope."""


def envelope(C: float, T: float, k: int) -> float:
    """``(C T)^k / k!``, computed in log space."""
    x = C * T
    if k == 0:
        return 1.0
    if x == 0.0:
        return 0.0
    return math.exp(k * math.log(x) - math.lgamma(k + 1))


def _z_weights(density: Density, z: np.ndarray):
    left, right = density.hat_weights(z)
    nodes = np.zeros(z.size)
    nodes[:-1] += left
    nodes[1:] += right
    return left, right, nodes


def component_phi(theta: Flow, w: RateFunction, weight: float, density: Density,
                  kernel=None) -> np.ndarray:
    """``phi_a(xi, t)`` on the grid for one component (zero where inadmissible)."""
    g = theta.grid
    kern = build_kernel(theta, w) if kernel is None else kernel
    left, right, nodes = _z_weights(density, g.z)
    S0 = kern.S0
    phi = np.zeros((g.n_xi, g.n_t))
    # initial segment: sum over cells c >= i of the hat moments
    cell = left[:, None] * S0[:-1] + right[:, None] * S0[1:]
    tail = np.zeros((g.n_z, g.n_t))
    tail[:-1] = np.cumsum(cell[::-1], axis=0)[::-1]
    phi[g.origin:] = tail
    # boundary segment: xi index origin - m  <->  t0 = t_m
    P = kern.weighted_no_arrival(nodes)      # (m, j)
    phi[: g.origin] = P[:0:-1]
    phi *= weight
    return np.where(g.admissible(), phi, 0.0)


def _all_phi(theta: Flow, mixture: RateMixture, density: InitialDensity, threads: int = 1):
    jobs = list(zip(mixture.rates, mixture.weights, density.sigmas))

    def one(job):
        w, r, s = job
        return component_phi(theta, w, r, s)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(one, jobs))
    else:
        out = [one(j) for j in jobs]
    return np.stack(out)


def apply_G(theta: Flow, mixture: RateMixture, density: InitialDensity, *,
            check: bool = True, slack: float = G_SLACK, threads: int = 1,
            return_phi: bool = False):
    """One application of ``G``.

    The output is never clamped; with ``check`` an invariant breach beyond
    ``slack`` raises :class:`FlowInvariantError`.
    """
    phi = _all_phi(theta, mixture, density, threads)
    out = Flow(theta.grid, 1.0 - phi.sum(axis=0))
    if check:
        out.assert_valid(slack)
    return (out, phi) if return_phi else out


@dataclass
class IterationDiagnostics:
    """Per-iteration distances next to the contraction envelope."""

    C: float
    horizon: float
    distances: list = field(default_factory=list)
    envelopes: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    k_max: int = 0

    def record(self, d: float, secs: float) -> None:
        k = len(self.distances)
        self.distances.append(float(d))
        self.envelopes.append(envelope(self.C, self.horizon, k))
        self.seconds.append(float(secs))

    @property
    def iterations(self) -> int:
        return len(self.distances)

    def envelope_gap(self) -> float:
        """``max_k (d_k - e_k)``; nonpositive when the envelope holds."""
        if not self.distances:
            return -math.inf
        return float(np.max(np.subtract(self.distances, self.envelopes)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "d_k", "envelope_k", "seconds"])
            for k, (d, e, s) in enumerate(zip(self.distances, self.envelopes, self.seconds)):
                wr.writerow([k, f"{d:.17g}", f"{e:.17g}", f"{s:.6f}"])

    def table(self) -> str:
        lines = [f"{'k':>4} {'d_k':>12} {'(CT)^k/k!':>12}"]
        for k, (d, e) in enumerate(zip(self.distances, self.envelopes)):
            lines.append(f"{k:>4} {d:>12.4e} {e:>12.4e}")
        return "\n".join(lines)


@dataclass
class FixedPointResult:
    flow: Flow
    phi: np.ndarray          # (n_components, n_xi, n_t), from the last G evaluation
    diagnostics: IterationDiagnostics
    previous: Flow

    @property
    def residual(self) -> float:
        return float(flow_distance(self.flow, self.previous).max())


def solve_fixed_point(mixture: RateMixture, density: InitialDensity, grid: GridSpec, *,
                      tol: float = 1e-8, max_iter: int = 60, envelope_slack: float = 1e-6,
                      threads: int = 1, theta0: Flow | None = None) -> FixedPointResult:
    """Picard iteration ``theta_{k+1} = G(theta_k)`` from the identity flow.

    Stops when ``sup_t d(theta_{k+1}, theta_k, t) <= tol``.  Every increment is
    compared with ``(C T)^k / k!``; exceeding it by more than
    ``envelope_slack`` raises :class:`EnvelopeViolation`.
    """
    C = mixture.contraction_constant()
    diag = IterationDiagnostics(C, grid.horizon)
    theta = identity_flow(grid) if theta0 is None else theta0
    for k in range(max_iter):
        t0 = time.perf_counter()
        nxt, phi = apply_G(theta, mixture, density, threads=threads, return_phi=True)
        d = float(flow_distance(nxt, theta).max())
        diag.record(d, time.perf_counter() - t0)
        if d > diag.envelopes[-1] + envelope_slack:
            raise EnvelopeViolation(
                f"d_{k}={d:.3e} exceeds envelope {diag.envelopes[-1]:.3e}")
        prev, theta = theta, nxt
        if d <= tol:
            return FixedPointResult(theta, phi, diag, prev)
    raise NonConvergenceError(
        f"no convergence in {max_iter} iterations; last d={diag.distances[-1]:.3e}",
        diag.distances)


# --------------------------------------------------------------------------
# diagnostics

def check_derivative_bounds(G_theta: Flow, mixture: RateMixture, slack: float = 1e-3) -> dict:
    """Finite-difference derivative bounds of an image ``G(theta)``.

    Returns measured extrema, the bounds and a ``passed`` flag per check.
    """
    g = G_theta.grid
    v = G_theta.values
    mask = g.admissible()
    o = g.origin
    T = g.horizon
    Mw, Cosc = mixture.M_W, mixture.C_osc
    bound_t = Mw + Cosc
    bound_b = (Mw + Cosc) * math.exp(2 * Cosc * T)

    ini = v[o:]
    d_y0 = np.diff(ini, axis=0) / g.dz
    d_t_ini = np.diff(ini, axis=1) / g.dt

    bnd = v[: o + 1]                     # rows xi = -t_{n-1} .. 0
    mb = mask[: o + 1]
    # d/dt0 with t0 = -xi: difference along xi with a sign flip
    pair = mb[1:] & mb[:-1]
    d_t0 = np.where(pair, -(bnd[1:] - bnd[:-1]) / g.dt, 0.0)
    pt = mb[:, 1:] & mb[:, :-1]
    d_t_b = np.where(pt, (bnd[:, 1:] - bnd[:, :-1]) / g.dt, 0.0)

    rep = {
        "dG_dy0": (float(d_y0.min()), float(d_y0.max()), 0.0, 1.0),
        "dG_dt_initial": (float(d_t_ini.min()), float(d_t_ini.max()), 0.0, bound_t),
        "dG_dt0_boundary": (0.0, float(np.abs(d_t0).max()), 0.0, bound_b),
        "dG_dt_boundary": (0.0, float(np.abs(d_t_b).max()), 0.0, bound_b),
    }
    out = {}
    for name, (lo, hi, blo, bhi) in rep.items():
        out[name] = {"min": lo, "max": hi, "lower": blo, "upper": bhi,
                     "passed": bool(lo >= blo - slack and hi <= bhi + slack)}
    return out


def contraction_gap(theta_a: Flow, theta_b: Flow, mixture: RateMixture,
                    density: InitialDensity) -> np.ndarray:
    """``d(G a, G b, t) - C int_0^t d(a, b, s) ds`` for every time node."""
    g = theta_a.grid
    C = mixture.contraction_constant()
    lhs = flow_distance(apply_G(theta_a, mixture, density, check=False),
                        apply_G(theta_b, mixture, density, check=False))
    d = flow_distance(theta_a, theta_b)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * g.dt * (d[1:] + d[:-1]))])
    return lhs - C * integral


def monotone_flow(grid: GridSpec, rate: float = 1.0, bump: float = 0.0,
                  wobble: float = 0.0) -> Flow:
    """A member of the flow class built from a closed-form template.

    With ``Lambda(t) = rate t + wobble (1 - cos(2 pi t / T)) / (2 pi / T)``
    (nondecreasing for ``|wobble| <= rate``) the template is
    ``1 - (1 - y0) e^{-Lambda(t)}`` on initial points and
    ``1 - e^{-(Lambda(t) - Lambda(t0))}`` on boundary points; it is then
    composed with the increasing map ``y -> y + bump y (1 - y)``
    (``|bump| <= 1``).
    """
    if abs(wobble) > rate or abs(bump) > 1:
        raise ValueError("parameters leave the flow class")
    T = grid.horizon
    k = 2 * math.pi / T

    def lam(t):
        return rate * t + wobble * (1 - np.cos(k * t)) / k

    def fn(xi, t):
        y0 = np.maximum(xi, 0.0)
        t0 = np.maximum(-xi, 0.0)
        base = np.where(xi >= 0, 1 - (1 - y0) * np.exp(-lam(t)),
                        1 - np.exp(-(lam(t) - lam(t0))))
        return base + bump * base * (1 - base)

    return Flow.from_function(grid, fn)


def low_k_G(theta: Flow, mixture: RateMixture, density: InitialDensity,
            k_max: int = 3) -> np.ndarray:
    """Boundary-segment ``G(theta)`` from the explicit nested-integral series.

    The series over arrival counts is cut at ``k_max``.  Intensities are taken
    at grid nodes, ``Omega`` is the cumulative trapezoid rule and each nested
    integral is an iterated trapezoid rule, so this path shares nothing with
    the cohort scheme except the flow values.  Returns an ``(m, j)`` array for
    ``t0 = t_m``, ``t = t_j`` (zero for ``m > j``).
    """
    g = theta.grid
    n, h = g.n_t, g.dt
    t = g.t
    rows = theta.values[g.origin::-1, :]
    upper = np.triu(np.ones((n, n), dtype=bool))
    total = np.zeros((n, n))
    for w, r, sigma in zip(mixture.rates, mixture.weights, density.sigmas):
        _, _, wz = _z_weights(sigma, g.z)
        om0 = w(theta.values[g.origin:], t[None, :])                    # (z, u)
        Om0 = np.zeros_like(om0)
        Om0[:, 1:] = np.cumsum(0.5 * h * (om0[:, 1:] + om0[:, :-1]), axis=1)
        om = np.where(upper, w(rows, t[None, :]), 0.0)                  # (v, u)
        steps = np.where(upper[:, 1:] & upper[:, :-1], 0.5 * h * (om[:, 1:] + om[:, :-1]), 0.0)
        Om = np.zeros((n, n))
        Om[:, 1:] = np.cumsum(steps, axis=1)
        S = np.where(upper, np.exp(-Om), 0.0)
        Kvu = om * S
        f = om0 * np.exp(-Om0)                                           # f_1(u; z)
        acc = np.zeros((g.n_z, n, n))
        for _ in range(k_max):
            # sum_k int_0^{t0} f_k(u) S(u, t) du, trapezoid in u up to t_m
            prod = f[:, :, None] * S[None, :, :]                         # (z, u, t)
            cum = np.zeros_like(prod)
            cum[:, 1:] = np.cumsum(0.5 * h * (prod[:, 1:] + prod[:, :-1]), axis=1)
            acc += cum
            nxt = np.zeros_like(f)
            integrand = f[:, :, None] * Kvu[None, :, :]                  # (z, v, u)
            for u in range(1, n):
                seg = integrand[:, : u + 1, u]
                nxt[:, u] = 0.5 * h * (seg[:, 1:] + seg[:, :-1]).sum(axis=1)
            f = nxt
        P = np.exp(-Om0)[:, None, :] + acc                               # (z, m, t)
        total += r * np.einsum("z,zmt->mt", wz, P)
    return np.where(upper, 1.0 - total, 0.0)
