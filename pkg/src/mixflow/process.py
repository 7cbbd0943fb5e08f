r"""Point process with last-arrival-time dependent intensity.

Given a flow ``theta``, a rate ``w`` and a start position ``z``, the process
``N`` has intensity ``omega(s, t)`` depending on the last arrival time ``s``:

* ``omega(0, t) = w(theta((z, 0), t), t)`` before the first arrival,
* ``omega(s, t) = w(theta((0, s), t), t)`` after an arrival at ``s > 0``.

Discretisation
--------------
Probability mass is tracked in *cohorts*: cohort ``v >= 1`` holds the mass
whose last arrival lies in the time cell ``(t_{v-1}, t_v]`` and cohort ``0``
the mass with no arrival yet.  Over a step each cohort decays with the exact
exponential of its step-averaged hazard (trapezoid in time), and everything
that decays is re-born in the current cell.  Mass is therefore conserved to
round-off, which makes the sum rule ``sum_k P(N(t)=k) = 1`` hold without
quadrature error, and constant intensities are reproduced exactly.

A cohort's hazard after its birth cell is evaluated at the cell midpoint,
``omega(t_{v-1/2}, .)``, which keeps the scheme second order.  For the
per-count breakdown, multiple arrivals inside one step follow the two-rate
chain (old-cohort hazard ``b`` for the first jump, fresh-cohort hazard ``a``
for the following ones) integrated by Gauss-Legendre.

The summed (all counts) path is the discrete renewal equation

    B[j] = B0[j] + sum_{1 <= v < j} B[v] (S[v, j-1] - S[v, j]),

with ``B`` the cohort birth masses, ``S`` the cohort survival matrix and
``B0`` the first-arrival masses; it is solved by forward substitution.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Flow, GridSpec
from .model import RateFunction

__all__ = [
    "ArrivalKernel",
    "NoArrival",
    "build_kernel",
    "choose_k_max",
    "prob_no_arrival",
    "prob_count",
    "count_table",
    "count_totals",
    "check_st_dep",
    "check_survival_bound",
    "write_count_csv",
    "TruncationError",
    "TAIL_TOL",
]

TAIL_TOL = 1e-10
CONSISTENCY_TOL = 1e-10

_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


class TruncationError(RuntimeError):
    """The per-count truncation ``K_max`` leaves too much mass behind."""


def choose_k_max(rate_bound: float, horizon: float, tol: float = TAIL_TOL) -> int:
    """Smallest ``K`` with ``(rate_bound T)^(K+1) / (K+1)! <= tol``."""
    x = rate_bound * horizon
    if x <= 0.0:
        return 1
    k = 1
    while (k + 1) * math.log(x) - math.lgamma(k + 2) > math.log(tol):
        k += 1
    return k


@dataclass
class ArrivalKernel:
    """Cohort hazards and survival factors for one ``(theta, w)`` pair.

    Attributes
    ----------
    omega0 : (n_z, n_t)
        Intensity before the first arrival, per start position.
    Omega0 : (n_z, n_t)
        Its cumulative integral ``Omega_z(0, t_j)`` (trapezoid).
    omega_node : (n_t, n_t)
        ``omega(t_v, t_j)`` at boundary nodes, ``j >= v`` (zero elsewhere).
    cohort_rate : (n_t, n_t)
        Hazard of cohort ``v`` (born in cell ``v``) at ``t_j``; row 0 unused.
    fresh_rate : (n_t,)
        Hazard of mass born inside step ``j``, used within that step.
    Omega : (n_t, n_t)
        ``Omega[v, j]``: integrated cohort hazard from ``t_v`` to ``t_j``.
    S : (n_t, n_t)
        ``exp(-Omega)`` for ``j >= v`` (zero below the diagonal).
    K : (n_t, n_t)
        ``cohort_rate * S``, the arrival density of the next arrival.
    births : (n_z, n_t)
        Summed-path cohort birth masses ``B``.
    """

    grid: GridSpec
    z: np.ndarray
    rate_bound: float        # ||w|| + C_W, sets K_max
    omega0: np.ndarray
    Omega0: np.ndarray
    omega_node: np.ndarray
    cohort_rate: np.ndarray
    fresh_rate: np.ndarray
    Omega: np.ndarray
    S: np.ndarray
    K: np.ndarray
    births: np.ndarray = field(repr=False)

    @property
    def S0(self) -> np.ndarray:
        return np.exp(-self.Omega0)

    @property
    def step_decay(self) -> np.ndarray:
        """``exp(-hazard * dt)`` of cohort ``v`` over step ``j`` (``j > v``)."""
        D = np.zeros_like(self.S)
        D[:, 1:] = np.exp(-(self.Omega[:, 1:] - self.Omega[:, :-1]))
        return D

    def weighted_no_arrival(self, weights: np.ndarray) -> np.ndarray:
        """``sum_z weights[z] P_z(no arrival in (t_m, t_j])`` as an ``(m, j)`` array.

        Entries with ``m > j`` are meaningless and set to zero.
        """
        weights = np.asarray(weights, dtype=float)
        head = weights @ self.S0
        Bw = weights @ self.births
        contrib = Bw[:, None] * self.S
        contrib[0] = 0.0
        P = head[None, :] + np.cumsum(contrib, axis=0)
        return np.triu(P)


def _lookup_theta_rows(theta: Flow, z: np.ndarray) -> np.ndarray:
    g = theta.grid
    if np.array_equal(z, g.z):
        return theta.values[g.origin:, :]
    return theta.evaluate(z[:, None], g.t[None, :])


def build_kernel(theta: Flow, w: RateFunction, z_nodes=None) -> ArrivalKernel:
    """Build cohort hazards, survival factors and birth masses.

    ``z_nodes`` defaults to the initial nodes of the flow's grid; other
    positions are served by interpolating the flow.
    """
    g = theta.grid
    t = g.t
    n = g.n_t
    h = g.dt
    z = g.z if z_nodes is None else np.atleast_1d(np.asarray(z_nodes, dtype=float))

    # before the first arrival
    omega0 = w(_lookup_theta_rows(theta, z), t[None, :])
    Omega0 = np.zeros_like(omega0)
    Omega0[:, 1:] = np.cumsum(0.5 * h * (omega0[:, 1:] + omega0[:, :-1]), axis=1)

    # boundary node intensities omega(t_v, t_j) = w(theta(-t_v, t_j), t_j)
    rows = theta.values[g.origin::-1, :]  # row v <-> xi = -t_v
    upper = np.triu(np.ones((n, n), dtype=bool))
    omega_node = np.where(upper, w(rows, t[None, :]), 0.0)

    # cohort v: last arrival in (t_{v-1}, t_v], representative time t_{v-1/2}
    mid_theta = np.zeros((n, n))
    mid_theta[1:] = 0.5 * (rows[1:] + rows[:-1])
    mid_theta[1:] = np.where(upper[1:], mid_theta[1:], 0.0)
    cohort_rate = np.where(upper, w(mid_theta, t[None, :]), 0.0)
    cohort_rate[0] = 0.0
    fresh_rate = np.diag(cohort_rate).copy()

    steps = 0.5 * h * (cohort_rate[:, 1:] + cohort_rate[:, :-1])
    steps = np.where(upper[:, 1:] & upper[:, :-1], steps, 0.0)
    Omega = np.zeros((n, n))
    Omega[:, 1:] = np.cumsum(steps, axis=1)
    Omega = np.where(upper, Omega, 0.0)
    S = np.where(upper, np.exp(-Omega), 0.0)
    S[0] = 0.0
    K = cohort_rate * S

    # summed path: births into cohort j during step j
    S0 = np.exp(-Omega0)
    B = np.zeros((z.size, n))
    B[:, 1:] = S0[:, :-1] - S0[:, 1:]
    D = np.zeros((n, n))
    D[:, 1:] = S[:, :-1] - S[:, 1:]
    D = np.triu(D, k=1)
    D[0] = 0.0
    for j in range(2, n):
        B[:, j] += B[:, 1:j] @ D[1:j, j]

    # K_max is chosen from ||w|| + C_W, the envelope rate of the tail bound
    bound = float(max(w.sup_norm(g.horizon), np.max(omega0, initial=0.0),
                      np.max(cohort_rate, initial=0.0)) + w.sup_dy(g.horizon))
    return ArrivalKernel(g, z, bound, omega0, Omega0, omega_node, cohort_rate, fresh_rate,
                         Omega, S, K, B)


@dataclass
class NoArrival:
    """``P(N(t) = N(s) = k)`` for ``k = 0..K_max`` plus two totals."""

    p: np.ndarray
    total: float
    total_volterra: float

    @property
    def consistency(self) -> float:
        return abs(self.total - self.total_volterra)


def _in_step_fractions(b: np.ndarray, a: float, h: float, m_max: int) -> np.ndarray:
    """``I[..., m]``: mass fraction leaving a cohort of hazard ``b`` during one
    step and ending the step with ``1 + m`` arrivals (fresh hazard ``a``)."""
    s = 0.5 * h * (_GL_X + 1.0)
    wq = 0.5 * h * _GL_W
    b = np.asarray(b, dtype=float)[..., None]
    first = b * np.exp(-b * s) * wq                       # (..., q)
    lam = a * (h - s)
    m = np.arange(m_max + 1)
    logpois = m[:, None] * np.log(np.where(lam > 0, lam, 1.0))[None, :] - lam[None, :] \
        - np.array([math.lgamma(k + 1) for k in m])[:, None]
    pois = np.exp(logpois)
    if a == 0.0:
        pois = np.zeros_like(pois)
        pois[0] = 1.0
    return np.einsum("...q,mq->...m", first, pois)


def _cohort_sweep(kernel: ArrivalKernel, z_index, k_max: int, store_all: bool):
    """March per-count cohort masses through time.

    Returns ``x`` of shape ``(nz, n_t, k_max+1, n_t)`` (masses at every time,
    when ``store_all``) or the per-time count totals ``(nz, k_max+1, n_t)``.
    """
    g = kernel.grid
    n, h = g.n_t, g.dt
    zi = np.atleast_1d(z_index)
    nz = zi.size
    S0 = kernel.S0[zi]
    decay0 = np.ones((nz, n))
    decay0[:, 1:] = S0[:, 1:] / np.where(S0[:, :-1] > 0, S0[:, :-1], 1.0)
    D = kernel.step_decay
    x = np.zeros((nz, k_max + 1, n))      # cohort masses at the current time
    x0 = np.ones(nz)                      # cohort "no arrival yet"
    if store_all:
        hist = np.zeros((nz, n, k_max + 1, n))
        hist[:, 0, 0, 0] = 1.0
    else:
        tot = np.zeros((nz, k_max + 1, n))
        tot[:, 0, 0] = 1.0
    m_max = k_max
    for j in range(1, n):
        a = float(kernel.fresh_rate[j])
        # hazard of each cohort over step j, consistent with the survival factors
        b_old = -np.log(D[1:j, j]) / h
        b0 = -np.log(np.where(decay0[:, j] > 0, decay0[:, j], 1e-300)) / h
        I_old = _in_step_fractions(b_old, a, h, m_max) if j > 1 else np.zeros((0, m_max + 1))
        I0 = _in_step_fractions(b0, a, h, m_max)               # (nz, m)
        new = np.zeros((nz, k_max + 1))
        flow_old = np.einsum("zkv,vm->zkm", x[:, :, 1:j], I_old)  # (nz, k, m)
        for m in range(m_max + 1):
            # count k -> k + 1 + m
            hi = k_max - 1 - m
            if hi < 0:
                break
            new[:, 1 + m:] += flow_old[:, : hi + 1, m]
            new[:, 1 + m] += x0 * I0[:, m]
        x[:, :, 1:j] *= D[1:j, j][None, None, :]
        x0 = x0 * decay0[:, j]
        x[:, :, j] = new
        x[:, 0, 0] = x0
        if store_all:
            hist[:, j] = x
        else:
            tot[:, :, j] = x.sum(axis=2)
    return hist if store_all else tot


def count_table(kernel: ArrivalKernel, z_index: int, k_max: int) -> np.ndarray:
    """``p[k, m, j] = P(N(t_j) = N(t_m) = k)`` for start node ``z_index``.

    Entries with ``m > j`` are set to zero.
    """
    hist = _cohort_sweep(kernel, z_index, k_max, store_all=True)[0]   # (j, k, v)
    p = np.cumsum(hist, axis=2)                                       # sum over v <= m
    p = np.transpose(p, (1, 2, 0))                                    # (k, m, j)
    n = kernel.grid.n_t
    return p * np.triu(np.ones((n, n)))[None]


def count_totals(kernel: ArrivalKernel, k_max: int, z_index=None) -> np.ndarray:
    """``P(N(t_j) = k)`` with shape ``(nz, k_max + 1, n_t)``."""
    zi = np.arange(kernel.z.size) if z_index is None else z_index
    return _cohort_sweep(kernel, zi, k_max, store_all=False)


def _summed_no_arrival(kernel: ArrivalKernel, z_index: int, m: int, j: int) -> float:
    B = kernel.births[z_index]
    return float(kernel.S0[z_index, j] + np.dot(B[1:m + 1], kernel.S[1:m + 1, j]))


def prob_no_arrival(kernel: ArrivalKernel, z_index: int, s_index: int, t_index: int,
                    k_max: int | None = None, tail_tol: float = TAIL_TOL) -> NoArrival:
    """``P(N(t) = N(s) = k)`` for ``k <= K_max`` and the total over ``k``.

    ``total`` sums the per-count path; ``total_volterra`` comes from the
    renewal (birth-mass) path.  Raises :class:`TruncationError` when the
    dropped tail exceeds ``tail_tol``.
    """
    if s_index > t_index:
        raise ValueError("need s <= t")
    g = kernel.grid
    if k_max is None:
        k_max = choose_k_max(kernel.rate_bound, g.horizon, tail_tol)
    p = count_table(kernel, z_index, k_max)[:, s_index, t_index]
    vol = _summed_no_arrival(kernel, z_index, s_index, t_index)
    res = NoArrival(p, float(p.sum()), vol)
    if res.consistency > max(tail_tol, CONSISTENCY_TOL):
        raise TruncationError(f"K_max={k_max} leaves {res.consistency:.3g} of the mass")
    return res


def prob_count(kernel: ArrivalKernel, z_index: int, t_index: int, k: int,
               k_max: int | None = None) -> float:
    """``P(N(t) = k)``."""
    if k_max is None:
        k_max = choose_k_max(kernel.rate_bound, kernel.grid.horizon)
    if k > k_max:
        raise ValueError("k exceeds K_max")
    return float(prob_no_arrival(kernel, z_index, t_index, t_index, k_max).p[k])


def _d_dm(p: np.ndarray, h: float) -> np.ndarray:
    """Second-order derivative along the first axis (one-sided at the ends)."""
    d = np.empty_like(p)
    d[1:-1] = (p[2:] - p[:-2]) / (2 * h)
    d[0] = (-3 * p[0] + 4 * p[1] - p[2]) / (2 * h)
    d[-1] = (3 * p[-1] - 4 * p[-2] + p[-3]) / (2 * h)
    return d


def check_st_dep(kernel: ArrivalKernel, z_index: int, s_index: int, t_index: int, k: int,
                 k_max: int | None = None) -> float:
    """Residual of the s/t derivative identity for ``P(N(t) = N(s) = k)``.

    Left side: central difference in ``t``.  Right side:
    ``-int_0^s omega(u, t) d/du P(N(t) = N(u) = k) du`` with second-order
    differences in ``u`` and the trapezoid rule.
    """
    g = kernel.grid
    if k < 1:
        raise ValueError("k must be >= 1")
    if not (0 <= s_index < t_index < g.n_t - 1):
        raise ValueError("need 0 <= s < t < T on the grid")
    if k_max is None:
        k_max = max(k + 1, choose_k_max(kernel.rate_bound, g.horizon))
    h = g.dt
    p = count_table(kernel, z_index, k_max)[k]          # (m, j)
    lhs = (p[s_index, t_index + 1] - p[s_index, t_index - 1]) / (2 * h)
    if s_index == 0:
        return float(abs(lhs))
    col = p[: s_index + 1, t_index]
    dp = _d_dm(col, h) if s_index >= 2 else np.full(2, (col[1] - col[0]) / h)
    integrand = kernel.omega_node[: s_index + 1, t_index] * dp
    rhs = -float(np.sum(0.5 * h * (integrand[1:] + integrand[:-1])))
    return float(abs(lhs - rhs))


def check_survival_bound(kernel: ArrivalKernel, w: RateFunction) -> float:
    """Largest violation of ``e^{-Omega(s,t)} <= e^{-tilde Omega(s,t) + C_W (t-s)}``
    over node pairs, with ``tilde Omega(s,t) = int_s^t w(1,u) du`` (trapezoid).

    Returns ``max(lhs - rhs)``, nonpositive when the bound holds.
    """
    g = kernel.grid
    t = g.t
    top = w(np.ones_like(t), t)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * g.dt * (top[1:] + top[:-1]))])
    Cw = w.sup_dy(g.horizon)
    tilde = cum[None, :] - cum[:, None]
    rhs = np.exp(-tilde + Cw * (t[None, :] - t[:, None]))
    upper = np.triu(np.ones_like(tilde, dtype=bool))
    upper[0] = False
    gap = np.where(upper, kernel.S - rhs, -np.inf)
    return float(gap.max())


def write_count_csv(kernel: ArrivalKernel, path, k_max: int | None = None,
                    z_indices=None, stride: int = 1) -> None:
    """Dump ``P(N(t) = N(s) = k)`` as CSV with columns ``z, s, t, k, p``."""
    g = kernel.grid
    if k_max is None:
        k_max = choose_k_max(kernel.rate_bound, g.horizon)
    zi = range(kernel.z.size) if z_indices is None else z_indices
    idx = range(0, g.n_t, stride)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["z", "s", "t", "k", "p"])
        for i in zi:
            p = count_table(kernel, i, k_max)
            for m in idx:
                for j in idx:
                    if j < m:
                        continue
                    for k in range(k_max + 1):
                        wr.writerow([f"{kernel.z[i]:.17g}", f"{g.t[m]:.17g}", f"{g.t[j]:.17g}",
                                     k, f"{p[k, m, j]:.17g}"])
