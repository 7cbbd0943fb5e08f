"""Monte Carlo simulation of the arrival process by thinning.

Candidate arrivals are proposed at the constant rate ``M = ||w||`` and
accepted with probability ``omega(last, t) / M``, where ``last`` is the
previous accepted arrival (``0`` before the first one).

Random numbers come from ``numpy.random.Generator(Philox)`` seeded through
``SeedSequence``.  :func:`sample_trajectory` draws one path from the stream
``SeedSequence(seed, spawn_key=(index,))``; :func:`simulate` draws a whole
batch from a single stream keyed by ``seed`` (and the batch index), which
lets every step be vectorised over trajectories.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .grid import Flow
from .model import RateFunction

__all__ = [
    "MajorantError",
    "Trajectory",
    "ArrivalTable",
    "Estimate",
    "make_rng",
    "sample_trajectory",
    "simulate",
    "estimate_probs",
    "write_estimates_csv",
]

MAJORANT_SLACK = 1e-12


class MajorantError(RuntimeError):
    """The intensity exceeded the thinning majorant."""


def make_rng(seed: int, index: int | None = None) -> np.random.Generator:
    ss = np.random.SeedSequence(seed) if index is None else \
        np.random.SeedSequence(seed, spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def _intensity(theta: Flow, w: RateFunction, z: float, last, t):
    """``omega(last, t)``: start position before the first arrival, the
    boundary point ``(0, last)`` afterwards."""
    last = np.asarray(last, dtype=float)
    xi = np.where(last > 0.0, -last, z)
    return w(theta.evaluate(xi, t), t)


@dataclass(frozen=True)
class Trajectory:
    arrival_times: tuple
    z: float
    component: int = 0

    def __post_init__(self):
        a = np.asarray(self.arrival_times, dtype=float)
        if a.size and (np.any(np.diff(a) <= 0) or a[0] <= 0):
            raise ValueError("arrival times must be strictly increasing in (0, T]")

    def count(self, t: float) -> int:
        return int(np.searchsorted(self.arrival_times, t, side="right"))


def sample_trajectory(theta: Flow, w: RateFunction, z: float, seed: int, index: int = 0,
                      component: int = 0) -> Trajectory:
    """One path on ``[0, T]`` from the stream ``(seed, index)``."""
    T = theta.grid.horizon
    M = w.sup_norm(T)
    rng = make_rng(seed, index)
    times = []
    if M == 0.0:
        return Trajectory((), z, component)
    t, last = 0.0, 0.0
    while True:
        t += rng.exponential(1.0 / M)
        if t > T:
            break
        rate = float(_intensity(theta, w, z, last, t))
        if rate > M * (1 + MAJORANT_SLACK) + MAJORANT_SLACK:
            raise MajorantError(f"intensity {rate} above majorant {M}")
        if rng.random() * M < rate:
            times.append(t)
            last = t
    return Trajectory(tuple(times), z, component)


@dataclass
class ArrivalTable:
    """Arrival times of a batch; row ``n`` holds ``counts[n]`` valid entries
    followed by ``inf`` padding."""

    times: np.ndarray
    counts: np.ndarray
    z: float

    @property
    def n(self) -> int:
        return self.counts.size

    def count_at(self, t: float) -> np.ndarray:
        return (self.times <= t).sum(axis=1)

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(tuple(self.times[i, : self.counts[i]]), self.z)


def simulate(theta: Flow, w: RateFunction, z: float, n_traj: int, seed: int,
             batch: int = 0) -> ArrivalTable:
    """Vectorised thinning for ``n_traj`` independent paths."""
    T = theta.grid.horizon
    M = w.sup_norm(T)
    cap = 8
    times = np.full((n_traj, cap), np.inf)
    counts = np.zeros(n_traj, dtype=int)
    if M == 0.0 or n_traj == 0:
        return ArrivalTable(times, counts, z)
    rng = make_rng(seed, batch)
    t = np.zeros(n_traj)
    last = np.zeros(n_traj)
    active = np.arange(n_traj)
    while active.size:
        t[active] += rng.exponential(1.0 / M, active.size)
        u = rng.random(active.size)
        alive = t[active] <= T
        active, u = active[alive], u[alive]
        if not active.size:
            break
        rate = _intensity(theta, w, z, last[active], t[active])
        if np.any(rate > M * (1 + MAJORANT_SLACK) + MAJORANT_SLACK):
            raise MajorantError(f"intensity {rate.max()} above majorant {M}")
        acc = active[u * M < rate]
        if acc.size:
            need = counts[acc].max() + 1
            if need > cap:
                grow = max(cap, need - cap)
                times = np.hstack([times, np.full((n_traj, grow), np.inf)])
                cap += grow
            times[acc, counts[acc]] = t[acc]
            counts[acc] += 1
            last[acc] = t[acc]
    return ArrivalTable(times[:, : max(1, counts.max())], counts, z)


@dataclass
class Estimate:
    """MC estimates of ``P(N(t) = N(s))`` and ``P(N(t) = N(s) = k)``."""

    z: float
    s: float
    t: float
    n: int
    total: float
    total_se: float
    per_k: np.ndarray
    per_k_se: np.ndarray
    per_k_counts: np.ndarray


def _binomial(count, n):
    p = count / n
    return p, np.sqrt(p * (1 - p) / n)


def estimate_from_table(table: ArrivalTable, s: float, t: float, k_max: int = 10) -> Estimate:
    if s > t:
        raise ValueError("need s <= t")
    ns, nt = table.count_at(s), table.count_at(t)
    same = ns == nt
    hits = np.bincount(nt[same], minlength=k_max + 1)[: k_max + 1]
    p, se = _binomial(same.sum(), table.n)
    pk, sek = _binomial(hits.astype(float), table.n)
    return Estimate(table.z, s, t, table.n, float(p), float(se), pk, sek, hits)


def estimate_probs(theta: Flow, w: RateFunction, z: float, s: float, t: float, n_traj: int,
                   seed: int, k_max: int = 10) -> Estimate:
    """Empirical ``P(N(t) = N(s) [= k])`` with binomial standard errors."""
    return estimate_from_table(simulate(theta, w, z, n_traj, seed), s, t, k_max)


def write_estimates_csv(rows, path) -> None:
    """``rows``: iterable of ``(z, s, t, k, estimate, stderr, n)``; ``k`` may be ``"all"``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["z", "s", "t", "k", "estimate", "stderr", "n"])
        for z, s, t, k, est, se, n in rows:
            wr.writerow([f"{z:.17g}", f"{s:.17g}", f"{t:.17g}", k, f"{est:.17g}",
                         f"{se:.17g}", n])
