"""Reconstruction of the measure solution from the characteristic curves.

Given the converged flow ``y_C`` and the remaining-mass table ``phi``, the
measure at time ``t`` is described per component by its tail function
``V_a(y) = mu_t({w_a} x [y, 1))``, obtained by pushing ``phi_a(., t)``
through ``y = y_C(., t)``.  The residual checks below test the integrated
equations of motion on a fixed ``16 x 16`` lattice of ``(gamma, t)`` pairs.

Inner ``dz`` integrals against ``mu_s`` are Stieltjes sums over the slice
knots (the images ``y_C(xi_k, s)`` of the ``xi`` nodes).  ``V_a`` is linear
between knots, so the only quadrature error comes from the integrand, and
the non-smooth point ``y_C((0,0), s)`` is always a knot.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .grid import Flow, GridSpec
from .model import InitialDensity, RateMixture, ScenarioError

__all__ = [
    "PhiTable",
    "MeasureSlice",
    "InversionError",
    "build_phi",
    "slice_measure",
    "all_slices",
    "residual_lattice",
    "residual_velocity",
    "residual_evolution",
    "residual_uniqueness_form",
    "check_lipschitz",
    "check_finite_evaporation",
    "closed_form_oracle",
]


class InversionError(RuntimeError):
    """``y_C(., t)`` is not monotone/surjective on the nodes."""


@dataclass
class PhiTable:
    """``phi_a(xi, t)`` for every component, shape ``(n_a, n_xi, n_t)``."""

    grid: GridSpec
    values: np.ndarray
    weights: tuple

    @property
    def total(self) -> np.ndarray:
        return self.values.sum(axis=0)

    def check_invariants(self, y_C: Flow, density: InitialDensity | None = None) -> dict:
        """Measured violations of the table invariants."""
        g = self.grid
        mask = g.admissible()
        v = self.values
        out = {
            "nonnegative": float(max(0.0, -v[:, mask].min())),
            "sum_matches_flow": float(np.abs((1.0 - self.total - y_C.values)[mask]).max()),
            "top_is_zero": float(np.abs(v[:, -1, :]).max()),
        }
        pair = mask[:, 1:] & mask[:, :-1]
        inc = np.where(pair[None], v[:, :, 1:] - v[:, :, :-1], 0.0)
        out["nonincreasing_t"] = float(max(0.0, inc.max()))
        if density is not None:
            start = g.start_index()
            idx = np.arange(g.n_xi)
            y0 = np.maximum(g.xi, 0.0)
            err = 0.0
            for a, (r, s) in enumerate(zip(self.weights, density.sigmas)):
                err = max(err, float(np.abs(v[a, idx, start] - r * s.tail_mass(y0)).max()))
            out["initial_values"] = err
        return out


def build_phi(y_C: Flow, mixture: RateMixture, density: InitialDensity,
              threads: int = 1) -> PhiTable:
    """``phi`` computed from ``y_C`` with the same kernels as ``G``.

    For the exact pairing ``y_C = 1 - sum_a phi_a`` use the table returned
    with the fixed point instead; recomputing from ``y_C`` differs by the
    Picard tolerance.
    """
    from .picard import _all_phi
    return PhiTable(y_C.grid, _all_phi(y_C, mixture, density, threads), mixture.weights)


@dataclass
class MeasureSlice:
    """Per-component tail functions of ``mu_t`` at one time node.

    ``knot_y`` / ``knot_phi`` are ``y_C(., t)`` and ``phi_a(., t)`` on the
    admissible ``xi`` nodes; ``y`` / ``V`` are the tails on a uniform grid.
    """

    t: float
    t_index: int
    first: int                 # xi index of the first admissible node
    knot_y: np.ndarray
    knot_phi: np.ndarray       # (n_a, n_knots)
    y: np.ndarray
    V: np.ndarray              # (n_a, n_y)

    def tail(self, y) -> np.ndarray:
        """``V_a(y)`` at arbitrary ``y`` by monotone inversion of ``y_C``.

        Ties resolve to the smallest ``xi``.
        """
        y = np.atleast_1d(np.asarray(y, dtype=float))
        ky, kp = self.knot_y, self.knot_phi
        k = np.searchsorted(ky, y, side="left")
        k = np.clip(k, 0, ky.size - 1)
        lo = np.maximum(k - 1, 0)
        gap = ky[k] - ky[lo]
        exact = (ky[k] == y) | (k == 0) | (gap <= 0)
        frac = np.where(exact, 1.0, (y - ky[lo]) / np.where(gap > 0, gap, 1.0))
        return kp[:, lo] + frac * (kp[:, k] - kp[:, lo])

    def to_rows(self):
        for a in range(self.V.shape[0]):
            for yi, vi in zip(self.y, self.V[a]):
                yield yi, a, vi


def slice_measure(y_C: Flow, phi: PhiTable, t_index: int, y_grid=None,
                  slack: float = 1e-12) -> MeasureSlice:
    """Tail functions at ``t_index`` by inverting ``y_C(., t)``."""
    g = y_C.grid
    first = g.origin - t_index
    ky = y_C.values[first:, t_index]
    if np.any(np.diff(ky) < -slack) or abs(ky[0]) > 1e-9 or abs(ky[-1] - 1.0) > 1e-9:
        raise InversionError(f"y_C(., t_{t_index}) is not monotone onto [0, 1]")
    ky = np.maximum.accumulate(ky)
    kp = phi.values[:, first:, t_index]
    y = g.z if y_grid is None else np.asarray(y_grid, dtype=float)
    s = MeasureSlice(float(g.t[t_index]), t_index, first, ky, kp, y, np.empty(0))
    s.V = s.tail(y)
    return s


def all_slices(y_C: Flow, phi: PhiTable, y_grid=None) -> list:
    return [slice_measure(y_C, phi, j, y_grid) for j in range(y_C.grid.n_t)]


def write_slice_csv(sl: MeasureSlice, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["y", "alpha", "V"])
        for y, a, v in sl.to_rows():
            wr.writerow([f"{y:.17g}", a, f"{v:.17g}"])


# --------------------------------------------------------------------------
# residuals

def residual_lattice(grid: GridSpec, n: int = 16):
    """Fixed sample lattice: ``n`` start points and ``n`` times.

    Starts are ``t0 = T i / (n/2)`` on the boundary and ``y0 = i / (n/2)``
    on the initial segment, times ``t = T j / n``; all are grid nodes when
    ``n_t - 1`` and ``n_z - 1`` are multiples of ``n``.  Returns
    ``(xi_index, t_index)`` arrays of admissible pairs with ``t > t0``.
    """
    half = n // 2
    t0 = grid.horizon * np.arange(1, half + 1) / half
    y0 = np.arange(half) / half
    xi_vals = np.concatenate([-t0[::-1], y0])
    t_vals = grid.horizon * np.arange(1, n + 1) / n
    xi_idx = np.array([int(np.argmin(np.abs(grid.xi - x))) for x in xi_vals])
    t_idx = np.array([int(np.argmin(np.abs(grid.t - t))) for t in t_vals])
    start = grid.start_index()
    pairs = [(i, j) for i in xi_idx for j in t_idx if j > start[i]]
    a = np.array(pairs, dtype=int)
    return a[:, 0], a[:, 1]


def _knot_position(sl: MeasureSlice, xi_index: int) -> int:
    return xi_index - sl.first


def _stieltjes_tail(sl: MeasureSlice, k: int, f) -> np.ndarray:
    """``int_{[y_k, 1)} f(x) mu_s(dx)`` per component over knots ``>= k``."""
    y = sl.knot_y[k:]
    p = sl.knot_phi[:, k:]
    if y.size < 2:
        return np.zeros(p.shape[0])
    mid = 0.5 * (y[1:] + y[:-1])
    return np.sum(f(mid) * (p[:, :-1] - p[:, 1:]), axis=1)


def _outer_trapz(values: np.ndarray, h: float) -> np.ndarray:
    """Cumulative trapezoid along the last axis."""
    out = np.zeros_like(values)
    out[..., 1:] = np.cumsum(0.5 * h * (values[..., 1:] + values[..., :-1]), axis=-1)
    return out


def _evaporation_curves(y_C: Flow, slices, mixture: RateMixture, xi_index: int):
    """Per component, ``s -> int_{[y_C(gamma, s), 1)} w_a(z, s) mu_s(dz)``."""
    g = y_C.grid
    s0 = g.start_index()[xi_index]
    out = np.zeros((len(mixture), g.n_t))
    for s in range(s0, g.n_t):
        sl = slices[s]
        k = _knot_position(sl, xi_index)
        for a, w in enumerate(mixture.rates):
            out[a, s] = _stieltjes_tail(sl, k, lambda x, w=w, t=g.t[s]: w(x, t))[a]
    return out


def residual_evolution(y_C: Flow, phi: PhiTable, slices, mixture: RateMixture,
                       lattice=None) -> np.ndarray:
    """Max over the lattice, per component, of the mass-balance residual

    ``|V_a(y_C(gamma,t), t) - V_a(y0, t0) + int_{t0}^t int w_a dmu_s ds|``.
    """
    g = y_C.grid
    xi_idx, t_idx = residual_lattice(g) if lattice is None else lattice
    res = np.zeros(len(mixture))
    for i in np.unique(xi_idx):
        s0 = g.start_index()[i]
        ev = _evaporation_curves(y_C, slices, mixture, i)
        cum = _outer_trapz(ev[:, s0:], g.dt)
        for j in t_idx[xi_idx == i]:
            lhs = slices[j].tail(y_C.values[i, j])[:, 0]
            start = slices[s0].tail(y_C.values[i, s0])[:, 0]
            res = np.maximum(res, np.abs(lhs - start + cum[:, j - s0]))
    return res


def residual_velocity(y_C: Flow, slices, mixture: RateMixture, lattice=None) -> float:
    """Max over the lattice of ``|y_C(gamma,t) - y0 - int_{t0}^t sum_a int w_a dmu_s ds|``."""
    g = y_C.grid
    xi_idx, t_idx = residual_lattice(g) if lattice is None else lattice
    y0 = np.maximum(g.xi, 0.0)
    res = 0.0
    for i in np.unique(xi_idx):
        s0 = g.start_index()[i]
        ev = _evaporation_curves(y_C, slices, mixture, i).sum(axis=0)
        cum = _outer_trapz(ev[s0:], g.dt)
        for j in t_idx[xi_idx == i]:
            res = max(res, abs(y_C.values[i, j] - y0[i] - cum[j - s0]))
    return float(res)


def residual_uniqueness_form(y_C: Flow, slices, mixture: RateMixture, lattice=None) -> np.ndarray:
    """Residual of the integral form built on ``tilde Omega(s, t) = int_s^t w(1, u) du``:

    ``V_a(y_C(gamma,t)) = e^{-tilde Omega(t0,t)} V_a(y0, t0)
    + int_{t0}^t e^{-tilde Omega(s,t)} int_{y_C(gamma,s)}^1 dw/dz(x,s) mu_s([y_C(gamma,s), x)) dx ds``.
    """
    g = y_C.grid
    t = g.t
    xi_idx, t_idx = residual_lattice(g) if lattice is None else lattice
    n_a = len(mixture)
    # tilde Omega at the nodes (cumulative trapezoid of w(1, .))
    top = np.array([w(np.ones_like(t), t) for w in mixture.rates])
    cum_top = _outer_trapz(top, g.dt)
    res = np.zeros(n_a)
    for i in np.unique(xi_idx):
        s0 = g.start_index()[i]
        inner = np.zeros((n_a, g.n_t))
        for s in range(s0, g.n_t):
            sl = slices[s]
            k = _knot_position(sl, i)
            x = sl.knot_y[k:]
            p = sl.knot_phi[:, k:]
            if x.size < 2:
                continue
            for a, w in enumerate(mixture.rates):
                f = w.dy(x, t[s]) * (p[a, 0] - p[a])
                inner[a, s] = np.sum(0.5 * np.diff(x) * (f[1:] + f[:-1]))
        for j in t_idx[xi_idx == i]:
            decay = np.exp(-(cum_top[:, j:j + 1] - cum_top[:, s0:j + 1]))   # (a, s)
            integrand = decay * inner[:, s0:j + 1]
            integral = np.sum(0.5 * g.dt * (integrand[:, 1:] + integrand[:, :-1]), axis=1)
            lhs = slices[j].tail(y_C.values[i, j])[:, 0]
            start = slices[s0].tail(y_C.values[i, s0])[:, 0]
            rhs = decay[:, 0] * start + integral
            res = np.maximum(res, np.abs(lhs - rhs))
    return res


# --------------------------------------------------------------------------
# bounds

def check_lipschitz(slices, mixture: RateMixture, n_pairs: int = 10_000, seed: int = 0,
                    slack: float = 1e-6) -> dict:
    """Lipschitz bound of ``sum_a h_a V_a(y, t)`` over random pairs.

    The worst test function ``|h_a| <= 1`` is ``h_a = sign(dV_a)``, so the
    left side is ``sum_a |dV_a|``; this covers every signed indicator of a
    component subset.  Half of the pairs are local (``|dy|, |dt|`` of a few
    grid steps).
    """
    rng = np.random.default_rng(seed)
    n_t = len(slices)
    T = slices[-1].t
    L = mixture.M_W * math.exp(2 * mixture.C_W * T)
    j1 = rng.integers(0, n_t, n_pairs)
    y1 = rng.random(n_pairs)
    local = np.arange(n_pairs) < n_pairs // 2
    j2 = np.where(local, np.clip(j1 + rng.integers(-3, 4, n_pairs), 0, n_t - 1),
                  rng.integers(0, n_t, n_pairs))
    y2 = np.where(local, np.clip(y1 + 0.02 * (rng.random(n_pairs) - 0.5), 0, 1),
                  rng.random(n_pairs))
    worst = -np.inf
    for j in np.unique(np.concatenate([j1])):
        sel = j1 == j
        V1 = slices[j].tail(y1[sel])
        for jj in np.unique(j2[sel]):
            sub = j2[sel] == jj
            V2 = slices[jj].tail(y2[sel][sub])
            lhs = np.abs(V2 - V1[:, sub]).sum(axis=0)
            rhs = np.abs(y2[sel][sub] - y1[sel][sub]) + L * abs(slices[jj].t - slices[j].t)
            worst = max(worst, float((lhs - rhs).max()))
    return {"constant": L, "max_excess": worst, "passed": bool(worst <= slack)}


def check_finite_evaporation(y_C: Flow, mixture: RateMixture, slack: float = 1e-4) -> dict:
    """``0 <= d y_C / dt <= M_W e^{2 C_W t}`` by forward differences at all nodes."""
    g = y_C.grid
    mask = g.admissible()
    pair = mask[:, 1:] & mask[:, :-1]
    dv = (y_C.values[:, 1:] - y_C.values[:, :-1]) / g.dt
    bound = mixture.M_W * np.exp(2 * mixture.C_W * g.t[1:])
    lo = float(np.where(pair, dv, np.inf).min())
    excess = float(np.where(pair, dv - bound[None, :], -np.inf).max())
    return {"min_rate": lo, "max_excess": excess,
            "passed": bool(lo >= -slack and excess <= slack)}


# --------------------------------------------------------------------------
# oracle

def closed_form_oracle(mixture: RateMixture, density: InitialDensity, xi, t) -> np.ndarray:
    """Characteristic curves for position-independent rates and uniform densities.

    ``y_C((y0, 0), t) = 1 - sum_b r_b (1 - y0) exp(-int_0^t w_b)`` and
    ``y_C((0, t0), t) = 1 - sum_b r_b exp(-int_{t0}^t w_b)``.
    """
    if not mixture.spatially_constant:
        raise ScenarioError("closed form needs rates independent of position")
    if any(s.kind != "uniform" for s in density.sigmas):
        raise ScenarioError("closed form needs uniform densities")
    xi = np.asarray(xi, dtype=float)
    t = np.asarray(t, dtype=float)
    xi, t = np.broadcast_arrays(xi, t)
    y0 = np.maximum(xi, 0.0)
    t0 = np.maximum(-xi, 0.0)
    rem = np.zeros(xi.shape)
    for w, r in zip(mixture.rates, mixture.weights):
        rem = rem + r * np.exp(-w.time_integral(t0, t))
    return 1.0 - (1.0 - y0) * rem
