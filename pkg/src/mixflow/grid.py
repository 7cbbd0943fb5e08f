"""Discretisation of initial/boundary points and of flows.

Initial/boundary points share one coordinate ``xi`` in ``[-T, 1]``: the
boundary point ``(0, t0)`` is ``xi = -t0`` and the initial point ``(z, 0)``
is ``xi = z``.  The total order on points becomes the reverse numeric order
of ``xi``, and a pair ``(xi, t)`` is admissible when ``t >= max(0, -xi)``.

Boundary nodes coincide with time nodes, so ``xi_nodes`` is
``[-t_{n-1}, ..., -t_1, z_0 = 0, ..., z_{m-1} = 1]``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["GridSpec", "Flow", "FlowInvariantError", "identity_flow", "flow_distance",
           "gamma_line_integral"]

MONOTONE_SLACK = 1e-12


class FlowInvariantError(RuntimeError):
    """A discretised flow left the admissible class."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform time grid on ``[0, T]`` and uniform initial grid on ``[0, 1]``."""

    horizon: float
    n_t: int = 129
    n_z: int = 129

    def __post_init__(self):
        if self.n_t < 2 or self.n_z < 2:
            raise ValueError("grid needs n_t >= 2 and n_z >= 2")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_t)

    @property
    def dt(self) -> float:
        return self.horizon / (self.n_t - 1)

    @property
    def z(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_z)

    @property
    def dz(self) -> float:
        return 1.0 / (self.n_z - 1)

    @property
    def n_xi(self) -> int:
        return self.n_t - 1 + self.n_z

    @property
    def origin(self) -> int:
        """Index of ``xi = 0`` (the corner point ``(0, 0)``)."""
        return self.n_t - 1

    @property
    def xi(self) -> np.ndarray:
        return np.concatenate([-self.t[:0:-1], self.z])

    def boundary_index(self, m: int) -> int:
        """``xi`` index of the boundary point ``(0, t_m)``."""
        return self.origin - m

    def start_index(self) -> np.ndarray:
        """For each ``xi`` node the first admissible time index."""
        m = np.zeros(self.n_xi, dtype=int)
        m[: self.origin] = np.arange(self.n_t - 1, 0, -1)
        return m

    def admissible(self) -> np.ndarray:
        """Boolean mask of shape ``(n_xi, n_t)``."""
        return np.arange(self.n_t)[None, :] >= self.start_index()[:, None]

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.horizon, factor * (self.n_t - 1) + 1, factor * (self.n_z - 1) + 1)


class Flow:
    """A discretised flow ``theta(xi, t)`` on a :class:`GridSpec`.

    ``values`` has shape ``(n_xi, n_t)``.  Inadmissible entries (``t < -xi``)
    hold the continuous extension ``0``; they are never part of a check.
    Evaluation is bilinear except in the cells cut by the diagonal
    ``t = -xi``, where the admissible triangle is interpolated linearly so
    that ``theta(-t, t) = 0`` holds off the nodes as well.
    """

    def __init__(self, grid: GridSpec, values: np.ndarray):
        values = np.array(values, dtype=float)
        if values.shape != (grid.n_xi, grid.n_t):
            raise ValueError(f"flow values must have shape {(grid.n_xi, grid.n_t)}")
        values[~grid.admissible()] = 0.0
        self.grid = grid
        self.values = values

    def copy(self) -> "Flow":
        return Flow(self.grid, self.values.copy())

    @classmethod
    def from_function(cls, grid: GridSpec, fn: Callable) -> "Flow":
        """Sample ``fn(xi, t)`` (vectorised) at the admissible nodes."""
        X, Tm = np.meshgrid(grid.xi, grid.t, indexing="ij")
        vals = np.where(grid.admissible(), fn(X, Tm), 0.0)
        return cls(grid, vals)

    def __call__(self, xi, t):
        return self.evaluate(xi, t)

    def evaluate(self, xi, t) -> np.ndarray:
        g = self.grid
        xi = np.asarray(xi, dtype=float)
        t = np.asarray(t, dtype=float)
        xi, t = np.broadcast_arrays(xi, t)
        xs = g.xi
        i = np.clip(np.searchsorted(xs, xi, side="right") - 1, 0, g.n_xi - 2)
        ft = np.clip(t / g.dt, 0.0, g.n_t - 1)
        j = np.minimum(ft.astype(int), g.n_t - 2)
        ax = np.clip((xi - xs[i]) / (xs[i + 1] - xs[i]), 0.0, 1.0)
        at = ft - j
        v = self.values
        v00, v10 = v[i, j], v[i + 1, j]
        v01, v11 = v[i, j + 1], v[i + 1, j + 1]
        out = (1 - ax) * (1 - at) * v00 + ax * (1 - at) * v10 + (1 - ax) * at * v01 + ax * at * v11
        # diagonal cells: left column is the boundary node (0, t_{j+1}) at index i
        diag = (i < g.origin) & (g.start_index()[i] == j + 1)
        if np.any(diag):
            # corners (i, j+1) = 0 and (i+1, j) = 0 lie on the diagonal; the
            # admissible triangle has third corner (i+1, j+1)
            upper = ax + at >= 1.0
            tri = np.where(upper, (ax + at - 1.0) * v11, 0.0)
            out = np.where(diag, tri, out)
        return out

    def check_invariants(self, slack: float = MONOTONE_SLACK) -> dict[str, float]:
        """Measured violation of each flow invariant (0 means satisfied)."""
        g = self.grid
        mask = g.admissible()
        v = self.values
        start = g.start_index()
        out = {}
        corner = np.abs(v[np.arange(g.n_xi), start] - np.maximum(g.xi, 0.0))
        out["initial_condition"] = float(corner.max())
        both = mask[1:, :] & mask[:-1, :]
        dxi = np.where(both, v[:-1, :] - v[1:, :], 0.0)
        out["monotone_xi"] = float(max(0.0, dxi.max()))
        bt = mask[:, 1:] & mask[:, :-1]
        dtv = np.where(bt, v[:, :-1] - v[:, 1:], 0.0)
        out["monotone_t"] = float(max(0.0, dtv.max()))
        out["top_is_one"] = float(np.abs(v[-1, :] - 1.0).max())
        vm = v[mask]
        out["range"] = float(max(0.0, -vm.min(), vm.max() - 1.0))
        return out

    def assert_valid(self, slack: float = MONOTONE_SLACK) -> None:
        bad = {k: m for k, m in self.check_invariants().items() if m > slack}
        if bad:
            raise FlowInvariantError(
                "flow invariant violated: " + ", ".join(f"{k}={m:.3g}" for k, m in bad.items()))

    def to_csv(self, path, header=("xi", "t", "theta")) -> None:
        g = self.grid
        mask = g.admissible()
        xi, t = g.xi, g.t
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(g.n_xi):
                for j in np.nonzero(mask[i])[0]:
                    w.writerow([f"{xi[i]:.17g}", f"{t[j]:.17g}", f"{self.values[i, j]:.17g}"])


def identity_flow(grid: GridSpec) -> Flow:
    """The constant flow ``theta_0((y0, t0), t) = y0``."""
    vals = np.repeat(np.maximum(grid.xi, 0.0)[:, None], grid.n_t, axis=1)
    return Flow(grid, vals)


def flow_distance(a: Flow, b: Flow, t_index: int | None = None):
    """Sup distance over admissible ``xi`` at time node ``t_index``.

    With ``t_index=None`` returns the vector of distances for all time nodes.
    """
    if a.grid != b.grid:
        raise ValueError("flows live on different grids")
    diff = np.where(a.grid.admissible(), np.abs(a.values - b.values), 0.0)
    d = diff.max(axis=0)
    return d if t_index is None else float(d[t_index])


def gamma_line_integral(f, xi_upper: float, t: float, grid: GridSpec) -> float:
    """Line integral of ``f`` over ``{gamma' : xi(gamma') >= xi_upper}`` at time ``t``.

    Lengths along the boundary segment are measured in time and along the
    initial segment in space, so with ``xi`` both become ``d xi``.  ``f`` is a
    callable of ``xi`` or an array of values on ``grid.xi``; the trapezoid
    rule is used on the nodes of the range plus the endpoint ``xi_upper``.
    """
    if xi_upper < -t - 1e-12 or xi_upper > 1.0:
        raise ValueError("inadmissible (gamma, t) pair")
    xs = grid.xi
    inner = xs[xs > xi_upper]
    pts = np.concatenate([[xi_upper], inner])
    if callable(f):
        vals = np.asarray(f(pts), dtype=float)
    else:
        vals = np.interp(pts, xs, np.asarray(f, dtype=float))
    if pts.size < 2:
        return 0.0
    return float(np.sum(0.5 * np.diff(pts) * (vals[1:] + vals[:-1])))
