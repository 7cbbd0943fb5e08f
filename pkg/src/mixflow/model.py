"""Evaporation-rate mixtures, initial densities and scenario validation.

A mixture is a finite family of rate functions ``w_a(y, t)`` on
``[0, 1] x [0, T]`` with weights ``r_a`` summing to one.  Each component
carries an initial density ``sigma_a`` on ``[0, 1]``; the pair must satisfy
the mixing identity ``sum_a r_a sigma_a(y) = 1`` and per-component
normalisation ``int sigma_a = 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial import polynomial as P

__all__ = [
    "ScenarioError",
    "TimeFactor",
    "RateFunction",
    "Density",
    "RateMixture",
    "InitialDensity",
    "ValidationReport",
    "validate_scenario",
    "eval_rate",
]

NORMALIZATION_TOL = 1e-8
WEIGHT_SUM_TOL = 1e-12

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


class ScenarioError(ValueError):
    """Raised when a scenario violates the standing assumptions."""


@dataclass(frozen=True)
class TimeFactor:
    """Non-negative time modulation ``b(t)`` of a separable rate.

    ``kind`` is one of ``constant`` (1), ``linear`` (1 + slope t),
    ``sin`` (1 + amplitude sin(2 pi frequency t)) or ``exp`` (exp(rate t)).
    """

    kind: str = "constant"
    slope: float = 0.0
    amplitude: float = 0.0
    frequency: float = 1.0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "sin", "exp"):
            raise ScenarioError(f"unknown time factor kind {self.kind!r}")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.ones_like(t)
        if self.kind == "linear":
            return 1.0 + self.slope * t
        if self.kind == "sin":
            return 1.0 + self.amplitude * np.sin(2 * np.pi * self.frequency * t)
        return np.exp(self.rate * t)

    def integral(self, t0, t1):
        """Exact ``int_{t0}^{t1} b(u) du``."""
        t0 = np.asarray(t0, dtype=float)
        t1 = np.asarray(t1, dtype=float)
        if self.kind == "constant":
            return t1 - t0
        if self.kind == "linear":
            return (t1 - t0) + 0.5 * self.slope * (t1**2 - t0**2)
        if self.kind == "sin":
            k = 2 * np.pi * self.frequency
            if k == 0.0:
                return t1 - t0
            return (t1 - t0) - self.amplitude / k * (np.cos(k * t1) - np.cos(k * t0))
        if self.rate == 0.0:
            return t1 - t0
        return (np.exp(self.rate * t1) - np.exp(self.rate * t0)) / self.rate

    def _critical_times(self, horizon: float) -> np.ndarray:
        pts = [0.0, horizon]
        if self.kind == "sin" and self.frequency != 0.0:
            # extrema of sin(2 pi f t) at t = (1/4 + n/2) / f
            f = abs(self.frequency)
            n = np.arange(0, math.ceil(2 * f * horizon) + 2)
            ext = (0.25 + 0.5 * n) / f
            pts.extend(ext[ext <= horizon])
        return np.asarray(pts)

    def extrema(self, horizon: float) -> tuple[float, float]:
        vals = self(self._critical_times(horizon))
        return float(vals.min()), float(vals.max())


@dataclass(frozen=True)
class RateFunction:
    """An evaporation rate ``w(y, t)``.

    Use the constructors :meth:`constant`, :meth:`separable`,
    :meth:`affine` and :meth:`tabulated` rather than the raw initialiser.
    Parametric kinds are evaluated exactly; the tabulated kind uses bilinear
    interpolation of ``values`` (shape ``(n_y, n_t)`` on uniform grids over
    ``[0, 1] x [0, horizon]``) and of the companion ``dwdy`` table.
    """

    kind: str
    coeffs: tuple[float, ...] = (0.0,)
    time: TimeFactor = field(default_factory=TimeFactor)
    values: np.ndarray | None = field(default=None, repr=False, compare=False)
    dwdy: np.ndarray | None = field(default=None, repr=False, compare=False)
    horizon: float | None = None

    # -- constructors ------------------------------------------------------
    @classmethod
    def constant(cls, c: float) -> "RateFunction":
        return cls(kind="constant", coeffs=(float(c),))

    @classmethod
    def separable(cls, coeffs: Sequence[float], time: TimeFactor | None = None) -> "RateFunction":
        """``a(y) * b(t)`` with ``a`` a polynomial (ascending coefficients)."""
        return cls(kind="separable", coeffs=tuple(float(c) for c in coeffs),
                   time=time or TimeFactor())

    @classmethod
    def affine(cls, c0: float, c1: float, time: TimeFactor | None = None) -> "RateFunction":
        return cls(kind="affine_in_y", coeffs=(float(c0), float(c1)), time=time or TimeFactor())

    @classmethod
    def tabulated(cls, values, dwdy, horizon: float) -> "RateFunction":
        values = np.array(values, dtype=float)
        dwdy = np.array(dwdy, dtype=float)
        if values.ndim != 2 or values.shape[0] < 2 or values.shape[1] < 2:
            raise ScenarioError("tabulated rate needs a (n_y >= 2, n_t >= 2) table")
        if dwdy.shape != values.shape:
            raise ScenarioError("dwdy table must match the shape of the value table")
        values.setflags(write=False)
        dwdy.setflags(write=False)
        return cls(kind="tabulated", values=values, dwdy=dwdy, horizon=float(horizon))

    # -- evaluation --------------------------------------------------------
    def _bilinear(self, table, y, t):
        n_y, n_t = table.shape
        fy = np.clip(np.asarray(y, dtype=float), 0.0, 1.0) * (n_y - 1)
        ft = np.clip(np.asarray(t, dtype=float) / self.horizon, 0.0, 1.0) * (n_t - 1)
        iy = np.minimum(fy.astype(int), n_y - 2)
        it = np.minimum(ft.astype(int), n_t - 2)
        ay = fy - iy
        at = ft - it
        return ((1 - ay) * (1 - at) * table[iy, it] + ay * (1 - at) * table[iy + 1, it]
                + (1 - ay) * at * table[iy, it + 1] + ay * at * table[iy + 1, it + 1])

    def __call__(self, y, t):
        y = np.asarray(y, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full(np.broadcast(y, t).shape, self.coeffs[0])
        if self.kind == "tabulated":
            return self._bilinear(self.values, y, t)
        return P.polyval(y, self.coeffs) * self.time(t)

    def dy(self, y, t):
        """Spatial derivative ``dw/dy``."""
        y = np.asarray(y, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.zeros(np.broadcast(y, t).shape)
        if self.kind == "tabulated":
            return self._bilinear(self.dwdy, y, t)
        return P.polyval(y, P.polyder(self.coeffs)) * self.time(t)

    @property
    def spatially_constant(self) -> bool:
        if self.kind == "constant":
            return True
        if self.kind == "tabulated":
            return bool(np.all(self.values == self.values[:1, :]))
        return all(c == 0.0 for c in self.coeffs[1:])

    def time_integral(self, t0, t1):
        """``int_{t0}^{t1} w(y, u) du`` for a spatially constant rate."""
        if not self.spatially_constant:
            raise ScenarioError("time_integral requires a spatially constant rate")
        if self.kind == "constant":
            return self.coeffs[0] * (np.asarray(t1, float) - np.asarray(t0, float))
        if self.kind == "tabulated":
            row = self.values[0]
            tt = np.linspace(0.0, self.horizon, row.size)
            cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(tt) * (row[1:] + row[:-1]))])

            def prim(t):
                t = np.clip(np.asarray(t, float), 0.0, self.horizon)
                i = np.minimum((t / tt[1]).astype(int), row.size - 2)
                d = t - tt[i]
                slope = (row[i + 1] - row[i]) / tt[1]
                return cum[i] + row[i] * d + 0.5 * slope * d * d

            return prim(t1) - prim(t0)
        return self.coeffs[0] * self.time.integral(t0, t1)

    # -- constants ---------------------------------------------------------
    def _poly_extrema(self, coeffs) -> tuple[float, float]:
        c = np.asarray(coeffs, dtype=float)
        pts = [0.0, 1.0]
        if c.size > 2:
            roots = P.polyroots(P.polyder(c))
            pts.extend(r.real for r in np.atleast_1d(roots)
                       if abs(r.imag) < 1e-12 and 0.0 <= r.real <= 1.0)
        vals = P.polyval(np.asarray(pts), c)
        return float(vals.min()), float(vals.max())

    def _product_range(self, coeffs, horizon):
        a_lo, a_hi = self._poly_extrema(coeffs)
        b_lo, b_hi = self.time.extrema(horizon)
        prods = [a_lo * b_lo, a_lo * b_hi, a_hi * b_lo, a_hi * b_hi]
        return min(prods), max(prods)

    def value_range(self, horizon: float) -> tuple[float, float]:
        """(inf, sup) of ``w`` over ``[0,1] x [0,horizon]``."""
        if self.kind == "constant":
            return self.coeffs[0], self.coeffs[0]
        if self.kind == "tabulated":
            return float(self.values.min()), float(self.values.max())
        return self._product_range(self.coeffs, horizon)

    def sup_norm(self, horizon: float) -> float:
        lo, hi = self.value_range(horizon)
        return max(abs(lo), abs(hi))

    def sup_dy(self, horizon: float) -> float:
        if self.kind == "constant":
            return 0.0
        if self.kind == "tabulated":
            return float(np.abs(self.dwdy).max())
        d = P.polyder(self.coeffs) if len(self.coeffs) > 1 else np.array([0.0])
        lo, hi = self._product_range(d, horizon)
        return max(abs(lo), abs(hi))

    def oscillation(self, horizon: float) -> float:
        lo, hi = self.value_range(horizon)
        return hi - lo


def eval_rate(w: RateFunction, y, t, horizon: float | None = None):
    """Evaluate ``w(y, t)``; rejects queries outside ``[0,1] x [0,T]``."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    T = horizon if horizon is not None else w.horizon
    if np.any((y < 0) | (y > 1)) or np.any(t < 0) or (T is not None and np.any(t > T)):
        raise ValueError("rate queried outside [0,1] x [0,T]")
    return w(y, t)


@dataclass(frozen=True)
class Density:
    """Initial density ``sigma`` on ``[0, 1]``.

    ``kind`` is ``uniform``, ``polynomial`` (ascending ``coeffs``) or
    ``tabulated`` (``values`` on a uniform grid, linear interpolation).
    """

    kind: str = "uniform"
    coeffs: tuple[float, ...] = (1.0,)
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("uniform", "polynomial", "tabulated"):
            raise ScenarioError(f"unknown density kind {self.kind!r}")
        if self.kind == "tabulated" and len(self.values) < 2:
            raise ScenarioError("tabulated density needs at least two values")

    @classmethod
    def polynomial(cls, coeffs) -> "Density":
        return cls(kind="polynomial", coeffs=tuple(float(c) for c in coeffs))

    @classmethod
    def tabulated(cls, values) -> "Density":
        return cls(kind="tabulated", values=tuple(float(v) for v in values))

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "uniform":
            return np.ones_like(z)
        if self.kind == "polynomial":
            return P.polyval(z, self.coeffs)
        v = np.asarray(self.values)
        return np.interp(z, np.linspace(0.0, 1.0, v.size), v)

    def breakpoints(self) -> np.ndarray:
        if self.kind == "tabulated":
            return np.linspace(0.0, 1.0, len(self.values))
        return np.array([0.0, 1.0])

    def hat_weights(self, z_nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integrals of ``sigma`` against the hat functions of ``z_nodes``.

        Returns ``(left, right)`` per cell ``[z_c, z_{c+1}]``: ``left[c]`` is
        ``int_cell sigma * hat_c`` and ``right[c]`` is ``int_cell sigma * hat_{c+1}``.
        Exact for the supported kinds (Gauss-Legendre on pieces between
        breakpoints), so ``sum(left + right) == int_0^1 sigma``.
        """
        z_nodes = np.asarray(z_nodes, dtype=float)
        bps = self.breakpoints()
        left = np.empty(z_nodes.size - 1)
        right = np.empty(z_nodes.size - 1)
        for c in range(z_nodes.size - 1):
            a, b = z_nodes[c], z_nodes[c + 1]
            cuts = np.concatenate([[a], bps[(bps > a) & (bps < b)], [b]])
            lo, hi = cuts[:-1, None], cuts[1:, None]
            x = 0.5 * (hi - lo) * _GL_X + 0.5 * (hi + lo)
            wq = 0.5 * (hi - lo) * _GL_W
            s = self(x) * wq
            frac = (x - a) / (b - a)
            left[c] = np.sum(s * (1 - frac))
            right[c] = np.sum(s * frac)
        return left, right

    def tail_mass(self, y0) -> np.ndarray:
        """Exact ``int_{y0}^1 sigma(z) dz``."""
        y0 = np.atleast_1d(np.asarray(y0, dtype=float))
        out = np.empty_like(y0)
        for i, a in enumerate(y0):
            bps = self.breakpoints()
            cuts = np.concatenate([[a], bps[bps > a]])
            if cuts[-1] < 1.0:
                cuts = np.append(cuts, 1.0)
            lo, hi = cuts[:-1, None], cuts[1:, None]
            x = 0.5 * (hi - lo) * _GL_X + 0.5 * (hi + lo)
            out[i] = np.sum(self(x) * 0.5 * (hi - lo) * _GL_W)
        return out


@dataclass(frozen=True)
class RateMixture:
    """Finite mixture ``{(w_a, r_a)}`` on the horizon ``[0, T]``."""

    rates: tuple[RateFunction, ...]
    weights: tuple[float, ...]
    horizon: float

    def __post_init__(self):
        if len(self.rates) != len(self.weights) or not self.rates:
            raise ScenarioError("need one weight per rate and at least one component")
        if self.horizon <= 0:
            raise ScenarioError("horizon must be positive")

    def __len__(self):
        return len(self.rates)

    @property
    def M_W(self) -> float:
        return float(sum(r * w.sup_norm(self.horizon) for w, r in zip(self.rates, self.weights)))

    @property
    def C_W(self) -> float:
        return float(max(w.sup_dy(self.horizon) for w in self.rates))

    @property
    def C_osc(self) -> float:
        return float(max(w.oscillation(self.horizon) for w in self.rates))

    @property
    def spatially_constant(self) -> bool:
        return all(w.spatially_constant for w in self.rates)

    def contraction_constant(self) -> float:
        """``2 C_W exp(2 C_W T)``, the Lipschitz constant of the flow map."""
        return 2.0 * self.C_W * math.exp(2.0 * self.C_W * self.horizon)


@dataclass(frozen=True)
class InitialDensity:
    """Per-component initial densities, aligned with a :class:`RateMixture`."""

    sigmas: tuple[Density, ...]

    def __len__(self):
        return len(self.sigmas)


@dataclass
class ValidationReport:
    M_W: float
    C_W: float
    C_osc: float
    checks: dict[str, tuple[bool, float]]

    @property
    def ok(self) -> bool:
        return all(passed for passed, _ in self.checks.values())

    def failures(self) -> list[str]:
        return [f"{name} (violation {mag:.3g})"
                for name, (passed, mag) in self.checks.items() if not passed]


def validate_scenario(mixture: RateMixture, density: InitialDensity, n_check: int = 129,
                      raise_on_failure: bool = True) -> ValidationReport:
    """Compute ``M_W``, ``C_W``, ``C_osc`` and check the standing assumptions.

    Each check records whether it passed and the measured violation.  With
    ``raise_on_failure`` (the default) a failing scenario raises
    :class:`ScenarioError`.
    """
    if len(density) != len(mixture):
        raise ScenarioError("density and mixture have different numbers of components")
    T = mixture.horizon
    y = np.linspace(0.0, 1.0, n_check)
    t = np.linspace(0.0, T, n_check)
    Y, Tg = np.meshgrid(y, t, indexing="ij")
    r = np.asarray(mixture.weights, dtype=float)

    checks = {}
    checks["weights_nonnegative"] = (bool(np.all(r >= 0)), float(max(0.0, -r.min())))
    wsum = abs(r.sum() - 1.0)
    checks["weights_sum_to_one"] = (wsum <= WEIGHT_SUM_TOL, float(wsum))
    neg = max(0.0, -min(float(np.min(w(Y, Tg))) for w in mixture.rates))
    checks["rates_nonnegative"] = (neg == 0.0, neg)
    finite = all(np.isfinite(w.sup_norm(T)) and np.isfinite(w.sup_dy(T)) for w in mixture.rates)
    checks["constants_finite"] = (finite, 0.0 if finite else float("inf"))

    sig = np.array([s(y) for s in density.sigmas])
    sneg = max(0.0, -float(sig.min()))
    checks["density_nonnegative"] = (sneg == 0.0, sneg)
    mix = float(np.abs(r @ sig - 1.0).max())
    checks["mixing_identity"] = (mix <= NORMALIZATION_TOL, mix)
    norm = max(abs(float(s.tail_mass(0.0)[0]) - 1.0) for s in density.sigmas)
    checks["density_normalized"] = (norm <= NORMALIZATION_TOL, norm)

    report = ValidationReport(mixture.M_W, mixture.C_W, mixture.C_osc, checks)
    if raise_on_failure and not report.ok:
        raise ScenarioError("scenario rejected: " + "; ".join(report.failures()))
    return report
