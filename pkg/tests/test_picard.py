import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixflow.grid import FlowInvariantError, GridSpec, flow_distance, identity_flow
from mixflow.model import Density, InitialDensity, RateFunction, RateMixture
from mixflow.picard import (EnvelopeViolation, NonConvergenceError, apply_G, check_derivative_bounds,
                            contraction_gap, envelope, low_k_G, monotone_flow, solve_fixed_point)
from mixflow.scenarios import builtin


def single(w, T=1.0):
    return RateMixture((w,), (1.0,), T), InitialDensity((Density(),))


@pytest.fixture(scope="module")
def grid():
    return GridSpec(1.0, 33, 33)


class TestApplyG:
    def test_zero_rates_give_identity(self, grid):
        mix, den = single(RateFunction.constant(0.0))
        G = apply_G(monotone_flow(grid, rate=2.0), mix, den)
        np.testing.assert_allclose(G.values, identity_flow(grid).values, atol=1e-15)

    @pytest.mark.parametrize("theta", ["identity", "wavy"])
    def test_constant_rate_closed_form(self, grid, theta):
        mix, den = single(RateFunction.constant(1.5))
        th = identity_flow(grid) if theta == "identity" else monotone_flow(grid, 2.0, 0.5, 1.0)
        G = apply_G(th, mix, den)
        y0 = grid.z[:, None]
        np.testing.assert_allclose(G.values[grid.origin:],
                                   1 - (1 - y0) * np.exp(-1.5 * grid.t[None, :]), atol=1e-14)

    def test_edges(self, grid):
        sc = builtin("affine", 33, 33)
        G = apply_G(monotone_flow(grid), sc.mixture, sc.density)
        idx = np.arange(grid.n_t - 1, 0, -1)
        assert np.abs(G.values[np.arange(grid.origin), idx]).max() < 1e-14
        assert np.all(G.values[-1] == 1.0)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.1, 3.0), st.floats(-1, 1), st.floats(-1, 1))
    def test_output_in_flow_class(self, rate, bump, wobble):
        g = GridSpec(1.0, 17, 17)
        sc = builtin("mixed", 17, 17)
        th = monotone_flow(g, rate=rate, bump=bump, wobble=wobble * rate)
        inv = apply_G(th, sc.mixture, sc.density, check=False).check_invariants()
        assert max(inv.values()) <= 1e-9

    def test_invariant_breach_raises(self, grid):
        # a negative rate pushes G out of the flow class
        mix, den = single(RateFunction.affine(1.0, -3.0))
        with pytest.raises(FlowInvariantError):
            apply_G(monotone_flow(grid, rate=2.0), mix, den)


class TestSolve:
    def test_zero(self, grid):
        mix, den = single(RateFunction.constant(0.0))
        res = solve_fixed_point(mix, den, grid)
        assert res.diagnostics.iterations == 1 and res.diagnostics.distances[0] <= 1e-15

    def test_constant_two_iterations(self, grid):
        mix, den = single(RateFunction.constant(1.0))
        res = solve_fixed_point(mix, den, grid)
        assert res.diagnostics.iterations == 2
        y0 = grid.z[:, None]
        np.testing.assert_allclose(res.flow.values[grid.origin:],
                                   1 - (1 - y0) * np.exp(-grid.t[None, :]), atol=1e-14)

    def test_affine_envelope_and_decrease(self, grid):
        sc = builtin("affine", 33, 33)
        res = solve_fixed_point(sc.mixture, sc.density, grid)
        d = res.diagnostics
        assert d.C == pytest.approx(2 * math.e**2)
        assert np.all(np.array(d.distances) <= np.array(d.envelopes) + 1e-6)
        assert np.all(np.diff(d.distances) < 0)

    def test_fixed_point_residual(self, grid):
        sc = builtin("mixed", 33, 33)
        res = solve_fixed_point(sc.mixture, sc.density, grid, tol=1e-8)
        G = apply_G(res.flow, sc.mixture, sc.density)
        assert flow_distance(G, res.flow).max() <= 2e-8

    def test_affine_grid_self_consistency(self):
        # coarse solutions converge to the fine one at second order
        sc = builtin("affine", 129, 129)
        fine = solve_fixed_point(sc.mixture, sc.density, sc.grid).flow
        errs = []
        for n in (17, 33, 65):
            s = builtin("affine", n, n)
            y = solve_fixed_point(s.mixture, s.density, s.grid).flow
            X, T = np.meshgrid(s.grid.xi, s.grid.t, indexing="ij")
            m = s.grid.admissible()
            errs.append(np.abs(fine.evaluate(X[m], T[m]) - y.values[m]).max())
        o = np.log2(np.array(errs[:-1]) / errs[1:])
        assert np.all(o > 1.7)

    def test_non_convergence(self, grid):
        sc = builtin("affine", 33, 33)
        with pytest.raises(NonConvergenceError) as exc:
            solve_fixed_point(sc.mixture, sc.density, grid, max_iter=3)
        assert len(exc.value.distances) == 3

    def test_envelope_violation(self, grid):
        # a negative slack makes even the first iterate exceed its envelope
        mix, den = single(RateFunction.constant(1.0))
        with pytest.raises(EnvelopeViolation):
            solve_fixed_point(mix, den, grid, theta0=monotone_flow(grid), envelope_slack=-1.0)

    def test_diagnostics_csv(self, grid, tmp_path):
        sc = builtin("affine", 33, 33)
        res = solve_fixed_point(sc.mixture, sc.density, grid)
        res.diagnostics.to_csv(tmp_path / "d.csv")
        rows = list(csv.reader(open(tmp_path / "d.csv")))
        assert rows[0] == ["iter", "d_k", "envelope_k", "seconds"]
        assert len(rows) == res.diagnostics.iterations + 1
        assert float(rows[3][2]) == envelope(res.diagnostics.C, 1.0, 2)


def test_envelope_formula():
    assert envelope(2.0, 1.5, 3) == pytest.approx(3.0**3 / 6)
    assert envelope(0.0, 1.0, 0) == 1.0 and envelope(0.0, 1.0, 4) == 0.0


class TestContraction:
    @settings(max_examples=10, deadline=None)
    @given(st.floats(0.2, 3.0), st.floats(0.2, 3.0), st.floats(-1, 1), st.floats(-1, 1))
    def test_lipschitz_inequality(self, ra, rb, ba, bb):
        g = GridSpec(1.0, 17, 17)
        sc = builtin("affine", 17, 17)
        gap = contraction_gap(monotone_flow(g, ra, ba), monotone_flow(g, rb, bb),
                              sc.mixture, sc.density)
        assert gap.max() <= 1e-6


class TestDerivativeBounds:
    def test_zero_rate(self, grid):
        mix, den = single(RateFunction.constant(0.0))
        rep = check_derivative_bounds(apply_G(identity_flow(grid), mix, den), mix)
        assert rep["dG_dy0"]["min"] == pytest.approx(1.0) and rep["dG_dy0"]["max"] == pytest.approx(1.0)
        assert rep["dG_dt_initial"]["max"] == 0.0

    def test_constant_rate_tight(self, grid):
        mix, den = single(RateFunction.constant(2.0))
        rep = check_derivative_bounds(apply_G(identity_flow(grid), mix, den), mix)
        # secant slope of 1 - e^{-2t} on the first cell
        h = grid.dt
        assert rep["dG_dt_initial"]["max"] == pytest.approx((1 - math.exp(-2 * h)) / h)
        assert all(r["passed"] for r in rep.values())

    @pytest.mark.parametrize("name", ["affine", "tabulated", "mixed", "sinusoidal"])
    def test_bounds_hold(self, name):
        sc = builtin(name, 33, 33)
        rep = check_derivative_bounds(apply_G(identity_flow(sc.grid), sc.mixture, sc.density),
                                    sc.mixture)
        assert all(r["passed"] for r in rep.values())


class TestLowK:
    def test_agrees_with_renewal_path(self):
        sc = builtin("low_rate", 17, 17)
        g = sc.grid
        th = monotone_flow(g, rate=0.3)
        G = apply_G(th, sc.mixture, sc.density).values[g.origin::-1]
        L = low_k_G(th, sc.mixture, sc.density, 3)
        up = np.triu(np.ones((g.n_t, g.n_t), dtype=bool))
        assert np.abs(G - L)[up].max() < 1e-5

    def test_truncation_visible_at_higher_rates(self):
        # with ||w|| T = 3 the k <= 1 series misses a visible share of the mass
        mix, den = single(RateFunction.constant(3.0))
        g = GridSpec(1.0, 17, 9)
        G = apply_G(identity_flow(g), mix, den).values[g.origin::-1]
        L = low_k_G(identity_flow(g), mix, den, 1)
        assert np.abs(G - L).max() > 1e-2
