import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixflow.model import (Density, InitialDensity, RateFunction, RateMixture, ScenarioError,
                           TimeFactor, eval_rate, validate_scenario)


def mixture(rates, weights, T=1.0):
    return RateMixture(tuple(rates), tuple(weights), T)


def uniform(m=1):
    return InitialDensity(tuple(Density() for _ in range(m)))


class TestValidateScenario:
    def test_single_constant(self):
        rep = validate_scenario(mixture([RateFunction.constant(2.0)], [1.0]), uniform())
        assert rep.M_W == 2.0 and rep.C_W == 0.0
        assert rep.ok

    def test_two_constants(self):
        mix = mixture([RateFunction.constant(1.0), RateFunction.constant(3.0)], [0.5, 0.5])
        assert validate_scenario(mix, uniform(2)).M_W == pytest.approx(2.0, abs=1e-15)

    def test_affine(self):
        rep = validate_scenario(mixture([RateFunction.affine(1.0, 1.0)], [1.0]), uniform())
        assert rep.C_W == 1.0 and rep.M_W == 2.0 and rep.C_osc == 1.0

    def test_weights_must_sum_to_one(self):
        mix = mixture([RateFunction.constant(1.0)] * 2, [0.45, 0.45])
        with pytest.raises(ScenarioError, match="weights_sum_to_one"):
            validate_scenario(mix, uniform(2))

    def test_negative_weight(self):
        mix = mixture([RateFunction.constant(1.0)] * 2, [1.5, -0.5])
        rep = validate_scenario(mix, uniform(2), raise_on_failure=False)
        assert not rep.checks["weights_nonnegative"][0]
        assert rep.checks["weights_nonnegative"][1] == 0.5

    def test_negative_rate(self):
        rep = validate_scenario(mixture([RateFunction.affine(1.0, -2.0)], [1.0]), uniform(),
                                raise_on_failure=False)
        assert not rep.ok and rep.checks["rates_nonnegative"][1] == pytest.approx(1.0)

    def test_mixing_identity(self):
        # each density is normalised but the mixture is not flat
        sig = InitialDensity((Density.polynomial([0.5, 1.0]), Density.polynomial([0.5, 1.0])))
        mix = mixture([RateFunction.constant(1.0)] * 2, [0.5, 0.5])
        rep = validate_scenario(mix, sig, raise_on_failure=False)
        assert not rep.checks["mixing_identity"][0]
        assert rep.checks["density_normalized"][0]

    def test_complementary_densities_pass(self):
        sig = InitialDensity((Density.polynomial([0.5, 1.0]), Density.polynomial([1.5, -1.0])))
        mix = mixture([RateFunction.constant(1.0)] * 2, [0.5, 0.5])
        assert validate_scenario(mix, sig).ok

    def test_component_count_mismatch(self):
        with pytest.raises(ScenarioError):
            validate_scenario(mixture([RateFunction.constant(1.0)], [1.0]), uniform(2))


class TestEvalRate:
    def test_constant(self):
        assert eval_rate(RateFunction.constant(2.0), 0.3, 1.0, horizon=1.0) == 2.0

    def test_affine(self):
        assert eval_rate(RateFunction.affine(1.0, 1.0), 0.5, 0.7, horizon=1.0) == 1.5

    def test_tabulated_constant_table(self):
        w = RateFunction.tabulated(np.full((5, 4), 2.0), np.zeros((5, 4)), 1.0)
        assert eval_rate(w, 0.37, 0.81) == pytest.approx(2.0)

    @pytest.mark.parametrize("y,t", [(-0.1, 0.5), (1.1, 0.5), (0.5, -0.1), (0.5, 1.5)])
    def test_out_of_domain(self, y, t):
        with pytest.raises(ValueError):
            eval_rate(RateFunction.constant(1.0), y, t, horizon=1.0)


class TestTimeFactor:
    @pytest.mark.parametrize("tf", [TimeFactor(), TimeFactor("linear", slope=0.7),
                                    TimeFactor("sin", amplitude=0.5, frequency=1.5),
                                    TimeFactor("exp", rate=-0.8)])
    def test_integral_matches_quadrature(self, tf):
        x, w = np.polynomial.legendre.leggauss(30)
        t = 0.5 * (x + 1) * 1.3
        assert tf.integral(0.0, 1.3) == pytest.approx(np.sum(tf(t) * w) * 0.65, rel=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ScenarioError):
            TimeFactor("cubic")


class TestConstants:
    def test_parametric_vs_tabulated_norm(self):
        w = RateFunction.separable([0.5, 1.0, -0.6], TimeFactor("sin", amplitude=0.3))
        y = np.linspace(0, 1, 2001)[:, None]
        t = np.linspace(0, 1, 2001)[None, :]
        assert w.sup_norm(1.0) == pytest.approx(np.abs(w(y, t)).max(), abs=1e-6)

    @pytest.mark.parametrize("w", [RateFunction.affine(1.0, 1.0),
                                   RateFunction.separable([0.2, 0.5, 0.9], TimeFactor("linear", slope=1)),
                                   RateFunction.separable([1.0, -0.5, 0.3],
                                                          TimeFactor("sin", amplitude=0.4))])
    def test_dy_matches_central_difference(self, w):
        h = 1e-4
        y = np.linspace(0.1, 0.9, 9)[:, None]
        t = np.linspace(0, 1, 7)[None, :]
        fd = (w(y + h, t) - w(y - h, t)) / (2 * h)
        assert np.abs(fd - w.dy(y, t)).max() < 1e-7

    def test_c_w_is_sup_of_derivative(self):
        w = RateFunction.separable([0.0, 1.0, 1.0])     # y + y^2, derivative up to 3
        mix = mixture([w], [1.0])
        assert mix.C_W == pytest.approx(3.0)

    def test_contraction_constant(self):
        mix = mixture([RateFunction.affine(1.0, 1.0)], [1.0])
        assert mix.contraction_constant() == pytest.approx(2 * np.e**2)

    def test_time_integral_requires_flat_rate(self):
        with pytest.raises(ScenarioError):
            RateFunction.affine(1.0, 1.0).time_integral(0.0, 1.0)

    def test_tabulated_time_integral_exact_for_linear_rows(self):
        t = np.linspace(0, 2.0, 5)
        vals = np.repeat((1.0 + 0.5 * t)[None, :], 3, axis=0)
        w = RateFunction.tabulated(vals, np.zeros_like(vals), 2.0)
        assert w.time_integral(0.3, 1.7) == pytest.approx(1.4 + 0.25 * (1.7**2 - 0.3**2))


class TestDensity:
    @pytest.mark.parametrize("d", [Density(), Density.polynomial([0.5, 1.0]),
                                   Density.tabulated([0.2, 1.4, 1.0, 1.4])])
    def test_hat_weights_sum_to_integral(self, d):
        z = np.linspace(0, 1, 17)
        left, right = d.hat_weights(z)
        assert left.sum() + right.sum() == pytest.approx(float(d.tail_mass(0.0)[0]), abs=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 1.0))
    def test_tail_mass_polynomial(self, y0):
        d = Density.polynomial([0.5, 1.0])
        exact = 0.5 * (1 - y0) + 0.5 * (1 - y0**2)
        assert float(d.tail_mass(y0)[0]) == pytest.approx(exact, abs=1e-13)
