import numpy as np
import pytest

from mkvsim import model as mdl
from mkvsim.model import (
    ConstantsLedger,
    build_model,
    check_assumptions,
    kappa_canonical,
    make_custom,
    make_double_well,
    make_ou_variant,
    make_variance_counterexample,
    ou_fixed_points,
)


def dw(alpha=8.0, A=1.5, sigma=0.1, sigma0=0.5):
    return make_double_well(alpha, A, sigma, sigma0)


class TestDoubleWell:
    def test_drift_and_interaction_values(self):
        m = dw()
        assert m.g(np.array([0.5]))[0] == pytest.approx(0.375, abs=1e-15)  # 0.5 - 0.125
        assert m.f(np.array([-2.0]))[0] == pytest.approx(16.0, abs=1e-15)  # -8 * (-2)

    def test_lipschitz_constant_against_grid_maximization(self):
        # oracle: maximize |1 - 3 x^2| over a dense grid on [-A, A]
        x = np.linspace(-1.5, 1.5, 200_001)
        oracle = np.max(np.abs(1.0 - 3.0 * x * x))
        m = dw()
        assert m.constants.L_G == pytest.approx(5.75, abs=1e-12)
        assert m.constants.L_G == pytest.approx(oracle, rel=1e-9)

    def test_ledger_values(self):
        m = dw()
        led = m.constants
        assert led.m_G == -1.0
        assert led.C_G == 9.0
        assert led.C_F == 0.0
        assert led.c_alpha == led.alpha_F - led.L_G == 2.25

    def test_rejects_destroyed_double_well(self):
        with pytest.raises(ValueError):
            make_double_well(8.0, 1.0, 0.1, 0.5)
        with pytest.raises(ValueError):
            make_double_well(8.0, 0.5, 0.1, 0.5)

    def test_weak_interaction_warns_on_c_alpha(self):
        with pytest.warns(UserWarning, match="c_alpha"):
            make_double_well(2.0, 1.5, 0.1, 0.5)

    def test_drift_is_continuous_at_truncation(self):
        m = dw()
        eps = 1e-10
        inside = m.g(np.array([1.5 - eps]))[0]
        outside = m.g(np.array([1.5 + eps]))[0]
        assert inside == pytest.approx(outside, abs=1e-8)


class TestKappa:
    def test_linear_pull_kappa_is_constant(self):
        # G(x) = -x with sigma0 = 1: slope quotient is -1 everywhere
        m = make_variance_counterexample(2.0, sigma0=1.0)
        for r in (0.01, 1.0, 10.0):
            assert m.kappa(r) == pytest.approx(2.0, abs=1e-12)
            assert kappa_canonical(m, r) == pytest.approx(2.0, abs=1e-9)

    def test_double_well_kappa_near_zero(self):
        # worst slope +1 at the origin gives kappa(0+) = -2 at sigma0 = 1
        m = dw(sigma0=1.0)
        assert m.kappa(1e-6) == pytest.approx(-2.0, abs=1e-5)
        # derived oracle: grid scan of (G(x+r)-G(x))/r
        assert kappa_canonical(m, 1e-3) == pytest.approx(-2.0, abs=1e-3)

    def test_double_well_kappa_positive_at_large_r(self):
        m = dw(sigma0=1.0)
        for r in (5.0, 10.0, 40.0):
            assert m.kappa(r) > 0
            assert kappa_canonical(m, r) > 0

    def test_closed_form_matches_midpoint_scan(self):
        m = dw(sigma0=0.7)
        for r in (0.25, 1.0, 2.0, 2.9, 3.0, 3.5, 7.0, 20.0):
            assert m.kappa(r) == pytest.approx(kappa_canonical(m, r), rel=1e-9, abs=1e-9)

    def test_integrability_proxy_is_finite_for_builtins(self):
        models = [
            dw(sigma0=1.0),
            make_ou_variant(1.0, None, 0.2, 0.5),
            make_variance_counterexample(2.0, sigma0=0.5),
        ]
        for m in models:
            r = np.geomspace(1e-3, 1.0, 512)
            est = float(np.trapezoid(r * np.maximum(0.0, -m.kappa(r)), r))
            assert est < 1e3

    def test_kappa_requires_positive_inputs(self):
        m = dw(sigma0=1.0)
        with pytest.raises(ValueError):
            kappa_canonical(m, 0.0)
        with pytest.raises(ValueError):
            kappa_canonical(dw(sigma0=0.0), 1.0)


class TestOuVariant:
    def test_drift_at_two_is_minus_two(self):
        m = make_ou_variant(1.0, None, 0.2, 0.5)
        assert m.g_eff(np.array([2.0]))[0] == pytest.approx(-2.0, abs=1e-15)

    def test_fixed_points_of_cubic_forcing(self):
        # f(m) = m^3 clipped to [-8, 8]; fixed points of f/a are 0, +-1
        def f_map(m):
            return np.clip(np.asarray(m, dtype=float) ** 3, -8.0, 8.0)

        roots = ou_fixed_points(1.0, f_map, lo=-3.0, hi=3.0)
        assert len(roots) == 3
        assert roots == pytest.approx([-1.0, 0.0, 1.0], abs=1e-9)

    def test_zero_forcing_single_fixed_point(self):
        assert ou_fixed_points(1.0, None) == [0.0]

    def test_mean_drift_reconstructs_full_drift(self):
        # particle drift must equal -a x + f(mean)
        def f_map(m):
            return np.sin(np.asarray(m, dtype=float))

        m = make_ou_variant(2.0, f_map, 0.1, 0.3)
        x = np.array([[0.5], [1.0], [-2.0]])
        mean = np.array([0.7])
        drift = m.g(x) + m.f(x - mean) + m.mean_drift(mean)
        expected = -2.0 * x + np.sin(0.7)
        assert np.allclose(drift, expected, atol=1e-14)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            make_ou_variant(0.0, None, 0.1, 0.1)


class TestVarianceCounterexample:
    def test_constant_intensity_stationary_variance(self):
        # sigma(v) = 2: stationary v* solves -2v + sigma^2/2 = 0 -> v* = 1
        m = make_variance_counterexample(2.0, sigma0=0.5)
        assert m.sigma_of_variance(0.3) == 2.0
        v_star = 0.5 * m.sigma_of_variance(1.0) ** 2 / 2.0
        assert v_star == 1.0

    def test_rejects_nonpositive_intensity(self):
        with pytest.raises(ValueError):
            make_variance_counterexample(lambda v: v - 1.0, sigma0=0.5)
        with pytest.raises(ValueError):
            make_variance_counterexample(0.0, sigma0=0.5)

    def test_ledger(self):
        m = make_variance_counterexample(2.0, sigma0=0.5)
        assert m.constants.L_G == 1.0
        assert m.constants.m_G == 1.0
        assert m.constants.alpha_F == 0.0
        assert m.constants.c_alpha < 0  # excluded from variance-bound runs


class TestCheckAssumptions:
    def test_builtins_pass_at_closed_form_tolerance(self):
        models = [
            dw(sigma0=0.5),
            dw(sigma0=0.0),
            make_ou_variant(1.0, None, 0.2, 0.5),
            make_variance_counterexample(2.0, sigma0=0.5),
        ]
        for m in models:
            report = check_assumptions(m, sample_count=10_000, tolerance=1e-9)
            assert report.passed, report.summary()

    def test_strong_interaction_witness(self):
        # F(z) = -8z: monotonicity passes and the witnessed rate reaches 8
        m = dw(alpha=8.0)
        report = check_assumptions(m)
        assert report.clause("A2-monotone").passed
        rng_ = np.random.default_rng(1)
        x, y = rng_.uniform(-5, 5, 1000), rng_.uniform(-5, 5, 1000)
        keep = np.abs(x - y) > 1e-6
        x, y = x[keep], y[keep]
        witnessed = np.min(-(x - y) * (m.f(x) - m.f(y)) / (x - y) ** 2)
        assert witnessed >= 8.0 - 1e-9

    def test_anti_confining_drift_fails(self):
        # G(x) = x: kappa is negative at every radius, no confining tail
        m = make_custom(
            g=lambda x: np.asarray(x, dtype=float),
            f=lambda z: -2.0 * np.asarray(z, dtype=float),
            sigma=0.1,
            sigma0=1.0,
        )
        report = check_assumptions(m, tolerance=1e-6)
        clause = report.clause("A1.1-confinement")
        assert not clause.passed
        assert clause.witness is not None

    def test_double_well_lipschitz_witness(self):
        m = dw()
        report = check_assumptions(m)
        assert report.clause("A1.2-lipschitz").passed
        # grid maximization: witnessed L_G never exceeds the ledger value
        x = np.linspace(-10, 10, 20_001)
        ratios = np.abs(np.diff(m.g(x))) / np.diff(x)
        assert np.max(ratios) <= 5.75 + 1e-9

    def test_sample_count_validated(self):
        with pytest.raises(ValueError):
            check_assumptions(dw(), sample_count=10)

    def test_summary_renders(self):
        text = check_assumptions(dw()).summary()
        assert "A1.2-lipschitz" in text and "pass" in text


class TestCustomAndBuild:
    def test_estimate_constants_linear_model(self):
        ledger, margin = mdl.estimate_constants(
            g=lambda x: -3.0 * np.asarray(x, dtype=float),
            f=lambda z: -2.0 * np.asarray(z, dtype=float),
        )
        assert ledger.L_G == pytest.approx(3.0, rel=1e-6)
        assert ledger.m_G == pytest.approx(3.0, rel=1e-6)
        assert ledger.alpha_F == pytest.approx(2.0, rel=1e-6)
        assert ledger.C_G == pytest.approx(0.0, abs=1e-6)
        assert margin == mdl.GRID_REL_TOL

    def test_build_model_round_trips_builtins(self):
        m = build_model("double_well", {"alpha": 8.0, "A": 1.5, "sigma": 0.1, "sigma0": 0.5})
        assert m.model_id == "double_well"
        assert m.build_args is not None
        m2 = build_model(*m.build_args)
        assert m2.constants == m.constants
        ou = build_model("ou_variant", {"a": 1.0, "sigma": 0.2, "sigma0": 0.5})
        assert ou.build_args is not None
        vc = build_model(
            "variance_counterexample",
            {"sigma_v_kind": "sqrt_floor", "sigma_v_scale": 2.0, "sigma_v_floor": 0.01, "sigma0": 0.5},
        )
        assert vc.sigma_of_variance(0.0) == pytest.approx(2.0 * np.sqrt(0.01))
        assert vc.build_args is not None

    def test_build_model_unknown_id(self):
        with pytest.raises(ValueError, match="model_id"):
            build_model("nope", {})
        with pytest.raises(ValueError, match="sigma_v_kind"):
            build_model("variance_counterexample", {"sigma_v_kind": "bogus", "sigma0": 0.5})

    def test_ledger_identity(self):
        led = ConstantsLedger(alpha_F=3.0, L_G=1.25, C_G=0.0, C_F=0.0, m_G=0.5)
        assert led.c_alpha == 3.0 - 1.25
