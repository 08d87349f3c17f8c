import math

import numpy as np
import pytest

from mkvsim.ensemble import (
    NonFiniteError,
    ParticleEnsemble,
    StabilityError,
    em_step,
    empirical_stats,
    sample_initial,
    simulate,
    simulate_batch,
    trajectory_to_csv,
)
from mkvsim.model import (
    ConstantsLedger,
    make_custom,
    make_double_well,
    make_ou_variant,
    make_variance_counterexample,
)
from mkvsim.rng import ROLE_INIT, derive_stream, stream_set

ZERO_LEDGER = ConstantsLedger(alpha_F=0.0, L_G=0.0, C_G=0.0, C_F=0.0, m_G=0.0)


def zero(x):
    return np.zeros_like(x)


def free_model(sigma=0.0, sigma0=0.0):
    return make_custom(zero, zero, sigma=sigma, sigma0=sigma0, constants=ZERO_LEDGER)


def pull_to_mean(rate=1.0, sigma=0.0, sigma0=0.0):
    led = ConstantsLedger(alpha_F=rate, L_G=0.0, C_G=0.0, C_F=0.0, m_G=0.0)
    return make_custom(
        zero, lambda z: -rate * np.asarray(z, dtype=float), sigma=sigma, sigma0=sigma0,
        constants=led,
    )


def ens_of(model, positions):
    e = ParticleEnsemble(positions=np.asarray(positions, dtype=float)[:, None], model=model)
    e.particles_rng = derive_stream(0, 0, 2)
    return e


class TestEmStep:
    def test_no_forces_no_noise_positions_unchanged(self):
        e = ens_of(free_model(), [0.3, -1.2, 5.0])
        before = e.positions.copy()
        em_step(e, 0.1, np.zeros(1))
        assert np.array_equal(e.positions, before)

    def test_two_particles_pulled_toward_mean(self):
        # F(z) = -z, dt = 0.1, particles {0, 2}: each moves 0.1 toward mean 1
        e = ens_of(pull_to_mean(1.0), [0.0, 2.0])
        em_step(e, 0.1, np.zeros(1))
        assert e.positions[:, 0] == pytest.approx([0.1, 1.9], abs=1e-15)

    def test_common_noise_is_a_rigid_shift(self):
        m = free_model(sigma0=1.0)
        e = ens_of(m, [0.0, 1.0, 2.0])
        _, _, v0 = empirical_stats(e)
        em_step(e, 0.05, np.array([0.25]))
        assert e.positions[:, 0] == pytest.approx([0.25, 1.25, 2.25], abs=1e-15)
        _, _, v1 = empirical_stats(e)
        assert v1 == pytest.approx(v0, abs=1e-15)

    def test_stability_guard(self):
        m = make_double_well(8.0, 1.5, 0.1, 0.5)  # L_G = 5.75
        e = ens_of(m, [0.0, 1.0])
        with pytest.raises(StabilityError):
            em_step(e, 0.1, np.zeros(1))

    def test_nonfinite_fault_names_step_and_particle(self):
        bad = make_custom(
            g=lambda x: np.where(np.asarray(x) > 0, np.nan, 0.0),
            f=zero,
            sigma=0.0,
            sigma0=0.0,
            constants=ZERO_LEDGER,
        )
        e = ens_of(bad, [-1.0, 1.0])
        e.step_index = 41
        with pytest.raises(NonFiniteError) as exc:
            em_step(e, 0.01, np.zeros(1))
        assert exc.value.step == 41
        assert exc.value.particle == 1

    def test_state_dependent_intensity_queries_variance(self):
        seen = []

        def sv(v):
            seen.append(v)
            return 1.0

        m = make_variance_counterexample(sv, sigma0=0.0)
        e = ens_of(m, [-1.0, 1.0])
        em_step(e, 0.01, np.zeros(1))
        assert seen[-1] == pytest.approx(1.0)  # pre-step empirical variance of {-1, 1}


class TestEmpiricalStats:
    def test_symmetric_pair(self):
        e = ens_of(free_model(), [-1.0, 1.0])
        mu1, mu2, v = empirical_stats(e)
        assert mu1[0] == 0.0 and mu2 == 1.0 and v == 1.0

    def test_point_mass(self):
        e = ens_of(free_model(), [1.0, 1.0, 1.0])
        mu1, mu2, v = empirical_stats(e)
        assert mu1[0] == 1.0 and mu2 == 1.0 and v == 0.0

    def test_population_divisor(self):
        # direct arithmetic oracle on {0, 1, 2, 3}
        xs = np.array([0.0, 1.0, 2.0, 3.0])
        mean = xs.sum() / 4.0
        oracle = float(((xs - mean) ** 2).sum() / 4.0)
        assert oracle == 1.25
        e = ens_of(free_model(), xs)
        _, _, v = empirical_stats(e)
        assert v == pytest.approx(1.25, abs=1e-15)

    def test_requires_two_particles(self):
        with pytest.raises(ValueError):
            ParticleEnsemble(positions=np.array([[1.0]]), model=free_model())


class TestSampleInitial:
    def test_point_mass(self):
        e = sample_initial("point_mass", {"at": 1.0}, 4, derive_stream(0, 0, ROLE_INIT), free_model())
        assert np.array_equal(e.positions, np.ones((4, 1)))

    def test_two_point_law_moments(self):
        e = sample_initial(
            "two_point", {"a": -1.0, "b": 1.0}, 200_000, derive_stream(1, 0, ROLE_INIT), free_model()
        )
        mu1, _, v = empirical_stats(e)
        assert abs(mu1[0]) < 0.01
        assert v == pytest.approx(1.0, abs=0.01)

    def test_gaussian_variance_within_chi_square_error(self):
        n = 100_000
        var = 0.25
        e = sample_initial(
            "gaussian", {"mean": 0.0, "var": var}, n, derive_stream(2, 0, ROLE_INIT), free_model()
        )
        _, _, v = empirical_stats(e)
        se = var * math.sqrt(2.0 / (n - 1))  # chi-square std error of a variance estimate
        assert abs(v - var) <= 3 * se

    def test_rejects_bad_params(self):
        rng_ = derive_stream(0, 0, ROLE_INIT)
        with pytest.raises(ValueError):
            sample_initial("gaussian", {"mean": 0.0, "var": -1.0}, 10, rng_, free_model())
        with pytest.raises(ValueError):
            sample_initial("bogus", {}, 10, rng_, free_model())
        with pytest.raises(ValueError):
            sample_initial("point_mass", {"at": 0.0}, 1, rng_, free_model())


class TestSimulate:
    def test_linear_contraction_matches_discrete_map(self):
        # sigma = sigma0 = 0, F(z) = -z: centered spread scales by (1-dt) per step
        m = pull_to_mean(1.0)
        dt, steps = 0.1, 10
        traj = simulate(
            m, 64, dt, dt * steps, 3, record_every=1, init=("gaussian", {"mean": 0.0, "var": 1.0})
        )
        expected = traj.v[0] * (1.0 - dt) ** (2 * np.arange(steps + 1))
        assert np.allclose(traj.v, expected, rtol=1e-10)

    def test_double_well_metastability(self):
        # no common noise, small sigma, started in the +1 well: the mean stays there
        m = make_double_well(8.0, 1.5, 0.05, 0.0)
        traj = simulate(m, 128, 0.005, 20.0, 11, record_every=100, init=("point_mass", {"at": 1.0}))
        assert np.all(np.abs(traj.mu1[:, 0] - 1.0) < 0.3)

    def test_ou_variant_stationary_variance(self):
        # v(T large) -> sigma^2 / (2a) = 0.02
        m = make_ou_variant(1.0, None, 0.2, 0.5)
        traj = simulate(m, 2048, 0.002, 10.0, 5, record_every=500, init=("point_mass", {"at": 1.0}))
        assert traj.v[-1] == pytest.approx(0.02, abs=0.004)

    def test_determinism_bit_identical(self):
        m = make_double_well(8.0, 1.5, 0.1, 0.5)
        a = simulate(m, 64, 0.01, 1.0, 77, record_every=5, init=("gaussian", {"mean": 0, "var": 1}))
        b = simulate(m, 64, 0.01, 1.0, 77, record_every=5, init=("gaussian", {"mean": 0, "var": 1}))
        assert np.array_equal(a.times, b.times)
        assert np.array_equal(a.mu1, b.mu1)
        assert np.array_equal(a.mu2, b.mu2)
        assert np.array_equal(a.v, b.v)

    def test_common_noise_equivariance(self):
        # sigma = 0, F = G = 0: two realizations with matched init/particle
        # channels differ only by the cumulative common increment; the variance
        # series agree to the last bit up to IEEE rounding of the shifts.
        m = free_model(sigma0=1.0)
        init = ("gaussian", {"mean": 0.0, "var": 1.0})
        sa = stream_set(9, 0, particle_realization=0, init_realization=0)
        sb = stream_set(9, 1, particle_realization=0, init_realization=0)
        ta = simulate(m, 64, 0.01, 1.0, 9, 0, record_every=10, init=init, streams=sa)
        tb = simulate(m, 64, 0.01, 1.0, 9, 1, record_every=10, init=init, streams=sb)
        assert not np.array_equal(ta.mu1, tb.mu1)  # the common paths differ
        assert np.allclose(ta.v, tb.v, rtol=0, atol=1e-13)

    def test_positions_shift_by_cumulative_increment(self):
        m = free_model(sigma0=0.5)
        streams = stream_set(4, 0)
        shadow = stream_set(4, 0)
        traj = simulate(m, 8, 0.01, 0.5, 4, record_every=50, init=("point_mass", {"at": 0.0}), streams=streams)
        increments = shadow.common.standard_normal((50, 1)) * math.sqrt(0.01)
        assert traj.mu1[-1, 0] == pytest.approx(0.5 * increments.sum(), abs=1e-12)

    def test_weak_order_one_dt_refinement(self):
        # deterministic branch of the OU variant: halving dt halves the mean error
        m = make_ou_variant(1.0, None, 0.0, 0.0)
        errs = []
        for dt in (0.02, 0.01, 0.005):
            traj = simulate(m, 4, dt, 2.0, 0, record_every=10**6, init=("point_mass", {"at": 1.0}))
            errs.append(abs(traj.mu1[-1, 0] - math.exp(-2.0)))
        assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.1)
        assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.1)

    def test_recording_includes_endpoints(self):
        m = free_model()
        traj = simulate(m, 4, 0.01, 0.105, 0, record_every=4)
        # 10 steps (rounded), records at 0, 4, 8, 10
        assert traj.times[0] == 0.0
        assert traj.times[-1] == pytest.approx(0.1, abs=1e-12)
        assert len(traj.times) == 4

    def test_validation(self):
        m = free_model()
        with pytest.raises(ValueError):
            simulate(m, 4, 0.1, 0.0, 0)
        with pytest.raises(ValueError):
            simulate(m, 4, 0.2, 0.1, 0)
        with pytest.raises(ValueError):
            simulate(m, 4, 0.01, 1.0, 0, record_every=0)


class TestBatch:
    def test_batch_matches_single_runs(self):
        m = make_double_well(8.0, 1.5, 0.1, 0.5)
        runs = simulate_batch(m, 32, 0.01, 0.5, 21, 3, record_every=10)
        for r, traj in enumerate(runs):
            solo = simulate(m, 32, 0.01, 0.5, 21, r, record_every=10)
            assert np.array_equal(traj.v, solo.v)

    def test_share_common_pins_the_noise_path(self):
        m = free_model(sigma0=1.0)
        runs = simulate_batch(
            m, 16, 0.01, 0.5, 8, 3, record_every=50,
            init=("point_mass", {"at": 0.0}), share_common=True,
        )
        finals = [t.mu1[-1, 0] for t in runs]
        assert finals[0] == finals[1] == finals[2]

    def test_workers_requires_plain_data_model(self):
        with pytest.raises(ValueError, match="build_args"):
            simulate_batch(free_model(), 8, 0.01, 0.1, 0, 2, workers=2)

    def test_per_realization_inits(self):
        m = free_model()
        runs = simulate_batch(
            m, 4, 0.01, 0.1, 0, 2,
            inits=[("point_mass", {"at": 1.0}), ("point_mass", {"at": -1.0})],
        )
        assert runs[0].mu1[0, 0] == 1.0
        assert runs[1].mu1[0, 0] == -1.0


class TestCsv:
    def test_header_and_roundtrip(self, tmp_path):
        m = free_model(sigma0=1.0)
        traj = simulate(m, 8, 0.01, 0.2, 13, record_every=5)
        path = tmp_path / "traj.csv"
        trajectory_to_csv(traj, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,mu1_0,mu2,v"
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        assert np.array_equal(data[:, 0], traj.times)
        assert np.array_equal(data[:, 3], traj.v)  # 17 sig digits round-trip exactly

    def test_extra_columns(self, tmp_path):
        m = free_model()
        traj = simulate(
            m, 8, 0.01, 0.1, 0, record_every=5,
            functionals={"spread": lambda p: float(p.max() - p.min())},
        )
        path = tmp_path / "traj.csv"
        trajectory_to_csv(traj, path)
        assert path.read_text().splitlines()[0] == "t,mu1_0,mu2,v,spread"
