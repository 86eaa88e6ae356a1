import numpy as np
import pytest

from swnoise.grid import Grid, ScalarField, VectorField
from swnoise import rsw, verify
from swnoise import operators as ops


GRID = Grid(16, 16)


def small_record(truth, members):
    """Wrap plain arrays (cycles, lead, nx, ny) / (cycles, lead, M, nx, ny)."""
    rec = verify.ForecastRecord()
    rec.truth["e"] = truth
    rec.members["e"] = members
    return rec


class TestCrps:
    def test_single_member_equal_to_obs(self):
        obs = np.zeros((1, 1, 2, 2))
        members = np.zeros((1, 1, 1, 2, 2))
        assert verify.crps(small_record(obs, members))["e"][0] == 0.0

    def test_two_members_zero_one_obs_zero(self):
        obs = np.zeros((1, 1, 1, 1))
        members = np.array([0.0, 1.0]).reshape(1, 1, 2, 1, 1)
        # (|0-0|+|1-0|)/2 - (0+1+1+0)/(2*4) = 0.5 - 0.25
        assert verify.crps(small_record(obs, members))["e"][0] == pytest.approx(0.25)

    def test_two_members_zero_one_obs_half(self):
        obs = np.full((1, 1, 1, 1), 0.5)
        members = np.array([0.0, 1.0]).reshape(1, 1, 2, 1, 1)
        assert verify.crps(small_record(obs, members))["e"][0] == pytest.approx(0.25)

    def test_one_member_crps_is_mae(self):
        rng = np.random.default_rng(0)
        obs = rng.standard_normal((3, 4, 5, 5))
        members = rng.standard_normal((3, 4, 1, 5, 5))
        got = verify.crps(small_record(obs, members))["e"]
        mae = np.abs(members[:, :, 0] - obs).mean(axis=(0, 2, 3))
        assert np.allclose(got, mae, rtol=1e-12, atol=1e-15)

    def test_nonnegative_and_zero_iff_exact(self):
        rng = np.random.default_rng(1)
        obs = rng.standard_normal((2, 3, 4, 4))
        members = rng.standard_normal((2, 3, 5, 4, 4))
        vals = verify.crps(small_record(obs, members))["e"]
        assert (vals >= 0).all() and (vals > 0).all()
        exact = np.repeat(obs[:, :, None], 5, axis=2)
        assert verify.crps(small_record(obs, exact))["e"].max() == 0.0

    def test_member_relabeling_invariance(self):
        rng = np.random.default_rng(2)
        obs = rng.standard_normal((2, 2, 3, 3))
        members = rng.standard_normal((2, 2, 6, 3, 3))
        base = verify.crps(small_record(obs, members))["e"]
        shuffled = members[:, :, rng.permutation(6)]
        assert np.allclose(verify.crps(small_record(obs, shuffled))["e"], base)


class TestRmse:
    def test_members_equal_truth(self):
        rng = np.random.default_rng(3)
        obs = rng.standard_normal((2, 3, 4, 4))
        members = np.repeat(obs[:, :, None], 4, axis=2)
        assert verify.rmse(small_record(obs, members))["e"].max() == 0.0

    def test_constant_offset(self):
        obs = np.zeros((1, 2, 3, 3))
        members = np.full((1, 2, 1, 3, 3), 0.7)
        assert np.allclose(verify.rmse(small_record(obs, members))["e"], 0.7)

    def test_symmetric_pair_cancels(self):
        obs = np.zeros((1, 1, 3, 3))
        members = np.stack([np.full((3, 3), 0.4), np.full((3, 3), -0.4)])[None, None]
        assert verify.rmse(small_record(obs, members))["e"][0] == pytest.approx(0.0)

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(4)
        obs = rng.standard_normal((2, 2, 3, 3))
        members = rng.standard_normal((2, 2, 6, 3, 3))
        base = verify.rmse(small_record(obs, members))["e"]
        shuffled = members[:, :, rng.permutation(6)]
        assert np.allclose(verify.rmse(small_record(obs, shuffled))["e"], base)


class TestRankHistogram:
    def test_truth_below_all_members(self):
        rng = np.random.default_rng(5)
        truth = np.zeros(1000)
        members = 1.0 + rng.random((1000, 8))
        counts = verify.rank_histogram(truth, members, rng)
        assert counts[0] == 1000 and counts[1:].sum() == 0

    def test_exchangeable_is_uniform(self):
        rng = np.random.default_rng(6)
        truth = rng.standard_normal(10_000)
        members = rng.standard_normal((10_000, 10))
        counts = verify.rank_histogram(truth, members, rng)
        assert counts.sum() == 10_000 and counts.size == 11
        assert verify.rank_uniformity_pvalue(counts) > 0.01

    def test_ties_randomized(self):
        rng = np.random.default_rng(7)
        truth = np.zeros(6000)
        members = np.zeros((6000, 3))  # all tied: rank uniform on 0..3
        counts = verify.rank_histogram(truth, members, rng)
        assert verify.rank_uniformity_pvalue(counts) > 0.01


class TestKsNormality:
    def test_single_point_without_standardization(self):
        assert verify.ks_statistic_normal(np.array([0.0]), standardize=False) == 0.5

    def test_level_on_normal_data(self):
        rng = np.random.default_rng(8)
        accepted = 0
        trials = 40
        for _ in range(trials):
            x = rng.standard_normal((10_000, 1))
            _, p, reject = verify.ks_normality(x)
            accepted += not reject[0]
        assert accepted >= 0.9 * trials

    def test_power_on_uniform_data(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(0, 1, size=(10_000, 1))
        _, p, reject = verify.ks_normality(x)
        assert reject[0] and p[0] < 0.05

    def test_degenerate_sample(self):
        with pytest.raises(verify.DegenerateSample):
            verify.ks_statistic_normal(np.full(50, 1.0))

    def test_requires_enough_samples(self):
        with pytest.raises(ValueError):
            verify.ks_normality(np.zeros((5, 3)))

    def test_multilocation_shapes(self):
        rng = np.random.default_rng(10)
        x = np.column_stack([rng.standard_normal(500), rng.uniform(0, 1, 500)])
        d, p, reject = verify.ks_normality(x)
        assert d.shape == p.shape == reject.shape == (2,)
        assert reject[1] and not reject[0]


class TestGaussianBaselines:
    def test_zero_dataset_rejected_downstream(self):
        sigma_iso, sigma_diag = verify.fit_gaussian_baselines(np.zeros((10, 2, 4, 4)))
        assert sigma_iso == 0.0
        with pytest.raises(ValueError):
            verify.NoiseSource(kind="gaussian_iso", sigma=sigma_iso)
        with pytest.raises(ValueError):
            verify.NoiseSource(kind="gaussian_diag", sigma_field=sigma_diag)

    def test_known_per_location_stds(self):
        # two locations with values {+1,-1} and {+2,-2}: stds 1 and 2 exactly
        n = 100
        data = np.zeros((n, 2, 1, 2))
        data[:, 0, 0, 0] = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        data[:, 0, 0, 1] = np.where(np.arange(n) % 2 == 0, 2.0, -2.0)
        sigma_iso, sigma_diag = verify.fit_gaussian_baselines(data)
        assert sigma_diag[0, 0, 0] == pytest.approx(1.0)
        assert sigma_diag[0, 0, 1] == pytest.approx(2.0)
        # pooled std lies within the spread of the per-location values
        assert sigma_diag.min() <= sigma_iso <= sigma_diag.max()

    def test_empty_raises(self):
        with pytest.raises(verify.EmptyDataset):
            verify.fit_gaussian_baselines(np.empty((0, 2, 4, 4)))


@pytest.fixture(scope="module")
def coarse_truth():
    """Short coarse-grid truth trajectory from a projected fine run."""
    fine = Grid(64, 64)
    coarse = GRID
    eta = rsw.initial_eta(fine, a=0.1)
    probe = rsw.RswParams(dt=1e-3, nu=0.0)
    state = rsw.geostrophic_init(eta, probe)
    p_f = rsw.RswParams(dt=rsw.auto_dt(state, probe), nu=rsw.default_nu(fine))
    state = rsw.spin_up(state, p_f, 600)
    traj = []
    for _ in range(41):
        traj.append(
            rsw.FlowState(
                VectorField(
                    ops.coarse_project(state.vel.u, coarse),
                    ops.coarse_project(state.vel.v, coarse),
                ),
                ops.coarse_project(state.eta, coarse),
                t=state.t,
                step=state.step,
            )
        )
        for _ in range(4):
            state = rsw.step_deterministic(state, p_f)
    p_c = rsw.RswParams(dt=4 * p_f.dt, nu=rsw.default_nu(coarse))
    return traj, p_c


class TestRunForecast:
    def test_zero_noise_zero_spread_matches_deterministic(self, coarse_truth):
        traj, p_c = coarse_truth
        config = verify.ForecastConfig(members=2, lead=5, init_std=0.0, resets=2)
        rec = verify.run_forecast(traj, config, verify.NoiseSource(kind="zero"), p_c)
        # both members identical to the deterministic coarse run
        state = traj[0].copy()
        for lead in range(5):
            assert np.array_equal(rec.members["e"][0, lead, 0], rec.members["e"][0, lead, 1])
            if lead > 0:
                assert np.allclose(rec.members["e"][0, lead, 0], state.eta.values)
            if lead < 4:
                state = rsw.step_deterministic(state, p_c)

    def test_record_shape_counts(self, coarse_truth):
        traj, p_c = coarse_truth
        config = verify.ForecastConfig(members=3, lead=10, init_std=0.001, resets=4)
        rec = verify.run_forecast(
            traj, config, verify.NoiseSource(kind="gaussian_iso", sigma=1e-3), p_c,
            seed=1,
        )
        assert rec.truth["e"].shape == (4, 10, 16, 16)
        assert rec.members["u"].shape == (4, 10, 3, 16, 16)
        assert rec.blowups == 0

    def test_crps_zero_at_lead_zero_without_perturbation(self, coarse_truth):
        traj, p_c = coarse_truth
        config = verify.ForecastConfig(members=3, lead=4, init_std=0.0, resets=2)
        rec = verify.run_forecast(
            traj, config, verify.NoiseSource(kind="gaussian_iso", sigma=1e-3), p_c,
            seed=2,
        )
        for var in verify.VARIABLES:
            assert verify.crps(rec)[var][0] == 0.0
            assert verify.crps(rec)[var][1] > 0.0

    def test_too_short_trajectory(self, coarse_truth):
        traj, p_c = coarse_truth
        config = verify.ForecastConfig(members=2, lead=100, init_std=0.0, resets=2)
        with pytest.raises(ValueError):
            verify.run_forecast(traj, config, verify.NoiseSource(kind="zero"), p_c)

    def test_deterministic_under_seed(self, coarse_truth):
        traj, p_c = coarse_truth
        config = verify.ForecastConfig(members=2, lead=5, init_std=0.001, resets=2)
        src = verify.NoiseSource(kind="gaussian_iso", sigma=1e-3)
        rec1 = verify.run_forecast(traj, config, src, p_c, seed=7)
        rec2 = verify.run_forecast(traj, config, src, p_c, seed=7)
        assert np.array_equal(rec1.members["e"], rec2.members["e"])
