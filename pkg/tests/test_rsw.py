import numpy as np
import pytest

from swnoise.grid import Grid, ScalarField, VectorField
from swnoise import operators as ops
from swnoise import rsw


GRID = Grid(64, 64)


def balanced_state(a=0.1, grid=GRID):
    eta = rsw.initial_eta(grid, a=a)
    return rsw.geostrophic_init(eta, rsw.RswParams(dt=1e-3, nu=0.0))


class TestInitialEta:
    def test_zero_amplitude(self):
        eta = rsw.initial_eta(GRID, a=0.0)
        assert np.array_equal(eta.values, np.ones(GRID.shape))

    def test_center_point_exact(self):
        # at (x=0, y=ly/2) every perturbation term vanishes
        eta = rsw.initial_eta(GRID, a=0.1)
        assert eta.values[0, GRID.ny // 2] == 1.0

    def test_extrema_bounds(self):
        g = Grid(128, 128)
        eta = rsw.initial_eta(g, a=0.1)
        assert eta.values.min() > 0.8
        assert eta.values.max() < 1.2


class TestGeostrophicInit:
    def test_constant_eta(self):
        s = rsw.geostrophic_init(ScalarField.full(GRID, 1.0), rsw.RswParams(dt=1e-3))
        assert s.vel.max_speed() == 0.0

    def test_linear_eta_coefficient(self):
        c = 0.05
        eta = ScalarField.from_function(GRID, lambda x, y: 1.0 + c * x)
        p = rsw.RswParams(ro=0.2, fr=1.1, f_cor=1.0, dt=1e-3)
        s = rsw.geostrophic_init(eta, p)
        # interior columns (the wrap columns see the periodic seam of the
        # non-periodic test field); v = c * Ro / Fr^2
        interior = s.vel.v.values[2:-2, 1:-1]
        assert np.allclose(interior, c * 0.2 / 1.21, rtol=1e-12)
        assert np.allclose(s.vel.u.values[2:-2, :], 0.0, atol=1e-14)

    def test_zero_coriolis_raises(self):
        with pytest.raises(rsw.ZeroCoriolis):
            rsw.geostrophic_init(
                ScalarField.full(GRID, 1.0), rsw.RswParams(f_cor=0.0, dt=1e-3)
            )

    def test_rescale_when_fast(self):
        eta = ScalarField.from_function(GRID, lambda x, y: 1.0 + 20.0 * y)
        s = rsw.geostrophic_init(eta, rsw.RswParams(dt=1e-3))
        assert s.vel.max_speed() <= 1.0

    def test_balanced_tendency_much_smaller(self):
        # balance cancels Coriolis against pressure in the interior; the wall
        # rows carry the v=0 boundary imbalance and are excluded
        eta = rsw.initial_eta(GRID, a=0.1)
        p = rsw.RswParams(dt=1e-3, nu=0.0)
        bal = rsw.geostrophic_init(eta, p)
        zer = rsw.FlowState(VectorField.zeros(GRID), eta.copy())

        def tendency_norm(s0):
            s1 = rsw.step_deterministic(s0, p)
            du = (s1.vel.u.values - s0.vel.u.values)[:, 1:-1] / p.dt
            dv = (s1.vel.v.values - s0.vel.v.values)[:, 1:-1] / p.dt
            return np.sqrt(np.sum(du**2 + dv**2))

        assert tendency_norm(bal) <= 0.2 * tendency_norm(zer)


class TestCfl:
    def test_bound_formula(self):
        s = balanced_state()
        p = rsw.RswParams(fr=1.1, dt=1e-3)
        umax = s.vel.max_speed()
        expect = 0.5 * min(GRID.dx, GRID.dy) * 1.1 / (1.0 + umax * 1.1)
        assert np.isclose(rsw.cfl_bound(s, p), expect, rtol=1e-14)

    def test_violation_raises(self):
        s = balanced_state()
        with pytest.raises(rsw.CflViolation):
            rsw.validate_cfl(rsw.RswParams(dt=0.5), s)
        rsw.validate_cfl(rsw.RswParams(dt=1e-4), s)  # passes


class TestDeterministicStep:
    def test_rest_state_fixed_point(self):
        rest = rsw.FlowState(VectorField.zeros(GRID), ScalarField.full(GRID, 1.3))
        p = rsw.RswParams(dt=2e-3, nu=0.0)
        out = rsw.step_deterministic(rest, p)
        assert np.array_equal(out.eta.values, rest.eta.values)
        assert np.array_equal(out.vel.u.values, rest.vel.u.values)
        assert np.array_equal(out.vel.v.values, rest.vel.v.values)

    def test_rest_state_with_topography(self):
        # topography quantised to 2^-20 so that (1 + b) - b is exact in floats
        rng = np.random.default_rng(0)
        b = ScalarField(
            GRID, np.round(0.05 * rng.standard_normal(GRID.shape) * 2**20) / 2**20
        )
        eta = ScalarField(GRID, 1.0 + b.values)
        rest = rsw.FlowState(VectorField.zeros(GRID), eta)
        out = rsw.step_deterministic(rest, rsw.RswParams(b=b, dt=2e-3, nu=0.0))
        assert np.array_equal(out.eta.values, eta.values)
        assert np.array_equal(out.vel.u.values, rest.vel.u.values)

    def test_mass_conserved_per_step(self):
        p = rsw.RswParams(dt=1e-3, nu=0.0)
        st = balanced_state()
        for _ in range(100):
            prev = rsw.total_mass(st)
            st = rsw.step_deterministic(st, p)
            assert abs(rsw.total_mass(st) - prev) <= 1e-12 * prev

    def test_blowup_reports_step(self):
        st = balanced_state()
        st.step = 41
        p = rsw.RswParams(dt=0.5, nu=0.0)  # far beyond CFL
        with pytest.raises(rsw.BlowUp) as exc:
            out = st
            for _ in range(50):
                out = rsw.step_deterministic(out, p)
        assert exc.value.step > 41

    def test_temporal_order_one(self):
        g = Grid(32, 32)
        base = balanced_state(grid=g)
        nu = rsw.default_nu(g)
        dt0, horizon = 1e-3, 3.2e-2

        def advance(dt):
            p = rsw.RswParams(dt=dt, nu=nu)
            st = base.copy()
            for _ in range(int(round(horizon / dt))):
                st = rsw.step_deterministic(st, p)
            return st.eta.values

        ref = advance(dt0 / 16)
        errs = [np.linalg.norm(advance(dt) - ref) for dt in (dt0, dt0 / 2, dt0 / 4)]
        slope = np.polyfit(np.log([1.0, 0.5, 0.25]), np.log(errs), 1)[0]
        assert slope >= 0.9


class TestStochasticStep:
    def test_zero_noise_degeneracy(self):
        st = balanced_state()
        p = rsw.RswParams(dt=1.8e-3, nu=rsw.default_nu(GRID))
        det = rsw.step_deterministic(st, p)
        sto = rsw.step_stochastic(st, p, rsw.NoiseRealization(ScalarField.zeros(GRID)))
        for a, b in [
            (det.eta.values, sto.eta.values),
            (det.vel.u.values, sto.vel.u.values),
            (det.vel.v.values, sto.vel.v.values),
        ]:
            scale = np.abs(a).max()
            assert np.abs(a - b).max() <= 1e-14 * max(scale, 1.0)

    def test_mass_conserved(self):
        st = balanced_state()
        p = rsw.RswParams(dt=1.8e-3, nu=0.0)
        stream = ScalarField.from_function(
            GRID, lambda x, y: 1e-3 * np.sin(2 * np.pi * x) * np.sin(np.pi * y)
        )
        prev = rsw.total_mass(st)
        out = rsw.step_stochastic(st, p, rsw.NoiseRealization(stream))
        assert abs(rsw.total_mass(out) - prev) <= 1e-12 * prev

    def test_grid_mismatch(self):
        st = balanced_state()
        with pytest.raises(ValueError):
            rsw.step_stochastic(
                st,
                rsw.RswParams(dt=1e-3),
                rsw.NoiseRealization(ScalarField.zeros(Grid(16, 16))),
            )

    def test_perturbation_clipping(self):
        stream = ScalarField.from_function(GRID, lambda x, y: 10.0 * y)
        w = rsw.perturbation_from_stream(rsw.NoiseRealization(stream, clip=3.0))
        assert np.abs(w.u.values).max() <= 3.0
        assert np.abs(w.v.values).max() <= 3.0


class TestTransportOperator:
    def test_zero_zeta(self):
        st = balanced_state()
        inc = rsw.apply_transport_operator(st, VectorField.zeros(GRID))
        assert not inc.eta.values.any()
        assert not inc.vel.u.values.any()

    def test_linear_eta_transport(self):
        eta = ScalarField.from_function(GRID, lambda x, y: y)
        st = rsw.FlowState(VectorField.zeros(GRID), eta)
        zeta = VectorField(ScalarField.zeros(GRID), ScalarField.full(GRID, 1.0))
        inc = rsw.apply_transport_operator(st, zeta)
        assert np.allclose(inc.eta.values, 1.0, atol=1e-12)

    def test_constant_u_constant_zeta(self):
        st = rsw.FlowState(
            VectorField(ScalarField.full(GRID, 0.7), ScalarField.full(GRID, -0.2)),
            ScalarField.full(GRID, 1.0),
        )
        zeta = VectorField(ScalarField.full(GRID, 0.3), ScalarField.full(GRID, 0.1))
        inc = rsw.apply_transport_operator(st, zeta)
        assert not inc.vel.u.values.any()
        assert not inc.vel.v.values.any()


class TestScaleSeparation:
    @pytest.mark.slow
    def test_fine_run_develops_high_wavenumbers(self):
        fine, coarse = Grid(64, 64), Grid(16, 16)
        s_f = balanced_state(grid=fine)
        p_f = rsw.RswParams(dt=rsw.auto_dt(s_f, rsw.RswParams(dt=1e-3)), nu=rsw.default_nu(fine))
        s_c = rsw.geostrophic_init(
            ops.coarse_project(rsw.initial_eta(fine, 0.1), coarse), rsw.RswParams(dt=1e-3)
        )
        for _ in range(2000):
            s_f = rsw.step_deterministic(s_f, p_f)
        frac = ops.high_wavenumber_fraction([s_f.vel.u, s_f.vel.v, s_f.eta], coarse.nx // 2)
        assert frac > 1e-6
        # the coarse grid cannot represent anything above its own Nyquist
        assert (
            ops.high_wavenumber_fraction([s_c.vel.u, s_c.vel.v, s_c.eta], coarse.nx // 2)
            == 0.0
        )
