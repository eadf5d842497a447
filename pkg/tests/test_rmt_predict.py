import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltann import model_core as mc
from deltann.dmft_engine import DmftProblem, GLaw
from deltann.rmt_predict import (NonMonotoneError, SpectralError, _bisect, density, edge_point,
                                 extrapolate_inf, left_edge, outlier_roots, predict_outliers,
                                 spectral_cdf, stieltjes, threshold_at_t, threshold_curve)
from deltann.validation import spiked_oracle

CONST = GLaw.constant(1.0, 20_000)


def mp_stieltjes(z, delta):
    """Closed-form Stieltjes transform of the MP law with ratio d/n = 1/delta (branch with Im > 0)."""
    lam = 1.0 / delta
    root = np.sqrt((z - 1 - lam) ** 2 - 4 * lam + 0j)
    cands = [(1 - lam - z + s * root) / (2 * lam * z) for s in (1, -1)]
    return max(cands, key=lambda m: m.imag)


class TestStieltjes:
    @pytest.mark.parametrize("z", [0.5 + 0.1j, 1.0 + 0.01j, 2.5 + 1j, -1 + 0.3j, 0.2 + 2j])
    def test_matches_marchenko_pastur(self, z):
        sol = stieltjes(CONST, 4.0, z)
        assert sol.residual <= 1e-10
        np.testing.assert_allclose(sol.alpha, mp_stieltjes(z, 4.0), rtol=1e-7)

    def test_closed_form_real_point(self):
        assert stieltjes(CONST, 4.0, -1.0).alpha == pytest.approx((-7 + np.sqrt(65)) / 2, abs=1e-9)

    def test_rejects_lower_half_plane(self):
        with pytest.raises(SpectralError):
            stieltjes(CONST, 4.0, 1 - 1j)

    def test_rejects_real_point_inside_bulk(self):
        with pytest.raises(SpectralError):
            stieltjes(CONST, 4.0, 1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.01, 3), st.floats(1.5, 10))
    def test_residual_and_half_plane(self, x, y, delta):
        law = GLaw(np.random.default_rng(0).normal(size=4000), np.zeros(4000))
        sol = stieltjes(law, delta, complex(x, y))
        assert sol.residual <= 1e-10
        assert sol.alpha.imag > 0


class TestEdge:
    @pytest.mark.parametrize("delta", [2.0, 4.0, 9.0])
    def test_mp_edge(self, delta):
        assert left_edge(CONST, delta) == pytest.approx((1 - 1 / np.sqrt(delta)) ** 2, abs=1e-8)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.2, 5.0))
    def test_edge_scales_with_weights(self, c):
        g = np.random.default_rng(1).normal(size=2000) + 0.3
        e1 = left_edge(GLaw(g, np.zeros(2000)), 4.0)
        e2 = left_edge(GLaw(c * g, np.zeros(2000)), 4.0)
        assert e2 == pytest.approx(c * e1, rel=1e-6, abs=1e-9)

    def test_density_integrates_and_matches_mp(self):
        delta = 4.0
        xs, cdf = spectral_cdf(CONST, delta, 0.1, 2.4, points=800, eta=1e-4)
        lam = 1 / delta
        lo, hi = (1 - np.sqrt(lam)) ** 2, (1 + np.sqrt(lam)) ** 2
        ref = np.sqrt(np.clip((hi - xs) * (xs - lo), 0, None)) / (2 * np.pi * lam * xs)
        rho = density(CONST, delta, xs, eta=1e-4)
        inside = (xs > lo + 0.05) & (xs < hi - 0.05)
        np.testing.assert_allclose(rho[inside], ref[inside], rtol=1e-2)
        assert cdf[-1] == pytest.approx(1.0)

    def test_edge_point_maximises(self):
        g = np.random.default_rng(2).normal(size=3000)
        c, ac = edge_point(g, 5.0)
        z = lambda a: -1 / a + 5.0 * np.mean(g / (5.0 + g * a))
        assert all(z(a) <= c + 1e-10 for a in np.linspace(0.05 * ac, 0.999 * ac, 50))


class TestOutliers:
    def test_no_outlier_when_weights_ignore_the_signal(self):
        g = np.random.default_rng(0)
        law = GLaw(g.normal(size=20_000), g.normal(size=20_000))
        assert not outlier_roots(law, 4.0).exists

    def test_strong_negative_coupling_gives_outlier(self):
        g = np.random.default_rng(1)
        v = g.normal(size=50_000)
        law = GLaw(1.0 - v**2, v)
        rep = predict_outliers(law, 6.0)
        assert rep.exists
        assert rep.roots[0] < rep.z_dagger
        assert 0 < rep.omega[0] <= 1

    def test_needs_hard_directions(self):
        with pytest.raises(SpectralError):
            outlier_roots(GLaw(np.ones(10), np.zeros((10, 0))), 4.0)

    def test_prediction_matches_finite_sample(self):
        orc = spiked_oracle(mc.gelu(), mc.huber(), 8.0, 500, seeds=(0, 1))
        assert abs(orc["lambda_min"] - orc["z_star"]) < 0.1
        assert abs(orc["alignment"] - orc["omega"]) < 0.2


class StepOracle:
    """Existence iff delta >= threshold, except inside an optional gap interval."""

    def __init__(self, threshold, gap=None):
        self.threshold = threshold
        self.gap = gap

    def __call__(self, delta, t, seed):
        if self.gap is not None and self.gap[0] <= delta <= self.gap[1]:
            return False
        return delta >= self.threshold


class TestThresholds:
    def test_bisection_finds_step(self):
        d, path = _bisect(StepOracle(5.3), 0, 0, (1.0, 16.0), 0.01, 64.0)
        assert abs(d - 5.3) < 0.01
        assert len(path) < 17

    def test_bracket_expands_upward_and_downward(self):
        assert _bisect(StepOracle(40.0), 0, 0, (1.0, 16.0), 0.01, 64.0)[0] == pytest.approx(40, abs=0.01)
        assert _bisect(StepOracle(0.6), 0, 0, (1.0, 16.0), 0.01, 64.0)[0] == pytest.approx(0.6, abs=0.01)

    def test_infinite_above_cap(self):
        assert _bisect(StepOracle(100.0), 0, 0, (1.0, 16.0), 0.01, 64.0)[0] == np.inf

    def test_non_monotone_probe_path_is_reported(self):
        with pytest.raises(NonMonotoneError):
            _bisect(StepOracle(5.3, gap=(5.4, 5.6)), 0, 0, (1.0, 16.0), 0.01, 64.0)

    def test_threshold_at_t_with_custom_oracle(self):
        res = threshold_at_t(None, 3, seeds=(0, 1), oracle=StepOracle(4.0))
        assert res.mean == pytest.approx(4.0, abs=0.01) and not res.infinite
        assert len(res.per_seed) == 2 and res.std < 0.01

    def test_quad_threshold_at_t0_is_near_two(self):
        prob = DmftProblem(mc.quad(), mc.huber(), mc.phase_retrieval(), eta=0.25)
        curve = threshold_curve(prob, [0], seeds=(0,), n_paths=20_000, tol=0.05)
        assert 1.6 < curve.results[0].mean < 2.6


class TestExtrapolation:
    def test_recovers_polynomial_in_inverse_time(self):
        ts = np.arange(1, 26)
        deltas = 6.0 - 2.0 / ts + 0.5 / ts**2
        fit = extrapolate_inf(ts, deltas)
        assert fit.delta_inf == pytest.approx(6.0, abs=1e-9)
        assert fit.residual < 1e-10 and fit.n_points == 25

    def test_ignores_t0_and_infinite_points(self):
        ts = np.arange(0, 10)
        deltas = 3.0 + 1.0 / np.maximum(ts, 1)
        deltas[4] = np.inf
        assert extrapolate_inf(ts, deltas).delta_inf == pytest.approx(3.0, abs=1e-9)

    def test_needs_six_points(self):
        with pytest.raises(SpectralError):
            extrapolate_inf([0, 1, 2, 3, 4, 5], [1.0] * 6)


def preprocessing_law(n=200_000):
    act, loss = mc.gelu(), mc.huber()
    d2s0 = act(np.zeros(1))[2][0]
    return GLaw.from_preprocessing(lambda y, z: loss(y, np.zeros_like(y))[1] * d2s0,
                                   mc.phase_retrieval(), n=n)


class TestWorkedExamples:
    def test_zero_weights_give_point_mass(self):
        zero = GLaw(np.zeros(1000), np.zeros(1000))
        for z in (0.5 + 0.2j, -1.0 + 1e-3j):
            np.testing.assert_allclose(stieltjes(zero, 3.0, z).alpha, -1 / z, rtol=1e-12)
        assert stieltjes(zero, 3.0, -2.0).alpha == pytest.approx(0.5, rel=1e-9)

    def test_far_left_asymptotics(self):
        z = -1e6
        assert abs(stieltjes(CONST, 4.0, z).alpha + 1 / z) <= 1e-9

    def test_symmetric_sign_law_edge_matches_sample(self):
        from deltann.hessian_lab import HessianBlock, smallest_eigenpairs
        d, delta = 2000, 2.0
        g = np.random.default_rng(0)
        signs = np.where(g.random(200_000) < 0.5, -1.0, 1.0)
        c = left_edge(GLaw(signs, np.zeros(len(signs))), delta)
        x = g.standard_normal((int(delta * d), d))
        blk = HessianBlock(x, np.where(g.random(len(x)) < 0.5, -1.0, 1.0))
        assert abs(smallest_eigenpairs(blk).values[0] - c) <= 0.05

    def test_nonnegative_weights_have_no_negative_root(self):
        g = np.random.default_rng(1)
        law = GLaw(g.exponential(size=20_000), g.normal(size=20_000))
        rep = outlier_roots(law, 3.0)
        assert not rep.exists

    def test_gelu_huber_outlier_at_initialisation(self):
        from deltann.dmft_engine import dmft_run, law_of_g
        prob = DmftProblem(mc.gelu(), mc.huber(), mc.phase_retrieval(), eta=1.5)
        state = dmft_run(prob, 6.0, 0, 50_000, seed=0)
        rep = predict_outliers(law_of_g(state, 0), 6.0)
        assert rep.exists and rep.roots[0] < rep.edge - 0.01

    def test_real_alpha_increases_below_edge(self):
        from deltann.rmt_predict import _real_alpha
        law = preprocessing_law(50_000)
        c = left_edge(law, 6.0)
        zs = np.linspace(c - 3, c - 1e-3, 30)
        alphas = [_real_alpha(law.g, 6.0, z) for z in zs]
        assert np.all(np.diff(alphas) > 0)

    def test_spike_function_decreases(self):
        from deltann.rmt_predict import _real_alpha, _spike_matrix
        law = preprocessing_law(50_000)
        c = left_edge(law, 6.0)
        zs = np.linspace(c - 3, c - 1e-3, 30)
        s = [_spike_matrix(law, 6.0, _real_alpha(law.g, 6.0, z))[0, 0] - z for z in zs]
        assert np.all(np.diff(s) < 0)

    def test_scalar_alignment_formula(self):
        from deltann.rmt_predict import _real_alpha
        law = preprocessing_law(50_000)
        rep = predict_outliers(law, 8.0)
        z, g, v = rep.roots[0], law.g, law.v[:, 0]
        a = _real_alpha(g, 8.0, z)
        da = 1 / (1 / a**2 - 8.0 * np.mean(g**2 / (8.0 + g * a) ** 2))
        ref = 1 / (1 + np.mean(8.0 * g**2 * da * v**2 / (8.0 + g * a) ** 2))
        assert rep.omega[0] == pytest.approx(ref, rel=1e-10)

    def test_alignment_vanishes_towards_threshold(self):
        law = preprocessing_law()
        omegas = [predict_outliers(law, delta, gap=1e-3).omega[0] for delta in (8, 6, 4, 3, 2.5)]
        assert np.all(np.diff(omegas) < 0)
        assert omegas[-1] < 0.1
        assert not predict_outliers(law, 2.0, gap=1e-3).exists
