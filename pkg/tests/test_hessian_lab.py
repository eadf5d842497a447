import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import cumulative_trapezoid
from scipy.sparse.linalg import aslinearoperator

from deltann import model_core as mc
from deltann.data_synth import sample_dataset, sample_target
from deltann.hessian_lab import (EigenSolveError, HessianBlock, alignment, esd, full_hessian,
                                 hessian_block, kolmogorov_distance, sandwich_check,
                                 smallest_eigenpairs, spiked_sample)
from deltann.validation import fd_hessian, hessian_fd_error


def mp_cdf(delta, points=20001):
    """Classical MP law for (1/n) X^T X with n/d = delta > 1, by quadrature of the density."""
    lam = 1.0 / delta
    lo, hi = (1 - np.sqrt(lam)) ** 2, (1 + np.sqrt(lam)) ** 2
    xs = np.linspace(lo, hi, points)
    dens = np.sqrt(np.clip((hi - xs) * (xs - lo), 0, None)) / (2 * np.pi * lam * xs)
    cum = cumulative_trapezoid(dens, xs, initial=0.0)
    cum /= cum[-1]
    return lambda x: np.interp(x, xs, cum, left=0.0, right=1.0)


class TestAssembly:
    def test_block_matvec_matches_dense(self):
        g = np.random.default_rng(0)
        blk = HessianBlock(g.normal(size=(50, 12)), g.normal(size=50))
        v = g.normal(size=12)
        np.testing.assert_allclose(blk.matvec(v), blk.dense() @ v, atol=1e-12)
        V = g.normal(size=(12, 3))
        np.testing.assert_allclose(blk.matvec(V), blk.dense() @ V, atol=1e-12)

    @pytest.mark.parametrize("m", [1, 3])
    def test_matches_finite_differences(self, m):
        assert hessian_fd_error(m) < 1e-4

    def test_quad_activation_fd(self):
        assert hessian_fd_error(2, act=mc.quad(), seed=4) < 1e-4

    def test_diagonal_blocks_of_full_hessian_drop_curvature_terms(self):
        act, loss = mc.gelu(), mc.huber()
        data = sample_dataset(60, sample_target(8, seed=0), seed=0)
        p = mc.init_params(8, 2, rng=np.random.default_rng(1))
        hd = full_hessian(p, act, loss, data, curvature=False)
        np.testing.assert_allclose(hd[8:16, :8], 0.0)
        np.testing.assert_allclose(2 * hd[:8, :8], hessian_block(p, act, loss, data, j=0).dense(),
                                   rtol=1e-10, atol=1e-12)

    def test_full_hessian_is_symmetric(self):
        data = sample_dataset(40, sample_target(6, seed=2), seed=2)
        p = mc.init_params(6, 3, rng=np.random.default_rng(2))
        h = full_hessian(p, mc.gelu(), mc.huber(), data)
        np.testing.assert_allclose(h, h.T, atol=1e-14)
        np.testing.assert_allclose(h, fd_hessian(p, mc.gelu(), mc.huber(), data), atol=1e-6)


class TestEigen:
    def test_dense_and_lanczos_agree(self):
        g = np.random.default_rng(0)
        blk = HessianBlock(g.normal(size=(600, 150)), g.normal(size=600))
        a = smallest_eigenpairs(blk, p=3)
        b = smallest_eigenpairs(blk, p=3, dense_limit=10)
        np.testing.assert_allclose(a.values, b.values, rtol=1e-8)
        np.testing.assert_allclose(np.abs(np.sum(a.vectors * b.vectors, axis=0)), 1.0, atol=1e-6)

    def test_linear_operator_input(self):
        g = np.random.default_rng(1)
        m = g.normal(size=(30, 30))
        m = m + m.T
        res = smallest_eigenpairs(aslinearoperator(m), p=2)
        np.testing.assert_allclose(res.values, np.linalg.eigvalsh(m)[:2], rtol=1e-8)

    def test_bad_p(self):
        with pytest.raises(ValueError):
            smallest_eigenpairs(np.eye(3), p=4)

    def test_tight_tolerance_failure_is_reported(self):
        g = np.random.default_rng(2)
        blk = HessianBlock(g.normal(size=(400, 100)), g.normal(size=400))
        with pytest.raises(EigenSolveError):
            smallest_eigenpairs(blk, p=1, tol=1e-30)

    def test_alignment(self):
        th = np.array([1.0, 0.0, 0.0])
        v = np.array([[np.sqrt(0.5), 0.0], [np.sqrt(0.5), 0.0], [0.0, 1.0]])
        assert alignment(v, th) == pytest.approx(0.5)
        assert alignment(v[:, 0], th) == pytest.approx(0.5)


class TestSandwich:
    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 5))
    def test_bounds_hold(self, seed, m):
        d = 15
        data = sample_dataset(60, sample_target(d, seed=seed), seed=seed)
        g = np.random.default_rng(seed)
        p = mc.NetworkParams(g.normal(size=(d, m)) / np.sqrt(d), np.ones(m), np.zeros(m))
        res = sandwich_check(p, mc.gelu(), mc.huber(), data)
        assert res.ok
        assert res.C >= 0

    def test_requires_convex_loss(self):
        loss = mc.custom_loss(lambda y, z: np.cos(z - y), lambda y, z: -np.sin(z - y),
                              lambda y, z: -np.cos(z - y))
        data = sample_dataset(20, sample_target(4, seed=0), seed=0)
        p = mc.init_params(4, 2, rng=np.random.default_rng(0))
        with pytest.raises(mc.ModelConfigError):
            sandwich_check(p, mc.gelu(), loss, data)


class TestSpectra:
    def test_marchenko_pastur_small(self):
        d, delta = 400, 4.0
        x = np.random.default_rng(0).standard_normal((int(delta * d), d))
        spec = esd(HessianBlock(x, np.ones(len(x))))
        assert spec.eigenvalues.min() == pytest.approx(0.25, abs=0.04)
        assert kolmogorov_distance(spec.eigenvalues, mp_cdf(delta)) < 0.04
        assert np.sum(spec.density * np.diff(spec.edges)) == pytest.approx(1.0)

    def test_kolmogorov_distance_of_exact_sample(self):
        xs = (np.arange(1000) + 0.5) / 1000
        assert kolmogorov_distance(xs, lambda x: np.clip(x, 0, 1)) == pytest.approx(5e-4)

    def test_spiked_sample_weights(self):
        smp = spiked_sample(lambda y, z: y - 1.0, mc.phase_retrieval(), 3.0, 50, seed=0)
        assert smp.block.n == 150
        np.testing.assert_allclose(smp.block.g, smp.y - 1.0)


class TestWorkedExamples:
    def test_factored_quadratic_forms_match_dense(self):
        g = np.random.default_rng(5)
        blk = HessianBlock(g.normal(size=(300, 80)), g.normal(size=300))
        h = blk.dense()
        scale = np.linalg.norm(h, 2)
        for _ in range(100):
            xi = g.normal(size=80)
            assert abs(xi @ blk.matvec(xi) - xi @ h @ xi) <= 1e-10 * scale * (xi @ xi)

    def test_rank_one_update_interlaces(self):
        g = np.random.default_rng(6)
        h = HessianBlock(g.normal(size=(600, 200)), g.normal(size=600)).dense()
        u = g.normal(size=200)
        base = np.linalg.eigvalsh(h)
        up = smallest_eigenpairs(h + np.outer(u, u), p=5).values
        for i in range(5):
            assert base[i] - 1e-10 <= up[i] <= base[i + 1] + 1e-10

    def test_block_at_zero_uses_hat_g(self):
        act, loss = mc.gelu(), mc.huber()
        data = sample_dataset(200, sample_target(10, seed=0), seed=0)
        p = mc.NetworkParams(np.zeros((10, 1)), np.ones(1), np.zeros(1))
        _, dl, d2l, _ = loss(data.y, np.zeros(data.n))
        hat_g = 0.25 * d2l + dl * np.sqrt(2 / np.pi)
        np.testing.assert_allclose(hessian_block(p, act, loss, data).g, hat_g, atol=1e-12)

    def test_single_sample_block_has_rank_one(self):
        g = np.random.default_rng(7)
        x = g.normal(size=(1, 6))
        blk = HessianBlock(x, np.array([2.5]))
        np.testing.assert_allclose(blk.dense(), 2.5 * np.outer(x[0], x[0]), atol=1e-12)
        assert np.linalg.matrix_rank(blk.dense()) <= 1

    def _linear_loss(self):
        return mc.custom_loss(lambda y, z: z - y, lambda y, z: np.ones_like(z),
                              lambda y, z: np.zeros_like(z), convex=True)

    def test_no_curvature_gives_block_diagonal(self):
        data = sample_dataset(40, sample_target(10, seed=3), seed=3)
        p = mc.NetworkParams(np.random.default_rng(3).normal(size=(10, 2)) / 3,
                             np.array([0.7, 1.3]), np.zeros(2))
        loss = self._linear_loss()
        h = full_hessian(p, mc.gelu(), loss, data)
        for j in range(2):
            blk = hessian_block(p, mc.gelu(), loss, data, j=j).dense()
            np.testing.assert_allclose(h[10 * j:10 * (j + 1), 10 * j:10 * (j + 1)],
                                       p.a[j] * blk / 2, atol=1e-14)
        np.testing.assert_allclose(h[:10, 10:], 0.0, atol=1e-14)

    def test_sandwich_is_tight_without_curvature(self):
        data = sample_dataset(60, sample_target(12, seed=4), seed=4)
        p = mc.init_params(12, 3, rng=np.random.default_rng(4))
        res = sandwich_check(p, mc.gelu(), self._linear_loss(), data)
        assert res.lower == pytest.approx(res.middle, abs=1e-12) and res.C == 0.0

    def test_diagonal_matrix_smallest_pair(self):
        res = smallest_eigenpairs(np.diag([-2.0, 0.0, 1.0]), p=1)
        assert res.values[0] == pytest.approx(-2.0)
        np.testing.assert_allclose(np.abs(res.vectors[:, 0]), [1.0, 0.0, 0.0], atol=1e-12)

    def test_identity_esd_is_point_mass(self):
        spec = esd(np.eye(20))
        np.testing.assert_allclose(spec.eigenvalues, 1.0)
        assert spec.cdf(0.999) == 0.0 and spec.cdf(1.001) == 1.0

    def test_alignment_extremes(self):
        th = np.eye(5)[:, [0]]
        assert alignment(th[:, 0], th) == 1.0
        assert alignment(np.eye(5)[:, 3], th) == 0.0

    def test_random_vector_alignment_is_order_inverse_d(self):
        d = 1000
        g = np.random.default_rng(8)
        th = sample_target(d, seed=8).theta_star
        vals = []
        for _ in range(50):
            xi = g.normal(size=d)
            vals.append(alignment(xi / np.linalg.norm(xi), th) * d)
        assert abs(np.mean(vals) - 1) < 3

    def test_pure_noise_weights_have_no_informative_bottom_vector(self):
        d = 400
        vals = []
        for seed in range(5):
            smp = spiked_sample(lambda y, z: z, mc.phase_retrieval(), 4.0, d, seed=seed)
            res = smallest_eigenpairs(smp.block, p=1)
            vals.append(alignment(res.vectors, smp.target.theta_star) * d)
        assert abs(np.mean(vals) - 1) < 3

    def test_trained_esd_matches_prediction(self):
        from deltann.dmft_engine import GLaw
        from deltann.rmt_predict import left_edge, spectral_cdf
        from deltann.trainer import gd_step

        d, delta = 1500, 6.0
        act, loss = mc.gelu(), mc.huber()
        target = sample_target(d, seed=11)
        data = sample_dataset(int(delta * d), target, seed=11)
        p = mc.init_params(d, 1, rng=np.random.default_rng(11))
        for _ in range(3):
            p = gd_step(p, act, loss, data, 1.5)[0]
        blk = hessian_block(p, act, loss, data)
        ev = esd(blk).eigenvalues
        law = GLaw(blk.g, data.x @ target.theta_star)
        xs, cdf = spectral_cdf(law, delta, ev[0] - 0.3, ev[-1] + 0.3, points=1500)
        assert kolmogorov_distance(ev, lambda x: np.interp(x, xs, cdf)) <= 0.05
        # ev[0] may be the detached outlier; the bulk starts at ev[1]
        assert abs(left_edge(law, delta) - ev[1]) <= 0.05
