import numpy as np
import pytest

from beatdiff.diffusion import (CLEAN, NEGATIVE, POSITIVE, LatentSample, NoisePair,
                                diffuse_pair, reverse_step, sample)
from beatdiff.schedule import build_linear_schedule


@pytest.fixture
def s3():
    return build_linear_schedule(3, 0.1, 0.3)


class TestLatentSample:
    def test_clean_tag_rules(self):
        LatentSample(z=np.zeros(3))  # fine
        with pytest.raises(ValueError):
            LatentSample(z=np.zeros(3), t=0, branch=POSITIVE)
        with pytest.raises(ValueError):
            LatentSample(z=np.zeros(3), t=2, branch=CLEAN)
        with pytest.raises(ValueError):
            LatentSample(z=np.zeros(3), t=1, branch="sideways")


class TestNoisePair:
    def test_mirror_is_exact(self):
        eps = np.random.default_rng(0).standard_normal((2, 4, 4))
        pair = NoisePair(eps=eps)
        np.testing.assert_array_equal(pair.eps_neg, -eps)


class TestDiffusePair:
    def test_mirror_symmetry(self, s3):
        rng = np.random.default_rng(1)
        z0 = LatentSample(z=rng.standard_normal((1, 4, 4)))
        eps = NoisePair(eps=rng.standard_normal((1, 4, 4)))
        zp, zn = diffuse_pair(z0, 2, eps, s3)
        np.testing.assert_allclose(zp.z + zn.z, 2 * np.sqrt(0.72) * z0.z, atol=1e-12)
        assert zp.branch == POSITIVE and zn.branch == NEGATIVE
        assert zp.t == zn.t == 2

    def test_zero_signal(self, s3):
        eps = NoisePair(eps=np.random.default_rng(2).standard_normal(8))
        zp, zn = diffuse_pair(LatentSample(z=np.zeros(8)), 3, eps, s3)
        np.testing.assert_allclose(zp.z, np.sqrt(1 - 0.504) * eps.eps, atol=1e-15)
        np.testing.assert_array_equal(zn.z, -zp.z)

    def test_scalar_closed_form(self, s3):
        # sqrt(0.72) + sqrt(0.28) and sqrt(0.72) - sqrt(0.28)
        zp, zn = diffuse_pair(LatentSample(z=np.array(1.0)), 2,
                              NoisePair(eps=np.array(1.0)), s3)
        assert float(zp.z) == pytest.approx(1.3776783996367752, abs=1e-12)
        assert float(zn.z) == pytest.approx(0.3193778752109391, abs=1e-12)

    def test_negative_branch_equals_positive_with_mirrored_noise(self, s3):
        rng = np.random.default_rng(3)
        z0 = LatentSample(z=rng.standard_normal((2, 3)))
        eps = rng.standard_normal((2, 3))
        _, zn = diffuse_pair(z0, 2, NoisePair(eps=eps), s3)
        zp_mirror, _ = diffuse_pair(z0, 2, NoisePair(eps=-eps), s3)
        np.testing.assert_array_equal(zn.z, zp_mirror.z)

    def test_mirror_invariant_many_random_triples(self, s3):
        rng = np.random.default_rng(4)
        for _ in range(200):
            t = int(rng.integers(1, 4))
            z0 = rng.standard_normal(16)
            eps = rng.standard_normal(16)
            zp, zn = diffuse_pair(LatentSample(z=z0), t, NoisePair(eps=eps), s3)
            np.testing.assert_allclose(zp.z + zn.z, 2 * np.sqrt(s3.abar[t - 1]) * z0,
                                       atol=1e-12)

    def test_rejects_noised_input(self, s3):
        noisy = LatentSample(z=np.zeros(3), t=1, branch=POSITIVE)
        with pytest.raises(ValueError):
            diffuse_pair(noisy, 1, NoisePair(eps=np.zeros(3)), s3)

    def test_rejects_shape_mismatch(self, s3):
        with pytest.raises(ValueError):
            diffuse_pair(LatentSample(z=np.zeros(3)), 1, NoisePair(eps=np.zeros(4)), s3)

    def test_rejects_bad_t(self, s3):
        with pytest.raises(ValueError):
            diffuse_pair(LatentSample(z=np.zeros(3)), 4, NoisePair(eps=np.zeros(3)), s3)


class TestReverseStep:
    def test_one_step_inversion_identity(self):
        s1 = build_linear_schedule(1, 0.5, 0.5)
        rng = np.random.default_rng(5)
        z0 = LatentSample(z=rng.standard_normal(6))
        eps = rng.standard_normal(6)
        zp, _ = diffuse_pair(z0, 1, NoisePair(eps=eps), s1)
        rec = reverse_step(zp, eps, 1, s1)
        np.testing.assert_allclose(rec.z, z0.z, atol=1e-10)
        assert rec.t == 0 and rec.branch == CLEAN

    def test_zero_fixed_point(self, s3):
        zt = LatentSample(z=np.zeros(4), t=2, branch=POSITIVE)
        out = reverse_step(zt, np.zeros(4), 2, s3)
        np.testing.assert_array_equal(out.z, np.zeros(4))

    def test_scalar_posterior_mean(self, s3):
        # (1/sqrt(0.8)) * (1 - 0.2/sqrt(0.28) * 0.5)
        zt = LatentSample(z=np.array(1.0), t=2, branch=POSITIVE)
        out = reverse_step(zt, np.array(0.5), 2, s3)
        assert float(out.z) == pytest.approx(0.9067454250677657, abs=1e-12)
        assert out.t == 1 and out.branch == POSITIVE

    def test_injected_noise_scaled_by_sqrt_beta(self, s3):
        zt = LatentSample(z=np.zeros(4), t=2, branch=NEGATIVE)
        noise = np.ones(4)
        out = reverse_step(zt, np.zeros(4), 2, s3, rng_noise=noise)
        np.testing.assert_allclose(out.z, np.sqrt(0.2) * noise, atol=1e-15)
        assert out.branch == NEGATIVE

    def test_no_noise_added_at_t1(self, s3):
        zt = LatentSample(z=np.zeros(4), t=1, branch=POSITIVE)
        out = reverse_step(zt, np.zeros(4), 1, s3, rng_noise=np.ones(4))
        np.testing.assert_array_equal(out.z, np.zeros(4))

    def test_rejects_shape_mismatch(self, s3):
        zt = LatentSample(z=np.zeros(4), t=2, branch=POSITIVE)
        with pytest.raises(ValueError):
            reverse_step(zt, np.zeros(5), 2, s3)


class TestSample:
    def test_zero_denoiser_single_step_rescale(self):
        s1 = build_linear_schedule(1, 0.19, 0.19)
        out = sample(lambda z, t, c: np.zeros_like(z), None, s1, (8,), seed=11)
        z_T = np.random.default_rng(11).standard_normal(8)
        np.testing.assert_allclose(out.z, z_T / np.sqrt(1 - 0.19), atol=1e-12)
        assert out.t == 0 and out.branch == CLEAN

    def test_deterministic_given_seed(self):
        s = build_linear_schedule(5, 0.05, 0.2)
        rng = np.random.default_rng(6)
        w = rng.standard_normal(4)
        denoiser = lambda z, t, c: 0.1 * z + 0.01 * w
        a = sample(denoiser, None, s, (4,), seed=3)
        b = sample(denoiser, None, s, (4,), seed=3)
        np.testing.assert_array_equal(a.z, b.z)

    def test_gaussian_target_analytic_score(self):
        # the exact noise predictor for z0 ~ N(m, v) is
        # sqrt(1-abar) (z - sqrt(abar) m) / (abar v + 1 - abar); ancestral
        # sampling then reproduces the target mean (all coordinates iid, so
        # one wide chain gives many draws at once)
        m, v = 2.0, 1.0
        s = build_linear_schedule(200, 1e-3, 0.1)

        def denoiser(z, t, c):
            ab = s.abar[t - 1]
            return np.sqrt(1 - ab) * (z - np.sqrt(ab) * m) / (ab * v + 1 - ab)

        out = sample(denoiser, None, s, (10000,), seed=0)
        se = np.sqrt(v / 10000)
        assert abs(out.z.mean() - m) < 3 * se
        assert abs(out.z.std() - np.sqrt(v)) < 0.05

    def test_rejects_bad_branch_and_propagates_failures(self):
        s = build_linear_schedule(2, 0.1, 0.2)
        with pytest.raises(ValueError):
            sample(lambda z, t, c: z, None, s, (2,), seed=0, branch=CLEAN)

        def failing(z, t, c):
            raise RuntimeError("conditioning dimension mismatch")

        with pytest.raises(RuntimeError):
            sample(failing, None, s, (2,), seed=0)

    def test_rejects_denoiser_shape_drift(self):
        s = build_linear_schedule(2, 0.1, 0.2)
        with pytest.raises(ValueError):
            sample(lambda z, t, c: z[:1], None, s, (4,), seed=0)
