import math

import numpy as np
import pytest

from oracles import frechet_sqrtm, mse_psnr, ssim_bruteforce
from sr3plus.core import InvalidArgument, Prng
from sr3plus.data import EvalPair, synth_texture
from sr3plus.degrade import bicubic_downsample
from sr3plus.diffusion import (
    DiffusionStepPlan,
    NoiseSchedule,
    SamplingDiverged,
    schedule_coeffs,
)
from sr3plus.metrics import (
    FeatureExtractor,
    MetricsReport,
    evaluate,
    extract_features,
    feature_stats,
    frechet_distance,
    psnr,
    ssim,
    upsample,
)

SCHED = NoiseSchedule()


class TestPsnr:
    def test_identical_is_cap(self):
        a = Prng(0).uniform(size=(8, 8, 3))
        assert psnr(a, a) == 99.0

    def test_constant_offset(self):
        a = np.full((10, 10, 1), 0.2)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_matches_bruteforce(self):
        p = Prng(1)
        for _ in range(5):
            a, b = p.uniform(size=(9, 7, 3)), p.uniform(size=(9, 7, 3))
            assert psnr(a, b) == pytest.approx(mse_psnr(a, b), abs=1e-9)

    def test_dim_mismatch(self):
        with pytest.raises(InvalidArgument):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_accepts_image_tensors(self):
        a = synth_texture(Prng(2), 16)
        assert psnr(a, a.data) == 99.0


class TestSsim:
    def test_identical_is_one(self):
        a = synth_texture(Prng(3), 24)
        assert ssim(a, a) == 1.0

    def test_constant_images(self):
        c1, c2 = 0.01**2, 0.03**2
        expected = (c1 * c2) / ((1 + c1) * c2)
        value = ssim(np.zeros((16, 16, 1)), np.ones((16, 16, 1)))
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(1e-4 / 1.0001, rel=1e-9)

    def test_matches_bruteforce(self):
        p = Prng(4)
        a = p.uniform(size=(16, 14, 3))
        b = np.clip(a + 0.2 * p.normal(a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_bruteforce(a, b), abs=1e-6)

    def test_symmetric_and_bounded(self):
        p = Prng(5)
        for _ in range(5):
            a, b = p.uniform(size=(12, 12, 3)), p.uniform(size=(12, 12, 3))
            assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
            assert -1.0 <= ssim(a, b) <= 1.0

    def test_too_small(self):
        with pytest.raises(InvalidArgument):
            ssim(np.zeros((10, 12, 1)), np.zeros((10, 12, 1)))


class TestFeatures:
    def test_determinism_and_shape(self):
        imgs = Prng(6).uniform(size=(100, 16, 16, 3))
        ex = FeatureExtractor(seed=3, feature_dim=64)
        f = extract_features(imgs, ex)
        assert f.shape == (100, 64)
        assert np.array_equal(f, extract_features(imgs, FeatureExtractor(seed=3)))
        assert not np.array_equal(f, extract_features(imgs, FeatureExtractor(seed=4)))

    def test_blend_is_closer_than_unrelated(self):
        p = Prng(7)
        ex = FeatureExtractor()
        a = np.stack([synth_texture(p, 32).data for _ in range(100)])
        b = np.stack([synth_texture(p, 32).data for _ in range(100)])
        blend = 0.5 * a + 0.5 * p.uniform(size=a.shape)
        fa, fb, fn = (extract_features(x, ex) for x in (a, b, blend))

        def cos(u, v):
            return np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))

        assert cos(fa, fn).mean() > cos(fa, fb).mean()

    def test_bad_kind(self):
        with pytest.raises(InvalidArgument):
            FeatureExtractor(kind="inception")


class TestFrechet:
    def test_identical_is_zero(self):
        f = Prng(8).normal((500, 6))
        mu, cov = feature_stats(f)
        assert abs(frechet_distance(mu, cov, mu, cov)) < 1e-6

    def test_shifted_identity(self):
        v = np.array([0.3, -1.2, 2.0, 0.5])
        assert frechet_distance(np.zeros(4), np.eye(4), v, np.eye(4)) == pytest.approx(v @ v, abs=1e-6)

    @pytest.mark.parametrize("a, b, d", [(1.0, 4.0, 3), (0.2, 0.3, 10), (2.5, 2.5, 5)])
    def test_isotropic(self, a, b, d):
        mu = np.ones(d)
        expected = d * (math.sqrt(a) - math.sqrt(b)) ** 2
        assert frechet_distance(mu, a * np.eye(d), mu, b * np.eye(d)) == pytest.approx(expected, abs=1e-6)

    def test_matches_sqrtm_route(self):
        p = Prng(9)
        for _ in range(5):
            x, y = p.normal((200, 5)), p.normal((200, 5)) @ p.normal((5, 5))
            m1, c1 = feature_stats(x)
            m2, c2 = feature_stats(y + 0.3)
            assert frechet_distance(m1, c1, m2, c2) == pytest.approx(frechet_sqrtm(m1, c1, m2, c2),
                                                                   rel=1e-6)
            assert frechet_distance(m1, c1, m2, c2) == pytest.approx(
                frechet_distance(m2, c2, m1, c1), rel=1e-9)

    def test_rank_deficient_is_nonnegative(self):
        f = Prng(10).normal((3, 8))
        mu, cov = feature_stats(f)
        assert frechet_distance(mu, cov, mu, cov) >= 0.0

    def test_dim_mismatch(self):
        with pytest.raises(InvalidArgument):
            frechet_distance(np.zeros(3), np.eye(3), np.zeros(2), np.eye(2))
        with pytest.raises(InvalidArgument):
            frechet_distance(np.zeros(3), np.ones((3, 2)), np.zeros(3), np.eye(3))


def eval_pairs(n=6, size=32):
    p = Prng(11)
    pairs = []
    for i in range(n):
        hr = synth_texture(p, size)
        pairs.append(EvalPair(bicubic_downsample(hr), hr, f"img{i}", (0, 0)))
    return pairs


def steering_oracle(targets):
    """Denoiser whose implied x_hat is always ``targets``."""
    def den(z, t, c, tau):
        a, b = schedule_coeffs(SCHED, t)
        return (z - a * targets) / b
    return den


class TestEvaluate:
    def test_perfect_model(self):
        pairs = eval_pairs()
        hr = np.stack([p.hr.data for p in pairs]).astype(np.float64)
        report = evaluate(steering_oracle(hr), pairs, 0.1, SCHED, DiffusionStepPlan(16),
                          FeatureExtractor(), Prng(12))
        assert report.psnr_mean == 99.0
        assert report.ssim_mean == pytest.approx(1.0, abs=1e-9)
        assert report.frechet < 1e-3
        assert report.n_pairs == len(pairs) and report.t_eval == 0.1

    def test_bicubic_model_is_worse(self):
        pairs = eval_pairs()
        hr = np.stack([p.hr.data for p in pairs]).astype(np.float64)
        bic = upsample(np.stack([p.lr.data for p in pairs]).astype(np.float64))
        args = (SCHED, DiffusionStepPlan(16), FeatureExtractor(), Prng(13))
        perfect = evaluate(steering_oracle(hr), pairs, 0.0, *args)
        blurry = evaluate(steering_oracle(np.clip(bic, 0, 1)), pairs, 0.0, *args)
        assert blurry.frechet > perfect.frechet
        assert blurry.psnr_mean < perfect.psnr_mean

    def test_divergence_names_pairs(self):
        pairs = eval_pairs(4)

        def den(z, t, c, tau):
            out = np.zeros_like(z)
            out[2] = np.nan
            return out

        with pytest.raises(SamplingDiverged) as err:
            evaluate(den, pairs, 0.1, SCHED, DiffusionStepPlan(4), FeatureExtractor(), Prng(0))
        assert err.value.items == [2]

    def test_empty_set(self):
        with pytest.raises(InvalidArgument):
            evaluate(None, [], 0.1, SCHED, DiffusionStepPlan(4), FeatureExtractor(), Prng(0))

    def test_report_requires_pairs(self):
        with pytest.raises(InvalidArgument):
            MetricsReport(1.0, 1.0, 0.0, 0, 0.1)

    def test_deterministic(self):
        pairs = eval_pairs(3)
        den = lambda z, t, c, tau: 0.5 * z
        args = (SCHED, DiffusionStepPlan(8), FeatureExtractor())
        r1, s1 = evaluate(den, pairs, 0.1, *args, Prng(14), return_samples=True)
        r2, s2 = evaluate(den, pairs, 0.1, *args, Prng(14), return_samples=True)
        assert r1 == r2 and np.array_equal(s1, s2)
