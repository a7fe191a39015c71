import numpy as np
import pytest

from planpatch import config as cfg
from planpatch import vae as vz


def toy_rasters(n=3, seed=0):
    rng = np.random.default_rng(seed)
    out = np.zeros((n, 256))
    for i in range(n):
        img = np.zeros((16, 16))
        r, c = rng.integers(2, 12, size=2)
        img[r:r + 4, c:c + 4] = 0.66
        out[i] = img.reshape(-1)
    return out


class TestEncode:
    def test_zero_network_zero_raster(self):
        v = vz.VaeParams.zeros()
        mu, sigma = vz.encode(v, np.zeros(256))
        assert np.all(mu == 0.0)
        assert np.all(sigma == 1.0)  # log-variance head at 0

    def test_deterministic(self):
        v = vz.VaeParams.init(seed=1)
        r = toy_rasters(1)[0]
        m1, s1 = vz.encode(v, r)
        m2, s2 = vz.encode(v, r)
        assert np.array_equal(m1, m2) and np.array_equal(s1, s2)

    def test_single_pixel_sensitivity(self):
        # oracle: re-run the forward pass on the perturbed raster
        v = vz.VaeParams.init(seed=2)
        r = toy_rasters(1, seed=3)[0]
        r2 = r.copy()
        r2[77] = min(1.0, r2[77] + 0.5)
        m1, _ = vz.encode(v, r)
        m2, _ = vz.encode(v, r2)
        assert not np.allclose(m1, m2)

    def test_sigma_strictly_positive(self):
        v = vz.VaeParams.init(seed=4)
        _, sigma = vz.encode(v, toy_rasters(1, seed=5)[0])
        assert np.all(sigma > 0)


class TestReparameterize:
    def test_zero_eps(self):
        mu = np.array([0.3, -0.2, 0.1, 0.0, 1.0])
        z = vz.reparameterize(mu, np.ones(5), np.zeros(5))
        assert np.array_equal(z, mu)

    def test_zero_sigma_limit(self):
        mu = np.arange(5.0)
        z = vz.reparameterize(mu, np.zeros(5), np.ones(5) * 7.0)
        assert np.array_equal(z, mu)

    def test_arithmetic(self):
        z = vz.reparameterize(np.full(5, 1.0), np.full(5, 4.0), np.full(5, 1.0))
        assert np.allclose(z, 3.0)

    def test_affine_in_eps(self):
        mu = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
        sigma = np.array([0.5, 1.0, 2.0, 4.0, 0.25])
        e1 = np.ones(5)
        z0 = vz.reparameterize(mu, sigma, np.zeros(5))
        z1 = vz.reparameterize(mu, sigma, e1)
        assert np.allclose(z1 - z0, np.sqrt(sigma))


class TestLoss:
    def test_decoder_zero_on_zero_raster(self):
        v = vz.VaeParams.zeros()
        assert vz.loss(v, np.zeros(256), np.zeros(5)) == 0.0

    def test_matches_reimplemented_forward(self):
        # oracle: independent numpy forward pass
        v = vz.VaeParams.init(seed=6)
        v.kl_weight = 0.3
        r = toy_rasters(1, seed=7)[0]
        eps = np.random.default_rng(8).standard_normal(5)
        w = v.weights
        h1 = np.tanh(w["W1"] @ r + w["b1"])
        mu = w["Wm"] @ h1 + w["bm"]
        lv = w["Wv"] @ h1 + w["bv"]
        z = mu + eps * np.exp(0.5 * lv)
        h2 = np.tanh(w["W2"] @ z + w["b2"])
        xr = w["W3"] @ h2 + w["b3"]
        expected = np.mean((xr - r) ** 2) + 0.3 * 0.5 * np.sum(
            np.exp(lv) + mu ** 2 - 1.0 - lv)
        assert vz.loss(v, r, eps) == pytest.approx(expected, abs=1e-10)

    def test_perfect_reconstruction_zero(self):
        # decoder bias equal to the raster, everything else zero
        v = vz.VaeParams.zeros()
        r = toy_rasters(1, seed=9)[0]
        v.weights["b3"] = r.copy()
        assert vz.loss(v, r, np.zeros(5)) == pytest.approx(0.0, abs=1e-18)


class TestTrain:
    def test_epochs_zero_unchanged(self):
        v = vz.VaeParams.init(seed=10)
        out = vz.train(v, toy_rasters(), vz.TrainSpec(epochs=0), seed=1)
        for k in v.weights:
            assert np.array_equal(out.weights[k], v.weights[k])

    def test_loss_decreases(self):
        rs = toy_rasters(3, seed=11)
        v = vz.VaeParams.init(seed=12)
        spec = vz.TrainSpec(epochs=200, augmentation_factor=1)
        before = np.mean([vz.loss(v, r, np.zeros(5)) for r in rs])
        out = vz.train(v, rs, spec, seed=13)
        after = np.mean([vz.loss(out, r, np.zeros(5)) for r in rs])
        assert after < before

    def test_determinism(self):
        rs = toy_rasters(2, seed=14)
        spec = vz.TrainSpec(epochs=30, augmentation_factor=3)
        a = vz.train(vz.VaeParams.init(seed=15), rs, spec, seed=16)
        b = vz.train(vz.VaeParams.init(seed=15), rs, spec, seed=16)
        for k in a.weights:
            assert np.array_equal(a.weights[k], b.weights[k])

    def test_augmented_size(self):
        rs = toy_rasters(2, seed=17)
        X = vz.build_augmented(rs, 50, seed=18)
        assert X.shape == (100, 256)
        assert X.min() >= 0.0 and X.max() <= 1.0

    def test_monotone_below_stability_bound(self):
        # halve the step until the per-epoch loss sequence is non-increasing;
        # such a bound must exist well above the search floor
        rs = toy_rasters(3, seed=19)

        def losses_at(lr):
            v = vz.VaeParams.init(seed=20)
            v.noise_sigma = 0.0
            v.weights["bv"] -= 24.0  # posterior std ~3e-7: noise-free check
            seq = []
            cur = v
            for k in range(10):
                cur = vz.train(cur, rs,
                               vz.TrainSpec(epochs=1, augmentation_factor=1,
                                            learning_rate=lr), seed=21)
                seq.append(np.mean([vz.loss(cur, r, np.zeros(5)) for r in rs]))
            return seq

        lr = 0.05
        for _ in range(10):
            seq = losses_at(lr)
            if all(b <= a + 1e-9 for a, b in zip(seq, seq[1:])):
                break
            lr *= 0.5
        else:
            pytest.fail("no stable step size found by halving")
        assert lr > 1e-5


class TestGradientCheck:
    def test_backprop_matches_finite_differences(self):
        for seed in range(5):
            v = vz.VaeParams.init(seed=seed)
            v.kl_weight = 0.1 if seed % 2 else 0.0
            r = toy_rasters(1, seed=100 + seed)[0]
            eps = np.random.default_rng(seed).standard_normal(5)
            err = vz.gradient_check(v, r, eps, n_weights=100, seed=seed)
            assert err < 1e-4, f"seed {seed}: {err}"

    def test_corrupted_gradient_detected(self):
        v = vz.VaeParams.init(seed=30)
        r = toy_rasters(1, seed=31)[0]
        eps = np.random.default_rng(32).standard_normal(5)
        _, grads = vz.loss_and_grads(v, r, eps)
        grads["W3"] = grads["W3"] * 1.5 + 1e-3
        err = vz.gradient_check(v, r, eps, n_weights=100, seed=33,
                                grads_override=grads)
        assert err > 1e-2

    def test_zero_network_decoder_bias_grads(self):
        v = vz.VaeParams.zeros()
        _, grads = vz.loss_and_grads(v, np.zeros(256), np.zeros(5))
        assert np.all(grads["b3"] == 0.0)
        err = vz.gradient_check(v, np.zeros(256), np.zeros(5), n_weights=50,
                                seed=34)
        assert err < 1e-4


class TestSerialization:
    def test_json_roundtrip(self):
        v = vz.VaeParams.init(seed=40)
        again = vz.VaeParams.from_json(v.to_json())
        r = toy_rasters(1, seed=41)[0]
        m1, s1 = vz.encode(v, r)
        m2, s2 = vz.encode(again, r)
        assert np.allclose(m1, m2, atol=0) and np.allclose(s1, s2, atol=0)
