import numpy as np
import pytest

from uformer360 import losses as L
from uformer360 import tensor as T


def test_weights_are_non_negative():
    with pytest.raises(ValueError):
        L.LossWeights(adv=-1)


def test_l1_loss_value(f64):
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert float(L.l1_loss(a, a + np.array([[1, -1], [2, 0]])).data) == pytest.approx(1.0)


class TestPerceptual:
    def test_identity_extractor_reduces_to_l1(self, rng, f64):
        a, b = rng.random((2, 3, 8, 16)), rng.random((2, 3, 8, 16))
        p = L.perceptual_loss(L.identity_extractor, a, b).data
        assert float(p) == pytest.approx(float(L.l1_loss(a, b).data))

    def test_zero_on_identical_images(self, rng, f64):
        a = rng.random((1, 3, 16, 32))
        assert float(L.perceptual_loss(L.PyramidExtractor(), a, a).data) == 0.0

    def test_pyramid_levels(self, rng, f64):
        feats = L.PyramidExtractor()(rng.random((1, 3, 16, 32)))
        assert [f.shape for f in feats] == [(1, 8, 16, 32), (1, 8, 8, 16), (1, 8, 4, 8)]

    def test_pyramid_reconstructs_input(self, rng, f64):
        x = T.Tensor(rng.random((1, 3, 16, 32)))
        bands = L.PyramidExtractor().pyramid(x)
        rec = bands[-1]
        for b in reversed(bands[:-1]):
            rec = T.upsample_nearest(rec, 2, axes=(2, 3)) + b
        np.testing.assert_allclose(rec.data, x.data, atol=1e-12)

    def test_extractor_is_yaw_equivariant(self, rng, f64):
        x = rng.random((1, 3, 16, 32))
        ext = L.PyramidExtractor()
        a = ext(np.roll(x, 4, axis=3))[0].data
        np.testing.assert_allclose(a, np.roll(ext(x)[0].data, 4, axis=3), atol=1e-12)

    def test_level_mismatch(self, rng):
        with pytest.raises(T.ShapeError):
            L.perceptual_loss(lambda x: [T.as_tensor(x)] * (2 if x.shape[-1] == 8 else 1),
                              rng.random((1, 3, 4, 8)), rng.random((1, 3, 4, 16)))

    def test_gradient(self, rng, f64):
        ext = L.PyramidExtractor(seed=3)
        target = rng.random((1, 3, 8, 16))
        x = T.Tensor(rng.random((1, 3, 8, 16)))
        assert T.grad_check(lambda t: L.perceptual_loss(ext, t, target), x) < 1e-4


class TestAdversarial:
    def test_ralsgan_constant_logits(self, f64):
        d, g = L.ralsgan_losses(np.full((4, 1), 0.3), np.full((4, 1), 0.3))
        assert float(d.data) == pytest.approx(2.0)
        assert float(g.data) == pytest.approx(2.0)

    def test_ralsgan_oracle(self, rng, f64):
        r, f = rng.standard_normal((5, 1)), rng.standard_normal((5, 1))
        d, g = L.ralsgan_losses(r, f)
        ed = np.mean((r - f.mean() - 1) ** 2) + np.mean((f - r.mean() + 1) ** 2)
        eg = np.mean((f - r.mean() - 1) ** 2) + np.mean((r - f.mean() + 1) ** 2)
        assert float(d.data) == pytest.approx(ed)
        assert float(g.data) == pytest.approx(eg)

    def test_perfect_critic_minimises_d_loss(self, f64):
        d, _ = L.ralsgan_losses(np.full((2, 1), 0.5), np.full((2, 1), -0.5))
        assert float(d.data) == pytest.approx(0.0)

    def test_log_loss_oracle(self, rng, f64):
        r, f = rng.standard_normal((5, 1)), rng.standard_normal((5, 1))
        d, g = L.log_gan_losses(r, f)
        sig = lambda v: 1 / (1 + np.exp(-v))
        value = np.mean(np.log(sig(r))) + np.mean(np.log(1 - sig(f)))
        assert float(d.data) == pytest.approx(-value)
        assert float(g.data) == pytest.approx(value)

    def test_registry(self):
        assert set(L.ADVERSARIAL) == {"ralsgan", "log"}


def test_total_generator_loss_weights():
    w = L.LossWeights()
    assert L.total_generator_loss(w, 1.0, 2.0, 3.0) == pytest.approx(5 + 10 + 0.6)
