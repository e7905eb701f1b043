"""Generator/critic objectives, evaluated on compressed-HDR tensors (B, 3, H, W)."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class LossWeights:
    l1: float = 5.0
    perc: float = 5.0
    adv: float = 0.2

    def __post_init__(self):
        if min(self.l1, self.perc, self.adv) < 0:
            raise ValueError("loss weights must be non-negative")


def l1_loss(pred, target):
    return T.mean(T.tabs(T.as_tensor(pred) - T.as_tensor(target)))


def identity_extractor(x):
    return [T.as_tensor(x)]


def _avg_pool2(x):
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


class PyramidExtractor:
    """Three-level Laplacian pyramid, each level through a fixed random 3x3 conv.

    Weights are drawn once from ``seed`` and never trained.  Padding follows
    the ERP: circular across longitude, reflect at the poles.
    """

    def __init__(self, channels=3, features=8, levels=3, seed=1234):
        rng = np.random.default_rng(seed)
        self.levels = levels
        self.weights = [rng.standard_normal((features, channels, 3, 3)) * np.sqrt(2.0 / (9 * channels))
                        for _ in range(levels)]

    def pyramid(self, x):
        gauss = [x]
        for _ in range(self.levels - 1):
            gauss.append(_avg_pool2(gauss[-1]))
        bands = [g - T.upsample_nearest(n, 2, axes=(2, 3)) for g, n in zip(gauss[:-1], gauss[1:])]
        return bands + [gauss[-1]]

    def __call__(self, x):
        x = T.as_tensor(x)
        out = []
        for band, w in zip(self.pyramid(x), self.weights):
            band = T.pad(band, {2: (1, 1)}, mode="reflect")
            band = T.pad(band, {3: (1, 1)}, mode="circular")
            out.append(T.leaky_relu(T.conv2d(band, w.astype(x.dtype)), 0.2))
        return out


def perceptual_loss(extractor, pred, target):
    """Sum over feature levels of the mean absolute feature difference."""
    fp = extractor(pred)
    ft = extractor(target)
    if len(fp) != len(ft):
        raise T.ShapeError(f"extractor returned {len(fp)} vs {len(ft)} levels")
    total = None
    for a, b in zip(fp, ft):
        if a.shape != b.shape:
            raise T.ShapeError(f"feature level shapes differ: {a.shape} vs {b.shape}")
        term = T.mean(T.tabs(a - T.as_tensor(b)))
        total = term if total is None else total + term
    return total


def ralsgan_losses(d_real, d_fake):
    """Relativistic average least-squares critic and generator losses."""
    d_real, d_fake = T.as_tensor(d_real), T.as_tensor(d_fake)
    mean_r = T.mean(d_real)
    mean_f = T.mean(d_fake)
    loss_d = T.mean((d_real - mean_f - 1.0) ** 2) + T.mean((d_fake - mean_r + 1.0) ** 2)
    loss_g = T.mean((d_fake - mean_r - 1.0) ** 2) + T.mean((d_real - mean_f + 1.0) ** 2)
    return loss_d, loss_g


def log_gan_losses(d_real, d_fake):
    """Saturating log-loss form: the critic maximises log D(x) + log(1 - D(G(z)))."""
    d_real, d_fake = T.as_tensor(d_real), T.as_tensor(d_fake)
    # log sigmoid(x) = -softplus(-x); log(1 - sigmoid(x)) = -softplus(x)
    value = -T.mean(T.softplus(-d_real)) - T.mean(T.softplus(d_fake))
    return -value, value


ADVERSARIAL = {"ralsgan": ralsgan_losses, "log": log_gan_losses}


def total_generator_loss(weights, l1, perc, adv):
    return weights.l1 * l1 + weights.perc * perc + weights.adv * adv
