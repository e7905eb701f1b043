"""Self-contained verification suites shared by the CLI and the test-suite."""

import numpy as np

from . import attention as A
from . import geometry as G
from . import tensor as T
from .ibl import diffuse_irradiance, metrics
from .imageio import compress_hdr, expand_hdr, float_to_rgbe, read_rgbe, rgbe_to_float, write_rgbe
from .losses import identity_extractor, l1_loss, perceptual_loss, ralsgan_losses

GRAD_TOL = 1e-4


def _op_cases(rng):
    """(name, function of a tensor list, input arrays) for every differentiable op."""
    def r(*shape, lo=None, hi=None):
        if lo is None:
            return rng.standard_normal(shape)
        return rng.uniform(lo, hi, shape)

    idx = np.array([2, 0, 2, 1])
    res_idx = rng.integers(0, 6, (5, 3))
    res_w = rng.random((5, 3))
    cases = [
        ("add", lambda x: x[0] + x[1], [r(3, 4), r(4)]),
        ("sub", lambda x: x[0] - x[1], [r(3, 4), r(3, 1)]),
        ("mul", lambda x: x[0] * x[1], [r(3, 4), r(3, 4)]),
        ("div", lambda x: x[0] / x[1], [r(3, 4), r(3, 4, lo=0.5, hi=2.0)]),
        ("power", lambda x: x[0] ** 3, [r(3, 4)]),
        ("exp", lambda x: T.exp(x[0]), [r(3, 4)]),
        ("log", lambda x: T.log(x[0]), [r(3, 4, lo=0.5, hi=3.0)]),
        ("sqrt", lambda x: T.sqrt(x[0]), [r(3, 4, lo=0.5, hi=3.0)]),
        ("abs", lambda x: T.tabs(x[0]), [r(3, 4, lo=0.2, hi=1.0) * rng.choice([-1, 1], (3, 4))]),
        ("clamp", lambda x: T.clamp(x[0], -0.5, 0.5), [np.array([[-1.0, -0.2, 0.1, 0.9]])]),
        ("tanh", lambda x: T.tanh(x[0]), [r(3, 4)]),
        ("gelu", lambda x: T.gelu(x[0]), [r(3, 4)]),
        ("leaky_relu", lambda x: T.leaky_relu(x[0], 0.2), [r(3, 4, lo=0.2, hi=1.0) * rng.choice([-1, 1], (3, 4))]),
        ("softplus", lambda x: T.softplus(x[0]), [r(3, 4)]),
        ("matmul", lambda x: x[0] @ x[1], [r(2, 3, 4), r(4, 5)]),
        ("reshape", lambda x: x[0].reshape(4, 3), [r(3, 4)]),
        ("permute", lambda x: x[0].permute(2, 0, 1), [r(2, 3, 4)]),
        ("getitem_basic", lambda x: x[0][1:, ::2], [r(3, 4)]),
        ("getitem_advanced", lambda x: x[0][idx], [r(3, 4)]),
        ("concat", lambda x: T.concat([x[0], x[1]], axis=1), [r(3, 2), r(3, 4)]),
        ("stack", lambda x: T.stack([x[0], x[1]], axis=0), [r(3, 4), r(3, 4)]),
        ("roll", lambda x: T.roll(x[0], 3, axis=1), [r(3, 8)]),
        ("pad_zero", lambda x: T.pad(x[0], {1: (1, 2)}, mode="zero"), [r(3, 5)]),
        ("pad_circular", lambda x: T.pad(x[0], {1: (2, 1)}, mode="circular"), [r(3, 5)]),
        ("pad_reflect", lambda x: T.pad(x[0], {0: (1, 1), 1: (2, 2)}, mode="reflect"), [r(3, 5)]),
        ("take_rows", lambda x: T.take_rows(x[0], idx, axis=0), [r(3, 4)]),
        ("sum", lambda x: T.tsum(x[0], axis=1, keepdims=True), [r(3, 4)]),
        ("mean", lambda x: T.mean(x[0], axis=0), [r(3, 4)]),
        ("softmax", lambda x: T.softmax(x[0], axis=-1), [r(3, 4)]),
        ("layer_norm", lambda x: T.layer_norm(x[0], x[1], x[2]), [r(3, 6), r(6), r(6)]),
        ("conv2d", lambda x: T.conv2d(x[0], x[1], x[2], stride=1), [r(1, 2, 5, 6), r(3, 2, 3, 3), r(3)]),
        ("conv2d_strided", lambda x: T.conv2d(x[0], x[1], None, stride=2), [r(1, 2, 6, 6), r(2, 2, 4, 4)]),
        ("upsample_nearest", lambda x: T.upsample_nearest(x[0], 2, axes=(1, 2)), [r(1, 2, 3, 2)]),
        ("resample", lambda x: T.resample(x[0], res_idx, res_w), [r(2, 6, 3)]),
    ]
    return cases


def _attention_cases(rng, h=4, w=8, dim=8, heads=2, ws=2):
    """Each attention layer as a function of (grid, qkv weight, relative bias)."""
    cfg = A.AttentionConfig(dim=dim, heads=heads, window_size=ws)
    cases = []
    for name, fn in (("w_msa", A.w_msa), ("psw_msa", A.psw_msa), ("pam", A.pam)):
        weights = A.AttentionWeights(rng, cfg)

        def f(x, fn=fn, weights=weights):
            weights.qkv.weight = x[1]
            weights.rel_bias = x[2]
            return fn(x[0], cfg, weights)

        cases.append((name, f, [rng.standard_normal((1, h, w, dim)),
                                weights.qkv.weight.data.astype(np.float64),
                                weights.rel_bias.data.astype(np.float64)]))
    return cases


def gradient_suite(seed=0):
    """Max relative gradient error per op and attention layer, in 64-bit."""
    rng = np.random.default_rng(seed)
    results = []
    with T.precision(np.float64):
        for name, f, arrays in _op_cases(rng) + _attention_cases(rng):
            xs = [T.Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
            with T.no_grad():
                shape = f(xs).shape
            probe = rng.standard_normal(shape)
            # scalar probe sum(out * R) with a fixed random R
            err = T.grad_check(lambda x, f=f, probe=probe: T.tsum(f(x) * probe), xs)
            results.append((name, err))
    return results


def spherical_adjacency(H, ws):
    """Largest |geodesic - pi/H| between vertically adjacent tokens after the pano shift.

    Returned as a fraction of the row spacing pi/H.
    """
    W = 2 * H
    ids = np.arange(H * W, dtype=np.float64).reshape(1, H, W, 1)
    with T.precision(np.float64), T.no_grad():
        ext = A.pano_shift(T.Tensor(ids), ws).data[0, :, :, 0].astype(np.int64)
    r, c = np.divmod(ext, W)
    d = G.pix_to_dir(r, c, H, W)
    geo = G.geodesic(d[:-1], d[1:])
    step = np.pi / H
    return float(np.max(np.abs(geo - step)) / step)


def column_differences(images):
    """Seam statistics for (N, C, H, W) outputs.

    Per image, a column pair scores its max |difference| over channels and
    rows; scores are averaged over images.  Returns (wrap, interior) where
    wrap compares column 0 with column W-1 and interior holds the W-1
    neighbouring pairs inside the raster.
    """
    x = np.asarray(images, dtype=np.float64)
    wrap = float(np.abs(x[..., 0] - x[..., -1]).max(axis=(1, 2)).mean())
    interior = np.abs(np.diff(x, axis=-1)).max(axis=(1, 2)).mean(axis=0)
    return wrap, interior


def invariant_suite(seed=0):
    """(name, passed, detail) for a quick battery of exact/near-exact properties."""
    rng = np.random.default_rng(seed)
    out = []

    def check(name, value, ok):
        out.append((name, bool(ok), f"{value:.3g}" if isinstance(value, float) else str(value)))

    H, W = 64, 128
    rr = rng.uniform(0.01, H - 0.01, 1000)
    cc = rng.uniform(0, W, 1000)
    r2, c2 = G.dir_to_pix(G.coords_to_dir(rr, cc, H, W), H, W)
    err = float(max(np.abs(r2 - rr).max(), np.abs((c2 - cc + W / 2) % W - W / 2).max()))
    check("pix_dir_roundtrip", err, err < 1e-6)
    err = float(abs(G.solid_angle_map(H, W).sum() - 4 * np.pi))
    check("solid_angle_sum", err, err < 1e-9)

    img = np.exp(rng.uniform(-8, 6, (8, 16, 3))).astype(np.float32)
    back = rgbe_to_float(float_to_rgbe(img))
    rel = float(np.max(np.abs(back - img) / img.max(axis=-1, keepdims=True)))
    check("rgbe_relative_error", rel, rel <= 1 / 256)
    data = write_rgbe(img)
    check("rgbe_idempotent", "byte-exact" if write_rgbe(read_rgbe(data)) == data else "differs",
          write_rgbe(read_rgbe(data)) == data)
    x = rng.uniform(0, 90, 1000)
    err = float(np.abs(expand_hdr(compress_hdr(x)) - x).max() / 90)
    check("compress_expand", err, err < 1e-5)

    for h in (8, 16, 64):
        err = spherical_adjacency(h, min(8, h))
        check(f"psw_adjacency_H{h}", err, err <= 0.1)

    e = float(abs(diffuse_irradiance(np.ones((H, W, 3)), np.array([0.0, 0.0, 1.0]))[0] / np.pi - 1))
    check("uniform_irradiance_pi", e, e < 0.01)
    a = rng.random((6, 6, 3)) + 0.1
    m = metrics(a, a)
    check("metrics_identical", m.psnr, m.rmse == 0 and m.si_rmse == 0 and m.psnr == 99.0)
    m2 = metrics(2 * a, a)
    check("si_rmse_scale", m2.si_rmse, m2.si_rmse < 1e-12 and m2.rmse > 0)

    p, q = rng.random((1, 3, 4, 8)), rng.random((1, 3, 4, 8))
    with T.precision(np.float64):
        d = float(abs(l1_loss(p, q).item() - perceptual_loss(identity_extractor, p, q).item()))
        ld, lg = ralsgan_losses(np.full(4, 0.3), np.full(4, 0.3))
    check("perceptual_identity_is_l1", d, d == 0)
    check("ralsgan_constant_logits", ld.item(), ld.item() == 2 and lg.item() == 2)

    pano = rng.random((8, 16, 3))
    check("yaw180_twice", "exact", np.array_equal(G.yaw_roll(G.yaw_roll(pano, 8), 8), pano))
    return out
