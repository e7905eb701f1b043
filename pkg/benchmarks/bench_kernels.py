"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--height 128]

The dispatcher picks one path per process from UFORMER360_NUMBA; here both
are called directly so a single run compares them.  Outputs are checked for
agreement before timing.
"""

import argparse
import time

import numpy as np

from uformer360 import _kernels as K
from uformer360 import geometry as G
from uformer360.imageio import float_to_rgbe


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(height, rng):
    H, W = height, 2 * height
    env = rng.random((H, W, 3)) ** 4 * 10
    dirs = G.pixel_dirs(H, W).reshape(-1, 3)
    weighted = (env * G.solid_angle_map(H, W)[..., None]).reshape(-1, 3)
    normals = G.pixel_dirs(32, 64).reshape(-1, 3)
    yield ("irradiance 32x64 normals", lambda f: f(normals, dirs, weighted),
           K.irradiance_numpy, K.irradiance_numba)

    n_src, m, d = 4096, 4096, 64
    idx = rng.integers(0, n_src, (m, 4))
    w = rng.random((m, 4))
    g = rng.standard_normal((8, m, d))
    yield ("scatter_add resample backward", lambda f: f(g, idx, w, n_src),
           K.scatter_add_numpy, K.scatter_add_numba)

    rgbe = float_to_rgbe(env.astype(np.float32))
    planes = [np.ascontiguousarray(rgbe[:, :, ch]) for ch in range(4)]
    yield ("rle_encode image planes", lambda f: [f(row) for p in planes for row in p],
           K.rle_encode_numpy, K.rle_encode_numba)
    lines = [np.concatenate([K.rle_encode_numpy(p[y]) for p in planes]) for y in range(H)]
    yield ("rle_decode image scanlines", lambda f: [f(buf, 0, W) for buf in lines],
           K.rle_decode_numpy, K.rle_decode_numba)


def same(a, b):
    if isinstance(a, (tuple, list)):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, (bytes, bytearray)):
        return bytes(a) == bytes(b)
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-10, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--height", type=int, default=128)
    args = ap.parse_args()
    if K.nb is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, call, f_np, f_nb in cases(args.height, rng):
        if not same(call(f_np), call(f_nb)):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_np = best_of(lambda: call(f_np), args.repeat)
        t_nb = best_of(lambda: call(f_nb), args.repeat)
        print(f"{name:32s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
