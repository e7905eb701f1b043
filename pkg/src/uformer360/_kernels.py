"""Hot inner loops, compiled with numba when available.

Set ``UFORMER360_NUMBA=0`` to force the pure-numpy/python path.  Both paths
are kept importable (``*_numpy`` / ``*_numba``) so tests and the benchmark can
compare them directly.
"""

import functools
import os

import numpy as np

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is an optional speedup
    nb = None

USE_NUMBA = nb is not None and os.environ.get("UFORMER360_NUMBA", "1").lower() not in ("0", "false", "off", "no")

if nb is not None:
    njit = functools.partial(nb.njit, cache=True, nogil=True)
else:  # pragma: no cover
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap


# ---------------------------------------------------------------------------
# weighted scatter-add: backward of a fixed-tap resampling


def scatter_add_numpy(g, idx, w, n_src):
    """out[b, idx[m, k]] += w[m, k] * g[b, m] for g of shape (B, M, D)."""
    B, M, D = g.shape
    out = np.zeros((B, n_src, D), dtype=g.dtype)
    K = idx.shape[1]
    for k in range(K):
        contrib = g * w[None, :, k, None].astype(g.dtype)
        for b in range(B):
            np.add.at(out[b], idx[:, k], contrib[b])
    return out


@njit
def _scatter_add_kernel(g, idx, w, out):
    B, M, D = g.shape
    K = idx.shape[1]
    for b in range(B):
        for k in range(K):
            for m in range(M):
                j = idx[m, k]
                wk = w[m, k]
                for d in range(D):
                    out[b, j, d] += wk * g[b, m, d]


def scatter_add_numba(g, idx, w, n_src):
    out = np.zeros((g.shape[0], n_src, g.shape[2]), dtype=g.dtype)
    _scatter_add_kernel(np.ascontiguousarray(g), np.ascontiguousarray(idx, dtype=np.int64),
                        np.ascontiguousarray(w, dtype=g.dtype), out)
    return out


def scatter_add(g, idx, w, n_src):
    if USE_NUMBA:
        return scatter_add_numba(g, idx, w, n_src)
    return scatter_add_numpy(g, idx, w, n_src)


# ---------------------------------------------------------------------------
# Radiance "new" run-length encoding, one channel of one scanline


def rle_encode_numpy(data):
    """Encode a uint8 vector with Radiance's adaptive RLE (runs of >= 4)."""
    out = bytearray()
    n = len(data)
    cur = 0
    while cur < n:
        beg_run = cur
        run_count = 0
        old_run_count = 0
        # find the next run of at least 4
        while run_count < 4 and beg_run < n:
            beg_run += run_count
            old_run_count = run_count
            run_count = 1
            while beg_run + run_count < n and run_count < 127 and data[beg_run] == data[beg_run + run_count]:
                run_count += 1
        # a short run right before the long one is cheaper as its own run
        if old_run_count > 1 and old_run_count == beg_run - cur:
            out.append(128 + old_run_count)
            out.append(int(data[cur]))
            cur = beg_run
        while cur < beg_run:
            nonrun = min(128, beg_run - cur)
            out.append(nonrun)
            out.extend(bytes(data[cur:cur + nonrun]))
            cur += nonrun
        if run_count >= 4:
            out.append(128 + run_count)
            out.append(int(data[beg_run]))
            cur += run_count
    return np.frombuffer(bytes(out), dtype=np.uint8)


@njit
def _rle_encode_kernel(data, out):
    n = data.shape[0]
    pos = 0
    cur = 0
    while cur < n:
        beg_run = cur
        run_count = 0
        old_run_count = 0
        while run_count < 4 and beg_run < n:
            beg_run += run_count
            old_run_count = run_count
            run_count = 1
            while beg_run + run_count < n and run_count < 127 and data[beg_run] == data[beg_run + run_count]:
                run_count += 1
        if old_run_count > 1 and old_run_count == beg_run - cur:
            out[pos] = 128 + old_run_count
            out[pos + 1] = data[cur]
            pos += 2
            cur = beg_run
        while cur < beg_run:
            nonrun = min(128, beg_run - cur)
            out[pos] = nonrun
            pos += 1
            for i in range(nonrun):
                out[pos + i] = data[cur + i]
            pos += nonrun
            cur += nonrun
        if run_count >= 4:
            out[pos] = 128 + run_count
            out[pos + 1] = data[beg_run]
            pos += 2
            cur += run_count
    return pos


def rle_encode_numba(data):
    data = np.ascontiguousarray(data, dtype=np.uint8)
    out = np.empty(2 * len(data) + 16, dtype=np.uint8)
    n = _rle_encode_kernel(data, out)
    return out[:n].copy()


def rle_encode(data):
    if USE_NUMBA:
        return rle_encode_numba(data)
    return rle_encode_numpy(data)


def rle_decode_numpy(buf, start, width):
    """Decode one RLE scanline (4 channel planes) starting after its 4-byte marker.

    Returns (uint8[width, 4], end_offset).  A negative end offset flags a
    malformed or truncated stream at byte ``-end - 1``.
    """
    out = np.zeros((width, 4), dtype=np.uint8)
    pos = start
    n = len(buf)
    for ch in range(4):
        i = 0
        while i < width:
            if pos >= n:
                return out, -pos - 1
            count = int(buf[pos])
            pos += 1
            if count > 128:
                count -= 128
                if i + count > width or pos >= n:
                    return out, -pos - 1
                out[i:i + count, ch] = buf[pos]
                pos += 1
            else:
                if count == 0 or i + count > width or pos + count > n:
                    return out, -pos - 1
                out[i:i + count, ch] = buf[pos:pos + count]
                pos += count
            i += count
    return out, pos


@njit
def _rle_decode_kernel(buf, start, width, out):
    pos = start
    n = buf.shape[0]
    for ch in range(4):
        i = 0
        while i < width:
            if pos >= n:
                return -pos - 1
            count = np.int64(buf[pos])
            pos += 1
            if count > 128:
                count -= 128
                if i + count > width or pos >= n:
                    return -pos - 1
                v = buf[pos]
                for j in range(count):
                    out[i + j, ch] = v
                pos += 1
            else:
                if count == 0 or i + count > width or pos + count > n:
                    return -pos - 1
                for j in range(count):
                    out[i + j, ch] = buf[pos + j]
                pos += count
            i += count
    return pos


def rle_decode_numba(buf, start, width):
    out = np.zeros((width, 4), dtype=np.uint8)
    end = _rle_decode_kernel(buf, np.int64(start), np.int64(width), out)
    return out, int(end)


def rle_decode(buf, start, width):
    if USE_NUMBA:
        return rle_decode_numba(buf, start, width)
    return rle_decode_numpy(buf, start, width)


# ---------------------------------------------------------------------------
# cosine-weighted environment integration


def irradiance_numpy(normals, dirs, weighted, chunk=512):
    """E[n] = sum_t weighted[t] * max(0, <normals[n], dirs[t]>)."""
    out = np.empty((normals.shape[0], weighted.shape[1]), dtype=np.float64)
    for s in range(0, normals.shape[0], chunk):
        cos = np.maximum(normals[s:s + chunk] @ dirs.T, 0.0)
        out[s:s + chunk] = cos @ weighted
    return out


@njit
def _irradiance_kernel(normals, dirs, weighted, out):
    N = normals.shape[0]
    T = dirs.shape[0]
    C = weighted.shape[1]
    for i in range(N):
        nx, ny, nz = normals[i, 0], normals[i, 1], normals[i, 2]
        for t in range(T):
            c = nx * dirs[t, 0] + ny * dirs[t, 1] + nz * dirs[t, 2]
            if c > 0.0:
                for ch in range(C):
                    out[i, ch] += c * weighted[t, ch]


def irradiance_numba(normals, dirs, weighted):
    out = np.zeros((normals.shape[0], weighted.shape[1]), dtype=np.float64)
    _irradiance_kernel(np.ascontiguousarray(normals, dtype=np.float64),
                       np.ascontiguousarray(dirs, dtype=np.float64),
                       np.ascontiguousarray(weighted, dtype=np.float64), out)
    return out


def irradiance(normals, dirs, weighted):
    if USE_NUMBA:
        return irradiance_numba(normals, dirs, weighted)
    return irradiance_numpy(normals, dirs, weighted)
