"""Equirectangular (ERP) panorama geometry.

Conventions: row r has colatitude theta = (r + 0.5) * pi / H measured from the
north pole, column c has longitude phi = (c + 0.5) * 2pi / W - pi, and a
direction is (sin theta cos phi, sin theta sin phi, cos theta).  Continuous
pixel coordinates put pixel centres at half-integers.

Rasters are numpy arrays laid out (H, W) or (H, W, C).
"""

from dataclasses import dataclass

import numpy as np

LDR01 = "ldr01"
HDR_LINEAR = "hdr_linear"
HDR_COMPRESSED = "hdr_compressed"
DOMAINS = (LDR01, HDR_LINEAR, HDR_COMPRESSED)


@dataclass
class ErpImage:
    values: np.ndarray
    domain: str = HDR_LINEAR

    def __post_init__(self):
        v = self.values
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ValueError(f"ERP raster must be HxWxC, got shape {self.values.shape}")
        if v.shape[1] != 2 * v.shape[0]:
            raise ValueError(f"ERP raster needs W = 2H, got {v.shape[0]}x{v.shape[1]}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown value domain {self.domain!r}")
        self.values = v

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


def _raster(img):
    return img.values if isinstance(img, ErpImage) else np.asarray(img)


def _rewrap(img, values):
    return ErpImage(values, img.domain) if isinstance(img, ErpImage) else values


# ---------------------------------------------------------------------------
# direction <-> pixel


def coords_to_dir(r, c, H, W):
    """Unit directions for continuous coordinates (pixel centres at +0.5)."""
    theta = np.asarray(r, dtype=np.float64) * np.pi / H
    phi = np.asarray(c, dtype=np.float64) * 2 * np.pi / W - np.pi
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def pix_to_dir(r, c, H, W):
    return coords_to_dir(np.asarray(r) + 0.5, np.asarray(c) + 0.5, H, W)


def dir_to_pix(v, H, W):
    """Continuous (row, col) of directions ``v`` (..., 3); col in [0, W)."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1)
    z = np.clip(v[..., 2] / norm, -1.0, 1.0)
    theta = np.arccos(z)
    phi = np.arctan2(v[..., 1], v[..., 0])
    r = theta * H / np.pi
    c = np.mod((phi + np.pi) * W / (2 * np.pi), W)
    return r, c


def pixel_dirs(H, W):
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return pix_to_dir(rr, cc, H, W)


def solid_angle(r, H, W):
    r = np.asarray(r, dtype=np.float64)
    return (2 * np.pi / W) * (np.cos(r * np.pi / H) - np.cos((r + 1) * np.pi / H))


def solid_angle_map(H, W):
    return np.repeat(solid_angle(np.arange(H), H, W)[:, None], W, axis=1)


def weighted_mean(img):
    """Solid-angle-weighted mean per channel."""
    v = _raster(img)
    if v.ndim == 2:
        v = v[:, :, None]
    w = solid_angle_map(v.shape[0], v.shape[1])
    return np.tensordot(w, v, axes=([0, 1], [0, 1])) / w.sum()


def geodesic(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dot = np.sum(u * v, axis=-1) / (np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1))
    return np.arccos(np.clip(dot, -1.0, 1.0))


# ---------------------------------------------------------------------------
# sampling


def bilinear_taps(r, c, H, W):
    """Four-tap (index, weight) pairs for bilinear lookup at continuous coords.

    Columns wrap circularly; rows clamp at the poles.  Flat index = row*W+col.
    """
    u = np.asarray(r, dtype=np.float64).reshape(-1) - 0.5
    v = np.asarray(c, dtype=np.float64).reshape(-1) - 0.5
    r0 = np.floor(u)
    c0 = np.floor(v)
    fr = u - r0
    fc = v - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    ra = np.clip(r0, 0, H - 1)
    rb = np.clip(r0 + 1, 0, H - 1)
    ca = np.mod(c0, W)
    cb = np.mod(c0 + 1, W)
    idx = np.stack([ra * W + ca, ra * W + cb, rb * W + ca, rb * W + cb], axis=1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    return idx, w


def nearest_taps(r, c, H, W):
    ri = np.clip(np.floor(np.asarray(r, dtype=np.float64).reshape(-1)).astype(np.int64), 0, H - 1)
    ci = np.mod(np.floor(np.asarray(c, dtype=np.float64).reshape(-1)).astype(np.int64), W)
    return (ri * W + ci)[:, None], np.ones((ri.size, 1))


def sample_taps(r, c, H, W, sampling="bilinear"):
    if sampling == "bilinear":
        return bilinear_taps(r, c, H, W)
    if sampling == "nearest":
        return nearest_taps(r, c, H, W)
    raise ValueError(f"unknown sampling {sampling!r}")


def sample(img, r, c, sampling="bilinear"):
    """Sample an (H, W, C) raster at continuous coords; returns (*r.shape, C)."""
    v = _raster(img)
    squeeze = v.ndim == 2
    if squeeze:
        v = v[:, :, None]
    H, W, C = v.shape
    idx, w = sample_taps(r, c, H, W, sampling)
    flat = v.reshape(H * W, C)
    out = np.einsum("mk,mkc->mc", w, flat[idx].astype(np.float64))
    out = out.reshape(np.shape(r) + (C,))
    return out[..., 0] if squeeze else out


# ---------------------------------------------------------------------------
# whole-panorama transforms


def yaw_roll(img, dc):
    """Lossless column permutation (r, c) -> (r, (c + dc) mod W)."""
    return _rewrap(img, np.roll(_raster(img), int(dc), axis=1))


def yaw_rotate(img, degrees):
    """Yaw by an arbitrary angle: exact roll when it lands on a column, else
    circular linear interpolation along each row (row means are preserved)."""
    v = _raster(img)
    W = v.shape[1]
    shift = (degrees / 360.0 * W) % W
    n = int(np.floor(shift))
    f = shift - n
    if abs(f) < 1e-9 or abs(f - 1) < 1e-9:
        return yaw_roll(img, int(round(shift)) % W)
    a = np.roll(v, n, axis=1).astype(np.float64)
    b = np.roll(v, n + 1, axis=1).astype(np.float64)
    return _rewrap(img, ((1 - f) * a + f * b).astype(v.dtype))


def vertical_flip(img):
    """Row reversal r -> H-1-r (swaps the poles)."""
    return _rewrap(img, _raster(img)[::-1].copy())


def rotation_x(angle_deg):
    a = np.deg2rad(angle_deg)
    ca, sa = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])


def pitch_source_coords(H, W, angle):
    """Source coordinates sampled by each output pixel of a pitch rotation."""
    d = pixel_dirs(H, W)
    src = d @ rotation_x(-angle).T
    return dir_to_pix(src, H, W)


def pitch_taps(H, W, angle, sampling="bilinear"):
    r, c = pitch_source_coords(H, W, angle)
    return sample_taps(r, c, H, W, sampling)


def pitch_rotate(img, angle, sampling="bilinear"):
    """Rotate the sphere about the world x-axis by ``angle`` degrees."""
    v = _raster(img)
    H, W = v.shape[:2]
    r, c = pitch_source_coords(H, W, angle)
    return _rewrap(img, sample(v, r, c, sampling).astype(v.dtype))


def polar_extend(img, k):
    """Add ``k`` rows of spherical continuation above and below the poles.

    Virtual row -1-j is row j rolled by W/2; virtual row H+j is row H-1-j
    rolled by W/2.  Output height H + 2k.
    """
    v = _raster(img)
    H, W = v.shape[:2]
    if k < 0 or k > H // 2:
        raise ValueError(f"polar_extend: k={k} must lie in [0, H/2] for H={H}")
    if k == 0:
        return v.copy()
    top = np.roll(v[k - 1::-1], W // 2, axis=1)
    bottom = np.roll(v[:H - k - 1:-1], W // 2, axis=1)
    return np.concatenate([top, v, bottom], axis=0)


def polar_extend_rows(H, k):
    """Source row and 'rolled by W/2' flag for every row of polar_extend(., k)."""
    rows = np.arange(-k, H + k)
    src = np.where(rows < 0, -1 - rows, np.where(rows >= H, 2 * H - 1 - rows, rows))
    return src, (rows < 0) | (rows >= H)


# ---------------------------------------------------------------------------
# perspective views (gnomonic)


def camera_basis(yaw, pitch):
    """Forward, right and up vectors for a view with the given yaw/pitch (degrees).

    Right points along increasing longitude so crops are not mirrored
    relative to the ERP.
    """
    y = np.deg2rad(yaw)
    p = np.deg2rad(pitch)
    fwd = np.array([np.cos(p) * np.cos(y), np.cos(p) * np.sin(y), np.sin(p)])
    right = np.array([-np.sin(y), np.cos(y), 0.0])
    up = np.cross(right, fwd)
    return fwd, right, up


def _tan_halves(fov, out_h, out_w):
    if not 0 < fov < 180:
        raise ValueError(f"fov must lie in (0, 180), got {fov}")
    tw = np.tan(np.deg2rad(fov) / 2)
    return tw, tw * out_h / out_w


def perspective_dirs(fov, yaw, pitch, out_h, out_w):
    fwd, right, up = camera_basis(yaw, pitch)
    tw, th = _tan_halves(fov, out_h, out_w)
    x = ((np.arange(out_w) + 0.5) / out_w * 2 - 1) * tw
    y = ((np.arange(out_h) + 0.5) / out_h * 2 - 1) * th
    xx, yy = np.meshgrid(x, y)
    d = fwd + xx[..., None] * right - yy[..., None] * up
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def erp_to_perspective(erp, fov, yaw, pitch, out_h, out_w, sampling="bilinear"):
    v = _raster(erp)
    H, W = v.shape[:2]
    d = perspective_dirs(fov, yaw, pitch, out_h, out_w)
    r, c = dir_to_pix(d, H, W)
    return sample(v, r, c, sampling).astype(v.dtype)


def perspective_to_erp(persp, fov, yaw, pitch, H, W, domain=LDR01):
    """Back-project a pinhole image onto an H x W ERP; returns (ErpImage, mask)."""
    p = np.asarray(persp)
    squeeze = p.ndim == 2
    if squeeze:
        p = p[:, :, None]
    ph, pw, C = p.shape
    fwd, right, up = camera_basis(yaw, pitch)
    tw, th = _tan_halves(fov, ph, pw)
    d = pixel_dirs(H, W)
    z = d @ fwd
    with np.errstate(divide="ignore", invalid="ignore"):
        x = (d @ right) / z / tw
        y = -(d @ up) / z / th
    mask = (z > 0) & (np.abs(x) <= 1) & (np.abs(y) <= 1)
    out = np.zeros((H, W, C), dtype=np.float64)
    if mask.any():
        # pixel coords in the perspective raster, edge-clamped bilinear
        cj = (x[mask] + 1) / 2 * pw - 0.5
        ci = (y[mask] + 1) / 2 * ph - 0.5
        i0 = np.floor(ci).astype(np.int64)
        j0 = np.floor(cj).astype(np.int64)
        fi = ci - i0
        fj = cj - j0
        ia, ib = np.clip(i0, 0, ph - 1), np.clip(i0 + 1, 0, ph - 1)
        ja, jb = np.clip(j0, 0, pw - 1), np.clip(j0 + 1, 0, pw - 1)
        pf = p.astype(np.float64)
        out[mask] = ((1 - fi)[:, None] * ((1 - fj)[:, None] * pf[ia, ja] + fj[:, None] * pf[ia, jb])
                     + fi[:, None] * ((1 - fj)[:, None] * pf[ib, ja] + fj[:, None] * pf[ib, jb]))
    out = out.astype(p.dtype if p.dtype.kind == "f" else np.float64)
    if squeeze:
        out = out[:, :, 0]
    return ErpImage(out, domain), mask.astype(np.float64)


def frustum_solid_angle(fov, aspect=1.0):
    """Solid angle of a rectangular pinhole frustum (half-tangents a, b)."""
    a = np.tan(np.deg2rad(fov) / 2)
    b = a * aspect
    return 4 * np.arcsin(a * b / np.sqrt((1 + a * a) * (1 + b * b)))
