"""HDR/LDR raster codecs and value-domain mappings.

Readers return float32 arrays shaped (H, W, 3) (or (H, W) for grayscale
PFM); writers take the same and return ``bytes``.
"""

import re

import numpy as np

from . import _kernels

GAMMA = 6.6
HDR_CEILING = 2.0 ** GAMMA
DISPLAY_GAMMA = 2.2


class FormatError(ValueError):
    """Malformed image payload; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _check_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what}: non-finite values")


# ---------------------------------------------------------------------------
# Radiance RGBE


def float_to_rgbe(rgb):
    """Shared-exponent encode with round-to-nearest mantissas.

    Mantissas are c * 2^(8-e) where max(rgb) = f * 2^e, f in [0.5, 1).
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    _check_finite(rgb, "rgbe encode")
    if np.any(rgb < 0):
        raise ValueError("rgbe encode: negative radiance")
    v = rgb.max(axis=-1)
    _, e = np.frexp(v)
    m = np.floor(np.ldexp(rgb, (8 - e)[..., None]) + 0.5)
    # rounding can carry the largest mantissa to 256: bump the exponent
    carry = m.max(axis=-1) >= 256
    if carry.any():
        e = np.where(carry, e + 1, e)
        m = np.floor(np.ldexp(rgb, (8 - e)[..., None]) + 0.5)
    black = (v < 1e-32) | (m.max(axis=-1) == 0)
    e = np.clip(e + 128, 0, 255)
    out = np.empty(rgb.shape[:-1] + (4,), dtype=np.uint8)
    out[..., :3] = np.clip(m, 0, 255).astype(np.uint8)
    out[..., 3] = e.astype(np.uint8)
    out[black] = 0
    return out


def rgbe_to_float(rgbe):
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    e = rgbe[..., 3].astype(np.int64)
    out = np.ldexp(rgbe[..., :3].astype(np.float64), (e - 136)[..., None])
    out[e == 0] = 0.0
    return out.astype(np.float32)


_RES_RE = re.compile(rb"^-Y (\d+) \+X (\d+)$")


def _parse_header(buf):
    pos = 0
    n = len(buf)

    def readline(pos):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError("unterminated header line", pos)
        return buf[pos:end], end + 1

    first, pos = readline(0)
    if not first.startswith(b"#?"):
        raise FormatError("missing #?RADIANCE signature", 0)
    while True:
        if pos >= n:
            raise FormatError("header ends before resolution line", pos)
        line_start = pos
        line, pos = readline(pos)
        if line == b"":
            break
        if line.startswith(b"FORMAT=") and line.strip() != b"FORMAT=32-bit_rle_rgbe":
            raise FormatError(f"unsupported {line.decode(errors='replace')}", line_start)
    res_start = pos
    line, pos = readline(pos)
    m = _RES_RE.match(line.strip())
    if not m:
        raise FormatError("expected '-Y <h> +X <w>' resolution line", res_start)
    h, w = int(m.group(1)), int(m.group(2))
    if h <= 0 or w <= 0:
        raise FormatError("empty image", res_start)
    return h, w, pos


def read_rgbe(data):
    """Decode a Radiance .hdr payload (RLE or flat scanlines)."""
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    h, w, pos = _parse_header(bytes(data))
    rgbe = np.empty((h, w, 4), dtype=np.uint8)
    n = len(buf)
    for y in range(h):
        rle = (8 <= w <= 0x7FFF and pos + 4 <= n and buf[pos] == 2 and buf[pos + 1] == 2
               and buf[pos + 2] < 128)
        if rle:
            width = (int(buf[pos + 2]) << 8) | int(buf[pos + 3])
            if width != w:
                raise FormatError(f"scanline {y} width {width} != {w}", pos)
            line, end = _kernels.rle_decode(buf, pos + 4, w)
            if end < 0:
                raise FormatError(f"corrupt or truncated RLE scanline {y}", -end - 1)
            rgbe[y] = line
            pos = end
        else:
            if pos + 4 * w > n:
                raise FormatError(f"truncated flat scanline {y}", n)
            rgbe[y] = buf[pos:pos + 4 * w].reshape(w, 4)
            pos += 4 * w
    return rgbe_to_float(rgbe)


def write_rgbe(img):
    """Encode an (H, W, 3) non-negative float raster; RLE scanlines when allowed."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_rgbe needs HxWx3, got {img.shape}")
    h, w = img.shape[:2]
    rgbe = float_to_rgbe(img)
    parts = [b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n", f"-Y {h} +X {w}\n".encode()]
    if 8 <= w <= 0x7FFF:
        marker = bytes([2, 2, w >> 8, w & 0xFF])
        for y in range(h):
            parts.append(marker)
            for ch in range(4):
                parts.append(_kernels.rle_encode(rgbe[y, :, ch]).tobytes())
    else:
        parts.append(rgbe.tobytes())
    return b"".join(parts)


# ---------------------------------------------------------------------------
# PFM / PPM


def _read_token_lines(data, count):
    """Split off ``count`` whitespace-separated header tokens (ppm-style comments allowed)."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = n if end < 0 else end + 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header", pos)
        tokens.append((data[start:pos], start))
    # exactly one whitespace byte separates header and raster
    return tokens, pos + 1


def read_pfm(data):
    data = bytes(data)
    tokens, pos = _read_token_lines(data, 4)
    (magic, _), (ws, wo), (hs, ho), (ss, so) = tokens
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise FormatError("bad PFM magic", 0)
    try:
        w, h = int(ws), int(hs)
    except ValueError:
        raise FormatError("bad PFM dimensions", wo) from None
    try:
        scale = float(ss)
    except ValueError:
        raise FormatError("bad PFM scale", so) from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError("bad PFM scale", so)
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(data) - pos < 4 * count:
        raise FormatError("truncated PFM raster", len(data))
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        bad = int(np.argmax(~np.isfinite(arr)))
        raise FormatError("non-finite PFM sample", pos + 4 * bad)
    arr = arr.reshape(h, w, channels)[::-1]
    return np.ascontiguousarray(arr[:, :, 0] if channels == 1 else arr)


def write_pfm(img, little_endian=True):
    img = np.asarray(img, dtype=np.float32)
    _check_finite(img, "write_pfm")
    if img.ndim == 2:
        magic = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"write_pfm needs HxW or HxWx3, got {img.shape}")
    h, w = img.shape[:2]
    scale = -1.0 if little_endian else 1.0
    raster = np.ascontiguousarray(img[::-1]).astype("<f4" if little_endian else ">f4")
    return magic + f"\n{w} {h}\n{scale}\n".encode() + raster.tobytes()


def read_ppm(data):
    """Binary P6 -> float32 in [0, 1]."""
    data = bytes(data)
    tokens, pos = _read_token_lines(data, 4)
    (magic, _), (ws, wo), (hs, _), (ms, mo) = tokens
    if magic != b"P6":
        raise FormatError("bad PPM magic", 0)
    try:
        w, h, maxval = int(ws), int(hs), int(ms)
    except ValueError:
        raise FormatError("bad PPM header", wo) from None
    if maxval != 255:
        raise FormatError("only 8-bit PPM supported", mo)
    if len(data) - pos < 3 * w * h:
        raise FormatError("truncated PPM raster", len(data))
    arr = np.frombuffer(data, dtype=np.uint8, count=3 * w * h, offset=pos).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0


def to_uint8(img):
    img = np.asarray(img, dtype=np.float64)
    _check_finite(img, "to_uint8")
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(img):
    """Float raster in [0, 1] (clamped) or uint8 -> binary P6."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm needs HxWx3, got {img.shape}")
    raster = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = raster.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + raster.tobytes()


def load_image(path):
    """Read .hdr/.pfm/.ppm by extension."""
    path = str(path)
    with open(path, "rb") as f:
        data = f.read()
    if path.endswith(".hdr"):
        return read_rgbe(data)
    if path.endswith(".pfm"):
        return read_pfm(data)
    if path.endswith(".ppm"):
        return read_ppm(data)
    raise ValueError(f"unsupported image extension: {path}")


def save_image(path, img):
    path = str(path)
    if path.endswith(".hdr"):
        data = write_rgbe(img)
    elif path.endswith(".pfm"):
        data = write_pfm(img)
    elif path.endswith(".ppm"):
        data = write_ppm(img)
    else:
        raise ValueError(f"unsupported image extension: {path}")
    with open(path, "wb") as f:
        f.write(data)


# ---------------------------------------------------------------------------
# value-domain mappings


def compress_hdr(hdr):
    """Linear radiance -> [0, 2] via x^(1/6.6) after clipping to 2^6.6."""
    hdr = np.asarray(hdr)
    if np.any(hdr < 0):
        raise ValueError("compress_hdr: negative radiance")
    _check_finite(hdr, "compress_hdr")
    dtype = hdr.dtype if hdr.dtype.kind == "f" else np.float64
    return np.power(np.minimum(hdr.astype(np.float64), HDR_CEILING), 1.0 / GAMMA).astype(dtype)


def expand_hdr(compressed):
    c = np.asarray(compressed)
    if np.any(c < 0):
        raise ValueError("expand_hdr: negative compressed value")
    dtype = c.dtype if c.dtype.kind == "f" else np.float64
    return np.power(np.minimum(c.astype(np.float64), 2.0), GAMMA).astype(dtype)


def network_to_compressed(o):
    """tanh output in [-1, 1] -> compressed HDR in [0, 2]."""
    return o + 1.0


def apply_dataset_scale(hdr, factor):
    return np.asarray(hdr) * factor


def tonemap_for_metrics(hdr):
    """Reinhard x/(1+x), then 1/2.2 gamma, clamped to [0, 1]."""
    x = np.maximum(np.asarray(hdr, dtype=np.float64), 0.0)
    return np.clip((x / (1.0 + x)) ** (1.0 / DISPLAY_GAMMA), 0.0, 1.0)


def display_ldr(hdr, exposure=1.0):
    """Camera-like LDR encoding used for network inputs: clip then 1/2.2 gamma."""
    x = np.clip(np.asarray(hdr, dtype=np.float64) * exposure, 0.0, 1.0)
    return x ** (1.0 / DISPLAY_GAMMA)
