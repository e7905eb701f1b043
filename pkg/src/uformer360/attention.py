"""Window attention over token grids laid out on an ERP.

Token grids are tensors shaped (B, h, w, d) with w = 2h.  Three layer kinds:

* ``w_msa``   plain window self-attention.
* ``psw_msa`` shifted windows where the shift respects the sphere: half a
  window of yaw (circular) and half a window of vertical shift realised by
  polar continuation, so windows that straddle a pole hold tokens from both
  sides of it.  No attention masks are needed.  The ``swin`` variant uses the
  usual cyclic shift with masks instead.
* ``pam``     cross-attention from each window to its associated window of the
  90-degree-pitched grid.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry
from . import tensor as T
from .layers import LayerNorm, Linear, Mlp, Module, parameter, trunc_normal

PANOSWIN = "panoswin"
SWIN = "swin"


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int
    window_size: int
    use_rel_pos_bias: bool = True
    variant: str = PANOSWIN

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.variant not in (PANOSWIN, SWIN):
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.window_size < 1:
            raise ValueError("window size must be positive")

    def check_grid(self, h, w):
        ws = self.window_size
        if h % ws or w % ws:
            raise ValueError(f"window size {ws} does not divide grid {h}x{w}")


class AttentionWeights(Module):
    def __init__(self, rng, cfg):
        d = cfg.dim
        self.norm = LayerNorm(d)
        self.qkv = Linear(rng, d, 3 * d)
        self.proj = Linear(rng, d, d)
        n = 2 * cfg.window_size - 1
        self.rel_bias = parameter(trunc_normal(rng, (n * n, cfg.heads))) if cfg.use_rel_pos_bias else None


# ---------------------------------------------------------------------------
# windows


def window_partition(x, ws):
    """(B, h, w, d) -> (B * nW, ws*ws, d), windows in row-major order."""
    x = T.as_tensor(x)
    B, h, w, d = x.shape
    if h % ws or w % ws:
        raise ValueError(f"window size {ws} does not divide grid {h}x{w}")
    x = x.reshape(B, h // ws, ws, w // ws, ws, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B * (h // ws) * (w // ws), ws * ws, d)


def window_merge(windows, ws, h, w):
    windows = T.as_tensor(windows)
    d = windows.shape[-1]
    B = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.reshape(B, h // ws, w // ws, ws, ws, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, h, w, d)


def rel_pos_index(ws):
    """(n, n) index into the (2ws-1)^2 bias table; offset (0, 0) is the centre."""
    coords = np.stack(np.meshgrid(np.arange(ws), np.arange(ws), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (ws - 1)
    return rel[0] * (2 * ws - 1) + rel[1]


def rel_pos_bias(table, ws):
    """Gather the (heads, n, n) bias from a learned table."""
    n = ws * ws
    idx = rel_pos_index(ws).reshape(-1)
    return table[idx].reshape(n, n, table.shape[1]).permute(2, 0, 1)


def _attend(xq, xkv, weights, cfg, mask=None, self_attention=True):
    """Multi-head attention between matching windows (Bn, n, d) -> (Bn, n, d)."""
    Bn, n, d = xq.shape
    heads = cfg.heads
    hd = d // heads
    if self_attention:
        qkv = weights.qkv(xq).reshape(Bn, n, 3, heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
    else:
        W, b = weights.qkv.weight, weights.qkv.bias
        q = (xq @ W[:, :d] + b[:d]).reshape(Bn, n, heads, hd).permute(0, 2, 1, 3)
        kv = (xkv @ W[:, d:] + b[d:]).reshape(Bn, n, 2, heads, hd).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
    attn = (q @ k.transpose(-2, -1)) * (1.0 / np.sqrt(hd))
    if weights.rel_bias is not None:
        attn = attn + rel_pos_bias(weights.rel_bias, cfg.window_size)
    if mask is not None:
        nW = mask.shape[0]
        attn = (attn.reshape(Bn // nW, nW, heads, n, n) + mask[None, :, None].astype(attn.dtype)).reshape(Bn, heads, n, n)
    attn = T.softmax(attn, axis=-1)
    out = (attn @ v).permute(0, 2, 1, 3).reshape(Bn, n, d)
    return weights.proj(out)


# ---------------------------------------------------------------------------
# layers


def w_msa(grid, cfg, weights):
    grid = T.as_tensor(grid)
    _, h, w, _ = grid.shape
    ws = cfg.window_size
    cfg.check_grid(h, w)
    xn = weights.norm(grid)
    out = _attend(window_partition(xn, ws), None, weights, cfg)
    return grid + window_merge(out, ws, h, w)


def polar_extend_grid(x, k):
    """Tensor version of :func:`geometry.polar_extend` on the row axis of (B, h, w, d)."""
    if k == 0:
        return x
    h, w = x.shape[1], x.shape[2]
    if k > h // 2:
        raise ValueError(f"polar extension {k} too large for {h} rows")
    src, _ = geometry.polar_extend_rows(h, k)
    top = T.roll(T.take_rows(x, src[:k], axis=1), w // 2, axis=2)
    bottom = T.roll(T.take_rows(x, src[k + h:], axis=1), w // 2, axis=2)
    return T.concat([top, x, bottom], axis=1)


def pano_shift(x, ws):
    """Yaw by -ws/2 columns, then extend ws/2 rows past each pole.

    Output height h + ws: its window rows are offset by half a window and the
    first/last window rows straddle the poles.
    """
    k = ws // 2
    if k == 0:
        return x
    return polar_extend_grid(T.roll(x, -k, axis=2), k)


def pano_unshift(x, ws):
    k = ws // 2
    if k == 0:
        return x
    h = x.shape[1] - 2 * k
    return T.roll(x[:, k:k + h], k, axis=2)


def swin_shift_mask(h, w, ws, shift):
    """Standard cyclic-shift attention mask, (nW, n, n) with 0 / -100 entries."""
    sr, sc = shift
    img = np.zeros((h, w))
    cnt = 0
    row_slices = (slice(0, -ws), slice(-ws, -sr), slice(-sr, None)) if sr else (slice(None),)
    col_slices = (slice(0, -ws), slice(-ws, -sc), slice(-sc, None)) if sc else (slice(None),)
    for rs in row_slices:
        for cs in col_slices:
            img[rs, cs] = cnt
            cnt += 1
    win = img.reshape(h // ws, ws, w // ws, ws).transpose(0, 2, 1, 3).reshape(-1, ws * ws)
    diff = win[:, None, :] - win[:, :, None]
    return np.where(diff != 0, -100.0, 0.0)


def psw_msa(grid, cfg, weights, shift=None):
    """Shifted-window attention.  ``shift`` = (rows, cols), default half a window."""
    grid = T.as_tensor(grid)
    _, h, w, _ = grid.shape
    ws = cfg.window_size
    cfg.check_grid(h, w)
    xn = weights.norm(grid)
    if cfg.variant == PANOSWIN:
        if shift is not None and tuple(shift) != (ws // 2, ws // 2):
            raise ValueError("panoswin shift is fixed at half a window")
        if ws % 2 and ws != 1:
            raise ValueError(f"panoswin shifted windows need an even window size, got {ws}")
        ext = pano_shift(xn, ws)
        he = ext.shape[1]
        out = window_merge(_attend(window_partition(ext, ws), None, weights, cfg), ws, he, w)
        return grid + pano_unshift(out, ws)
    sr, sc = (ws // 2, ws // 2) if shift is None else shift
    if sr >= ws or sc >= ws:
        raise ValueError("shift must be smaller than the window")
    shifted = xn
    if sr:
        shifted = T.roll(shifted, -sr, axis=1)
    if sc:
        shifted = T.roll(shifted, -sc, axis=2)
    mask = swin_shift_mask(h, w, ws, (sr, sc)) if (sr or sc) else None
    out = window_merge(_attend(window_partition(shifted, ws), None, weights, cfg, mask), ws, h, w)
    if sc:
        out = T.roll(out, sc, axis=2)
    if sr:
        out = T.roll(out, sr, axis=1)
    return grid + out


# ---------------------------------------------------------------------------
# pitch attention


def pam_association(h, w, ws, angle=90.0):
    """Index of the pitched window associated with each default window.

    A default window is paired with the pitched window whose footprint holds
    the image of its centre under the pitch map; centres landing exactly on a
    window-row boundary go to the window nearer the equator.
    """
    nh, nw = h // ws, w // ws
    i, j = np.meshgrid(np.arange(nh), np.arange(nw), indexing="ij")
    rc = i * ws + ws / 2
    cc = j * ws + ws / 2
    d = geometry.coords_to_dir(rc, cc, h, w)
    r2, c2 = geometry.dir_to_pix(d @ geometry.rotation_x(angle).T, h, w)
    q = r2 / ws
    row = np.floor(q).astype(np.int64)
    on_edge = np.abs(q - np.rint(q)) < 1e-9
    edge = np.rint(q).astype(np.int64)
    # centre of candidate windows edge-1 and edge, pick the one nearer h/2
    above = (edge - 0.5) * ws
    below = (edge + 0.5) * ws
    pick = np.where(np.abs(above - h / 2) <= np.abs(below - h / 2), edge - 1, edge)
    row = np.where(on_edge, pick, row)
    row = np.clip(row, 0, nh - 1)
    col = np.mod(np.floor(c2 / ws).astype(np.int64), nw)
    return (row * nw + col).reshape(-1)


def pitch_grid(x, taps):
    """Resample a (B, h, w, d) grid with precomputed pitch taps."""
    B, h, w, d = x.shape
    idx, wts = taps
    return T.resample(x.reshape(B, h * w, d), idx, wts).reshape(B, h, w, d)


def pam(grid, cfg, weights, pitched=None, association=None, angle=90.0):
    """Pitch-attention cross-attention with residual.

    ``pitched`` overrides the pitched grid (a callable applied to the
    normalised grid, or None for the bilinear 90-degree pitch);
    ``association`` overrides the window pairing.
    """
    grid = T.as_tensor(grid)
    B, h, w, d = grid.shape
    ws = cfg.window_size
    cfg.check_grid(h, w)
    xn = weights.norm(grid)
    if pitched is None:
        pg = pitch_grid(xn, geometry.pitch_taps(h, w, angle))
    else:
        pg = pitched(xn)
    if association is None:
        association = pam_association(h, w, ws, angle)
    nW = (h // ws) * (w // ws)
    kv = window_partition(pg, ws).reshape(B, nW, ws * ws, d)
    kv = T.take_rows(kv, association, axis=1).reshape(B * nW, ws * ws, d)
    out = _attend(window_partition(xn, ws), kv, weights, cfg, self_attention=False)
    return grid + window_merge(out, ws, h, w)


# ---------------------------------------------------------------------------
# transformer layer


W_MSA, PSW_MSA, PAM = "w", "psw", "pam"


class TransformerLayer(Module):
    """Attention sublayer (one of the three kinds) followed by an MLP sublayer."""

    def __init__(self, rng, cfg, kind, grid_hw, mlp_ratio=4):
        if kind not in (W_MSA, PSW_MSA, PAM):
            raise ValueError(f"unknown layer kind {kind!r}")
        cfg.check_grid(*grid_hw)
        self._cfg = cfg
        self._kind = kind
        self._hw = grid_hw
        self.attn = AttentionWeights(rng, cfg)
        self.norm2 = LayerNorm(cfg.dim)
        self.mlp = Mlp(rng, cfg.dim, mlp_ratio)
        if kind == PAM:
            h, w = grid_hw
            self._taps = geometry.pitch_taps(h, w, 90.0)
            self._assoc = pam_association(h, w, cfg.window_size)

    @property
    def kind(self):
        return self._kind

    def forward(self, x):
        if self._kind == W_MSA:
            x = w_msa(x, self._cfg, self.attn)
        elif self._kind == PSW_MSA:
            x = psw_msa(x, self._cfg, self.attn)
        else:
            taps = self._taps
            x = pam(x, self._cfg, self.attn, pitched=lambda xn: pitch_grid(xn, taps), association=self._assoc)
        return x + self.mlp(self.norm2(x))
