"""The U-shaped panoramic transformer generator, its critic, and checkpoints."""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import attention as A
from . import tensor as T
from .layers import Conv2d, LayerNorm, Linear, Module


@dataclass
class GeneratorConfig:
    height: int = 256
    width: int = 512
    in_channels: int = 4
    patch_size: int = 4
    depths: tuple = (3, 3, 7, 2)
    bottleneck_depth: int = 2
    base_channels: int = 32
    window_size: int = 8
    head_dim: int = 32
    mlp_ratio: int = 4
    variant: str = A.PANOSWIN
    use_rel_pos_bias: bool = True
    # per-block PAM flags; None -> last encoder block, bottleneck and first
    # decoder block go without, every other block ends in a PAM layer
    pam_encoder: tuple = None
    pam_bottleneck: bool = None
    pam_decoder: tuple = None
    unembed_channels: int = None
    pad_mode: str = "circular"
    seed: int = 0

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        n = len(self.depths)
        pano = self.variant == A.PANOSWIN
        if self.pam_encoder is None:
            self.pam_encoder = tuple(pano and i < n - 1 for i in range(n))
        if self.pam_bottleneck is None:
            self.pam_bottleneck = False
        if self.pam_decoder is None:
            # decoder order: deepest stage first
            self.pam_decoder = tuple(pano and i > 0 for i in range(n))
        self.pam_encoder = tuple(bool(f) for f in self.pam_encoder)
        self.pam_decoder = tuple(bool(f) for f in self.pam_decoder)
        if self.unembed_channels is None:
            self.unembed_channels = max(8, self.base_channels // 2)
        self.validate()

    def validate(self):
        n = len(self.depths)
        if self.width != 2 * self.height:
            raise ValueError(f"ERP input needs width = 2*height, got {self.height}x{self.width}")
        total = self.patch_size * 2 ** n
        if self.height % total:
            raise ValueError(f"height {self.height} must be divisible by patch*2^stages = {total}")
        if self.variant not in (A.PANOSWIN, A.SWIN):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.pad_mode not in ("circular", "zero"):
            raise ValueError(f"unknown pad mode {self.pad_mode!r}")
        if len(self.pam_encoder) != n or len(self.pam_decoder) != n:
            raise ValueError("PAM flag lists must have one entry per stage")
        for h, _ in self.stage_grids() + [self.bottleneck_grid()]:
            ws = min(self.window_size, h)
            if h % ws or (ws % 2 and ws != 1):
                raise ValueError(f"window size {self.window_size} incompatible with a {h}-row grid")
        for d in self.stage_dims() + [self.bottleneck_dim()]:
            if d % self.heads(d):
                raise ValueError(f"width {d} not divisible by its head count")

    def stage_grids(self):
        h0 = self.height // self.patch_size
        return [(h0 >> i, 2 * (h0 >> i)) for i in range(len(self.depths))]

    def bottleneck_grid(self):
        h = self.height // self.patch_size >> len(self.depths)
        return (h, 2 * h)

    def stage_dims(self):
        return [self.base_channels * 2 ** i for i in range(len(self.depths))]

    def bottleneck_dim(self):
        return self.base_channels * 2 ** len(self.depths)

    def heads(self, dim):
        return max(1, dim // self.head_dim)

    def window_for(self, h):
        return min(self.window_size, h)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


def block_kinds(depth, with_pam):
    """Layer kinds of one block: alternating W/PSW, last layer PAM if flagged."""
    kinds = [A.W_MSA if i % 2 == 0 else A.PSW_MSA for i in range(depth)]
    if with_pam and depth:
        kinds[-1] = A.PAM
    return kinds


class Block(Module):
    def __init__(self, rng, cfg, dim, grid_hw, depth, with_pam):
        acfg = A.AttentionConfig(dim, cfg.heads(dim), cfg.window_for(grid_hw[0]),
                                 cfg.use_rel_pos_bias, cfg.variant)
        self.layers = [A.TransformerLayer(rng, acfg, kind, grid_hw, cfg.mlp_ratio)
                       for kind in block_kinds(depth, with_pam)]

    @property
    def kinds(self):
        return [layer.kind for layer in self.layers]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class PatchMerge(Module):
    """2x2 token merge: (B, h, w, d) -> (B, h/2, w/2, d_out)."""

    def __init__(self, rng, d_in, d_out):
        self.norm = LayerNorm(4 * d_in)
        self.reduction = Linear(rng, 4 * d_in, d_out, bias=False)

    def forward(self, x):
        parts = [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]]
        return self.reduction(self.norm(T.concat(parts, axis=-1)))


class ShortcutFuse(Module):
    """Upsample x2 and project the decoder feature, concat the skip, fuse linearly."""

    def __init__(self, rng, d_in, d_out):
        self.up = Linear(rng, d_in, d_out)
        self.fuse = Linear(rng, 2 * d_out, d_out)

    def forward(self, dec, enc):
        # projecting before nearest upsampling is the same map, 4x cheaper
        up = T.upsample_nearest(self.up(dec), 2, axes=(1, 2))
        return self.fuse(T.concat([up, enc], axis=-1))


class Generator(Module):
    def __init__(self, cfg):
        self._cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        p = cfg.patch_size
        C = cfg.base_channels
        dims = cfg.stage_dims()
        grids = cfg.stage_grids()
        self.embed = Conv2d(rng, cfg.in_channels, C, p, stride=p)
        self.embed_norm = LayerNorm(C)
        self.encoder = []
        self.merges = []
        n = len(cfg.depths)
        for i in range(n):
            self.encoder.append(Block(rng, cfg, dims[i], grids[i], cfg.depths[i], cfg.pam_encoder[i]))
            d_next = dims[i + 1] if i + 1 < n else cfg.bottleneck_dim()
            self.merges.append(PatchMerge(rng, dims[i], d_next))
        self.bottleneck = Block(rng, cfg, cfg.bottleneck_dim(), cfg.bottleneck_grid(),
                                cfg.bottleneck_depth, cfg.pam_bottleneck)
        self.fuses = []
        self.decoder = []
        for j, i in enumerate(reversed(range(n))):
            d_in = dims[i + 1] if i + 1 < n else cfg.bottleneck_dim()
            self.fuses.append(ShortcutFuse(rng, d_in, dims[i]))
            self.decoder.append(Block(rng, cfg, dims[i], grids[i], cfg.depths[i], cfg.pam_decoder[j]))
        cu = cfg.unembed_channels
        self.unembed_norm = LayerNorm(C)
        self.unembed = Linear(rng, C, p * p * cu)
        self.out_conv1 = Conv2d(rng, cu, cu, 3, pad=1, horizontal=cfg.pad_mode)
        self.out_conv2 = Conv2d(rng, cu, 3, 3, pad=1, horizontal=cfg.pad_mode)

    @property
    def config(self):
        return self._cfg

    def set_pad_mode(self, mode):
        """Switch the horizontal padding of the output convolutions (ablation)."""
        if mode not in ("circular", "zero"):
            raise ValueError(f"unknown pad mode {mode!r}")
        self.out_conv1.horizontal = mode
        self.out_conv2.horizontal = mode

    def embed_tokens(self, x):
        x = T.as_tensor(x)
        _check_input(x, self._cfg)
        return self.embed_norm(self.embed(x).permute(0, 2, 3, 1))

    def encode(self, x):
        """Token grids after each encoder stage plus the bottleneck output."""
        t = self.embed_tokens(x)
        skips = []
        for block, merge in zip(self.encoder, self.merges):
            t = block(t)
            skips.append(t)
            t = merge(t)
        return skips, self.bottleneck(t)

    def decode(self, skips, t):
        for fuse, block, skip in zip(self.fuses, self.decoder, reversed(skips)):
            t = block(fuse(t, skip))
        return t

    def unembed_tokens(self, t):
        cfg = self._cfg
        p, cu = cfg.patch_size, cfg.unembed_channels
        B, h, w, _ = t.shape
        y = self.unembed(self.unembed_norm(t)).reshape(B, h, w, p, p, cu)
        y = y.permute(0, 5, 1, 3, 2, 4).reshape(B, cu, h * p, w * p)
        y = T.leaky_relu(self.out_conv1(y), 0.2)
        return T.tanh(self.out_conv2(y))

    def forward(self, x):
        """Masked LDR + mask (B, 4, H, W) -> compressed HDR (B, 3, H, W) in [0, 2]."""
        skips, t = self.encode(x)
        return self.unembed_tokens(self.decode(skips, t)) + 1.0


def toy_generator_config(**overrides):
    """64x128 input, C=32, depths [1, 1, 2, 1]: small enough to train on a CPU."""
    base = dict(height=64, width=128, base_channels=32, depths=(1, 1, 2, 1), bottleneck_depth=1)
    base.update(overrides)
    return GeneratorConfig(**base)


def toy_discriminator_config(**overrides):
    base = dict(height=64, width=128, base_channels=16, stages=5)
    base.update(overrides)
    return DiscriminatorConfig(**base)


def _check_input(x, cfg):
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
        raise T.ShapeError(f"generator expects (B, {cfg.in_channels}, {cfg.height}, {cfg.width}), got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("generator input contains non-finite values")


def build_generator(cfg):
    return Generator(cfg)


@dataclass
class DiscriminatorConfig:
    height: int = 256
    width: int = 512
    base_channels: int = 16
    stages: int = 5
    max_channels: int = 256
    pad_mode: str = "circular"
    seed: int = 1

    def channels(self):
        return [min(self.base_channels * 2 ** i, self.max_channels) for i in range(self.stages)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown discriminator config keys: {sorted(unknown)}")
        return cls(**d)


class Discriminator(Module):
    """Strided-conv critic on compressed HDR, one logit per sample."""

    def __init__(self, cfg):
        if cfg.height % 2 ** cfg.stages or cfg.height >> cfg.stages < 1:
            raise ValueError(f"height {cfg.height} too small for {cfg.stages} stride-2 stages")
        self._cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        chans = [3] + cfg.channels()
        self.convs = [Conv2d(rng, chans[i], chans[i + 1], 4, stride=2, pad=1, horizontal=cfg.pad_mode)
                      for i in range(cfg.stages)]
        self.head = Linear(rng, chans[-1], 1)

    @property
    def config(self):
        return self._cfg

    def forward(self, x):
        x = T.as_tensor(x)
        for conv in self.convs:
            x = T.leaky_relu(conv(x), 0.2)
        return self.head(x.mean(axis=(2, 3)))


def build_discriminator(cfg):
    return Discriminator(cfg)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"U360CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(params, config):
    """Serialise named float arrays plus a JSON config echo; sha256 trailer."""
    out = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(config, sort_keys=True).encode()
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    out.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


def read_checkpoint(data):
    data = bytes(data)
    if len(data) < len(MAGIC) + 4 + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    config = json.loads(body[pos:pos + n].decode())
    pos += n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return config, params


def save_models(path, generator, discriminator=None, extra=None):
    params = {f"G.{k}": v for k, v in generator.state_dict().items()}
    config = {"generator": generator.config.to_dict()}
    if discriminator is not None:
        params.update({f"D.{k}": v for k, v in discriminator.state_dict().items()})
        config["discriminator"] = discriminator.config.to_dict()
    if extra:
        config.update(extra)
    data = write_checkpoint(params, config)
    with open(path, "wb") as f:
        f.write(data)
    return data


def load_models(path):
    """Rebuild generator (and discriminator when present) from a checkpoint file."""
    with open(path, "rb") as f:
        config, params = read_checkpoint(f.read())
    gen = Generator(GeneratorConfig.from_dict(config["generator"]))
    gen.load_state_dict({k[2:]: v for k, v in params.items() if k.startswith("G.")})
    disc = None
    if "discriminator" in config:
        disc = Discriminator(DiscriminatorConfig.from_dict(config["discriminator"]))
        disc.load_state_dict({k[2:]: v for k, v in params.items() if k.startswith("D.")})
    return gen, disc, config


# ---------------------------------------------------------------------------
# sizing


def nearest_config_for(target_params, base=None, candidates=None):
    """Sweep the base width and return (config, count) closest to a parameter budget."""
    base = base or GeneratorConfig()
    best = None
    for c in candidates or range(32, 257, 8):
        try:
            cfg = GeneratorConfig(**{**base.to_dict(), "base_channels": c})
        except ValueError:
            continue
        n = parameter_count(cfg)
        if best is None or abs(n - target_params) < abs(best[1] - target_params):
            best = (cfg, n)
    return best


def _layer_params(d, ws, heads, mlp_ratio, rel_bias):
    hidden = d * mlp_ratio
    n = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * hidden + hidden + hidden * d + d)
    if rel_bias:
        n += (2 * ws - 1) ** 2 * heads
    return n


def parameter_count(cfg):
    """Closed-form generator parameter count (no allocation)."""
    p, C, cu = cfg.patch_size, cfg.base_channels, cfg.unembed_channels
    dims = cfg.stage_dims()
    grids = cfg.stage_grids()
    nstages = len(cfg.depths)
    total = cfg.in_channels * C * p * p + C + 2 * C

    def block(d, h, depth):
        ws = cfg.window_for(h)
        return depth * _layer_params(d, ws, cfg.heads(d), cfg.mlp_ratio, cfg.use_rel_pos_bias)

    for i in range(nstages):
        d_next = dims[i + 1] if i + 1 < nstages else cfg.bottleneck_dim()
        total += block(dims[i], grids[i][0], cfg.depths[i])
        total += 2 * 4 * dims[i] + 4 * dims[i] * d_next
        total += d_next * dims[i] + dims[i] + 2 * dims[i] * dims[i] + dims[i]
        total += block(dims[i], grids[i][0], cfg.depths[i])
    total += block(cfg.bottleneck_dim(), cfg.bottleneck_grid()[0], cfg.bottleneck_depth)
    total += 2 * C + C * p * p * cu + p * p * cu
    total += cu * cu * 9 + cu + cu * 3 * 9 + 3
    return total
