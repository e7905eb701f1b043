"""Diffuse image-based lighting of a probe scene and render-space metrics."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from . import geometry as G
from . import tensor as T
from .data import make_training_pair
from .imageio import expand_hdr, tonemap_for_metrics

IRRADIANCE_GRID = (32, 64)
PSNR_CAP = 99.0
ANGULAR_EPS = 1e-6

VIEWS = {
    "indoor": [(50.0, 36.0 * k) for k in range(10)],
    "outdoor": [(90.0, 0.0), (90.0, 120.0), (90.0, 240.0)],
}


def diffuse_irradiance(env, normals):
    """Sum over texels of L * max(0, n.w) * solid angle, for (..., 3) normals."""
    v = G._raster(env)
    if v.ndim == 2:
        v = v[:, :, None]
    H, W, C = v.shape
    if W != 2 * H:
        raise ValueError(f"environment map needs W = 2H, got {H}x{W}")
    normals = np.asarray(normals, dtype=np.float64)
    shape = normals.shape[:-1]
    dirs = G.pixel_dirs(H, W).reshape(-1, 3)
    weighted = (v.astype(np.float64) * G.solid_angle_map(H, W)[..., None]).reshape(-1, C)
    out = _kernels.irradiance(normals.reshape(-1, 3), dirs, weighted)
    return out.reshape(shape + (C,))


class IrradianceMap:
    """Irradiance on a coarse ERP grid of normals plus the two exact pole values.

    Lookups interpolate bilinearly; between the first (last) ring of texel
    centres and the pole they blend towards the pole sample, so the result at
    a pole does not depend on longitude.
    """

    def __init__(self, values, north, south):
        self.values = values
        self.north = north
        self.south = south

    def lookup(self, normals):
        h, w, C = self.values.shape
        r, c = G.dir_to_pix(normals, h, w)
        shape = np.shape(r)
        u = np.asarray(r).reshape(-1) - 0.5
        ring = G.sample(self.values, np.clip(u, 0.0, h - 1.0) + 0.5, np.asarray(c).reshape(-1))
        out = ring.copy()
        top = u < 0
        t = (u[top] + 0.5) / 0.5
        out[top] = t[:, None] * ring[top] + (1 - t)[:, None] * self.north
        bot = u > h - 1
        t = (h - 0.5 - u[bot]) / 0.5
        out[bot] = t[:, None] * ring[bot] + (1 - t)[:, None] * self.south
        return out.reshape(shape + (C,))


def irradiance_map(env, grid=IRRADIANCE_GRID):
    h, w = grid
    values = diffuse_irradiance(env, G.pixel_dirs(h, w))
    poles = diffuse_irradiance(env, np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]))
    return IrradianceMap(values, poles[0], poles[1])


def lookup_irradiance(emap, normals):
    return emap.lookup(normals)


@dataclass(frozen=True)
class ProbeScene:
    """3x3 unit spheres resting on a ground plane, seen by an orthographic camera.

    ``elevation`` is the camera's angle above the horizon (90 looks straight
    down).  Every pixel hits either a sphere or the ground.
    """
    height: int = 96
    width: int = 128
    elevation: float = 45.0
    spacing: float = 2.5
    radius: float = 1.0
    albedo: float = 0.8
    half_extent: float = 4.5

    def camera(self):
        e = np.deg2rad(self.elevation)
        d = np.array([0.0, np.cos(e), -np.sin(e)])
        right = np.array([1.0, 0.0, 0.0])
        up = np.array([0.0, np.sin(e), np.cos(e)])
        return d, right, up

    def centers(self):
        s = self.spacing
        return np.array([(x, y, self.radius) for y in (-s, 0.0, s) for x in (-s, 0.0, s)])

    def normals(self):
        return _scene_normals(self)


@lru_cache(maxsize=8)
def _scene_normals(scene):
    if not 0 < scene.elevation <= 90:
        raise ValueError("camera elevation must be in (0, 90] degrees")
    d, right, up = scene.camera()
    aspect = scene.width / scene.height
    ys = (1 - (np.arange(scene.height) + 0.5) / scene.height * 2) * scene.half_extent
    xs = ((np.arange(scene.width) + 0.5) / scene.width * 2 - 1) * scene.half_extent * aspect
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    target = np.array([0.0, 0.0, scene.radius])
    origin = target + xx[..., None] * right + yy[..., None] * up - 100.0 * d
    # ground plane z = 0
    t_best = -origin[..., 2] / d[2]
    normal = np.zeros(origin.shape)
    normal[..., 2] = 1.0
    for c in scene.centers():
        oc = origin - c
        b = oc @ d
        disc = b * b - (np.sum(oc * oc, axis=-1) - scene.radius ** 2)
        hit = disc >= 0
        t = np.where(hit, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
        closer = hit & (t < t_best)
        t_best = np.where(closer, t, t_best)
        p = origin[closer] + t[closer][:, None] * d
        normal[closer] = (p - c) / scene.radius
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    normal.setflags(write=False)
    return normal


def render_probe_array(env, scene=None):
    """(linear, tonemapped) renders of the probe scene lit by ``env``."""
    scene = scene or ProbeScene()
    emap = irradiance_map(env)
    linear = scene.albedo / np.pi * lookup_irradiance(emap, scene.normals())
    return linear, tonemap_for_metrics(linear)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    si_rmse: float
    rmse: float
    rgb_angular: float
    psnr: float
    angular_skipped: int = 0
    count: int = 1

    def to_dict(self):
        return asdict(self)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty render")
    if a.shape != b.shape:
        raise T.ShapeError(f"render shapes differ: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b):
    a, b = _check_pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b, peak=1.0):
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(peak * peak / mse)))


def si_scale(pred_lin, gt_lin):
    pred_lin, gt_lin = _check_pair(pred_lin, gt_lin)
    pp = np.sum(pred_lin * pred_lin)
    return float(np.sum(pred_lin * gt_lin) / pp) if pp > 0 else 1.0


def si_rmse(pred_lin, gt_lin):
    s = si_scale(pred_lin, gt_lin)
    return rmse(tonemap_for_metrics(s * np.asarray(pred_lin)), tonemap_for_metrics(gt_lin))


def rgb_angular(pred, gt):
    """(mean angle in degrees, skipped pixel count) over (..., 3) pixels."""
    p, g = _check_pair(pred, gt)
    p = p.reshape(-1, p.shape[-1])
    g = g.reshape(-1, g.shape[-1])
    np_ = np.linalg.norm(p, axis=1)
    ng = np.linalg.norm(g, axis=1)
    ok = (np_ >= ANGULAR_EPS) & (ng >= ANGULAR_EPS)
    skipped = int(np.sum(~ok))
    if not ok.any():
        return 0.0, skipped
    # atan2 of |p x g| and p.g stays exact at zero angle, unlike arccos
    p, g = p[ok], g[ok]
    if p.shape[1] == 3:
        cross = np.linalg.norm(np.cross(p, g), axis=1)
    else:
        cross = np.sqrt(np.maximum(np_[ok] ** 2 * ng[ok] ** 2 - np.sum(p * g, axis=1) ** 2, 0.0))
    ang = np.arctan2(cross, np.sum(p * g, axis=1))
    return float(np.degrees(np.mean(ang))), skipped


def metrics(pred_lin, gt_lin):
    """Compare two linear renders; error terms use the metric tonemapper."""
    pred_lin, gt_lin = _check_pair(pred_lin, gt_lin)
    tp, tg = tonemap_for_metrics(pred_lin), tonemap_for_metrics(gt_lin)
    ang, skipped = rgb_angular(pred_lin, gt_lin)
    return MetricReport(si_rmse=si_rmse(pred_lin, gt_lin), rmse=rmse(tp, tg),
                        rgb_angular=ang, psnr=psnr(tp, tg), angular_skipped=skipped)


def aggregate(reports):
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    n = sum(r.count for r in reports)

    def avg(key):
        return float(sum(getattr(r, key) * r.count for r in reports) / n)

    return MetricReport(avg("si_rmse"), avg("rmse"), avg("rgb_angular"), avg("psnr"),
                        sum(r.angular_skipped for r in reports), n)


# ---------------------------------------------------------------------------
# evaluation protocol


class IdentityModel:
    """Oracle that answers with the ground-truth panorama."""

    def __call__(self, inp, gt):
        return np.asarray(gt, dtype=np.float64)


class ConstantModel:
    def __init__(self, value=0.0):
        self.value = value

    def __call__(self, inp, gt):
        return np.full(np.shape(gt), self.value, dtype=np.float64)


class GeneratorModel:
    """Wraps a generator: masked input -> linear HDR (H, W, 3)."""

    def __init__(self, generator):
        self.generator = generator

    def __call__(self, inp, gt=None):
        with T.no_grad():
            out = self.generator(np.asarray(inp, dtype=np.float32)[None]).data[0]
        return expand_hdr(np.clip(out, 0.0, 2.0).transpose(1, 2, 0).astype(np.float64))


def crop_views(mode):
    if mode not in VIEWS:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    return VIEWS[mode]


def evaluate_panorama(model, pano, mode, scene=None):
    pano = np.asarray(pano, dtype=np.float64)
    gt_lin, _ = render_probe_array(pano, scene)
    reports = []
    for fov, yaw in crop_views(mode):
        pair = make_training_pair(pano, fov, yaw=yaw)
        pred = np.maximum(np.asarray(model(pair.input, pano), dtype=np.float64), 0.0)
        if pred.shape != pano.shape:
            raise T.ShapeError(f"model returned {pred.shape}, expected {pano.shape}")
        pred_lin, _ = render_probe_array(pred, scene)
        reports.append(metrics(pred_lin, gt_lin))
    return reports


def _evaluate_task(args):
    return evaluate_panorama(*args)


def eval_protocol(model, panoramas, mode, scene=None, jobs=1):
    """Aggregate render metrics over every crop of every panorama."""
    crop_views(mode)
    tasks = [(model, p, mode, scene) for p in panoramas]
    if not tasks:
        raise ValueError("no panoramas to evaluate")
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            per = list(ex.map(_evaluate_task, tasks))
    else:
        per = [_evaluate_task(t) for t in tasks]
    return aggregate(r for rs in per for r in rs)
