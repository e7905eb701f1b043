"""Procedural HDR panoramas, augmentation, limited-FOV masking and dataset splits."""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry as G
from .imageio import HDR_CEILING, compress_hdr, display_ldr, load_image, save_image
from .training import PairDataset, TrainingPair

FOVS = (40, 60, 90, 120)
AUG_YAWS = tuple(range(20, 341, 40))
N_AUG = 8
FLIP_PROB = 0.2
SUN_RADIUS_DEG = 2.0


@dataclass
class SceneParams:
    seed: int
    sun_theta: float            # colatitude, radians
    sun_phi: float              # longitude, radians
    sun_radiance: float
    sky_zenith: tuple
    sky_horizon: tuple
    ground_albedo: tuple
    checker_scale: int
    boxes: list = field(default_factory=list)   # (theta0, theta1, phi0, phi1, (r, g, b))

    def __post_init__(self):
        values = [self.sun_radiance, *self.sky_zenith, *self.sky_horizon]
        values += [c for b in self.boxes for c in b[4]]
        if min(values) < 0 or max(values) > HDR_CEILING:
            raise ValueError("scene radiances must lie in [0, 2^6.6]")

    def to_dict(self):
        return asdict(self)


def scene_rng(seed, index, stream=0):
    """Independent generator per (dataset seed, scene index, stream)."""
    return np.random.default_rng(np.random.SeedSequence([seed, index, stream]))


def random_scene_params(seed, index=0):
    rng = scene_rng(seed, index)
    k = rng.uniform(0.4, 1.2)
    zenith = tuple(float(v) for v in k * np.array([0.25, 0.4, 0.9]) * rng.uniform(0.8, 1.2, 3))
    horizon = tuple(float(v) for v in k * np.array([0.8, 0.8, 0.85]) * rng.uniform(0.8, 1.2, 3))
    albedo = tuple(float(v) for v in rng.uniform(0.15, 0.6, 3))
    boxes = []
    for _ in range(int(rng.integers(0, 4))):
        t1 = np.pi / 2 + rng.uniform(0.0, 0.15)
        t0 = t1 - rng.uniform(0.15, 0.6)
        p0 = rng.uniform(-np.pi, np.pi)
        boxes.append((float(t0), float(t1), float(p0), float(p0 + rng.uniform(0.2, 0.9)),
                      tuple(float(v) for v in rng.uniform(0.05, 1.0, 3))))
    return SceneParams(
        seed=int(seed) * 1_000_003 + int(index),
        sun_theta=float(np.deg2rad(rng.uniform(10, 80))),
        sun_phi=float(rng.uniform(-np.pi, np.pi)),
        sun_radiance=float(rng.uniform(5, 90)),
        sky_zenith=zenith, sky_horizon=horizon, ground_albedo=albedo,
        checker_scale=int(rng.integers(4, 13)), boxes=boxes)


def gen_panorama(params, height=64):
    """Rasterise a scene to an (H, 2H, 3) float32 linear-radiance ERP."""
    H, W = height, 2 * height
    r, c = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    theta = r * np.pi / H
    phi = c * 2 * np.pi / W - np.pi
    out = np.zeros((H, W, 3))

    sky = theta < np.pi / 2
    t = (theta / (np.pi / 2))[..., None]
    grad = (1 - t) * np.array(params.sky_zenith) + t * np.array(params.sky_horizon)
    out[sky] = grad[sky]

    # ground lit by the average horizon sky, modulated by a checkerboard
    n = params.checker_scale
    ci = np.floor((phi + np.pi) / (2 * np.pi) * 2 * n) + np.floor((theta - np.pi / 2) / (np.pi / 2) * n)
    shade = np.where(ci % 2 == 0, 1.0, 0.5)
    ground_light = np.mean(params.sky_horizon) + params.sun_radiance * 0.01
    g = ~sky
    out[g] = (shade[..., None] * np.array(params.ground_albedo) * ground_light)[g]

    for t0, t1, p0, p1, rgb in params.boxes:
        dp = (phi - p0) % (2 * np.pi)
        inside = (theta >= t0) & (theta < t1) & (dp < (p1 - p0))
        out[inside] = rgb

    st = np.sin(params.sun_theta)
    sun = np.array([st * np.cos(params.sun_phi), st * np.sin(params.sun_phi), np.cos(params.sun_theta)])
    d = G.pixel_dirs(H, W)
    disk = d @ sun >= np.cos(np.deg2rad(SUN_RADIUS_DEG))
    sr, sc = G.dir_to_pix(sun, H, W)
    disk[int(np.clip(np.floor(sr), 0, H - 1)), int(np.floor(sc)) % W] = True
    out[disk] = params.sun_radiance
    return out.astype(np.float32)


def augment(pano, rng):
    """Eight variants: distinct yaws from the 40-degree lattice, each maybe flipped."""
    yaws = rng.choice(AUG_YAWS, size=N_AUG, replace=False)
    variants = []
    for yaw in yaws:
        img = G.yaw_rotate(pano, float(yaw))
        flipped = bool(rng.random() < FLIP_PROB)
        if flipped:
            img = G.vertical_flip(img)
        variants.append((img, int(yaw), flipped))
    return variants


def sample_fov(rng):
    return int(rng.choice(FOVS))


def make_training_pair(pano, fov, crop_size=None, yaw=0.0, pitch=0.0):
    """Centre-facing limited-FOV observation re-projected onto the ERP grid."""
    pano = np.asarray(pano)
    H, W = pano.shape[:2]
    s = crop_size or H
    ldr = display_ldr(pano)
    persp = G.erp_to_perspective(ldr, fov, yaw, pitch, s, s)
    erp, mask = G.perspective_to_erp(persp, fov, yaw, pitch, H, W)
    masked = np.clip(erp.values, 0.0, 1.0) * mask[..., None]
    inp = np.concatenate([masked, mask[..., None]], axis=-1).transpose(2, 0, 1)
    target = compress_hdr(np.asarray(pano, dtype=np.float64)).transpose(2, 0, 1)
    return TrainingPair(inp.astype(np.float32), target.astype(np.float32))


def split_dataset(scene_ids, ratio=0.99, seed=0):
    """Base-scene granularity train/test assignment."""
    ids = sorted(scene_ids)
    n = len(ids)
    n_test = 0 if n < 2 else min(n - 1, max(1, int(round(n * (1 - ratio)))))
    order = np.random.default_rng(seed).permutation(n)
    test = {ids[i] for i in order[:n_test]}
    return {i: ("test" if i in test else "train") for i in ids}


def synthetic_panoramas(n, seed, height=64):
    return [gen_panorama(random_scene_params(seed, i), height) for i in range(n)]


def synthetic_pairs(n_scenes, seed, height=64, augmented=True):
    """In-memory training set: every base scene plus its augmentations, one FOV each."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    pairs = []
    for i in range(n_scenes):
        pano = gen_panorama(random_scene_params(seed, i), height)
        panos = [pano]
        if augmented:
            panos += [v[0] for v in augment(pano, scene_rng(seed, i, 1))]
        pairs += [make_training_pair(p, sample_fov(rng)) for p in panos]
    return PairDataset.from_pairs(pairs)


# ---------------------------------------------------------------------------
# on-disk datasets


def scene_id(i):
    return f"scene_{i:05d}"


def _write_scene(args):
    out_dir, seed, i, height = args
    params = random_scene_params(seed, i)
    pano = gen_panorama(params, height)
    d = os.path.join(out_dir, "scenes", scene_id(i))
    os.makedirs(d, exist_ok=True)
    save_image(os.path.join(d, "pano.hdr"), pano)
    augs = []
    for k, (img, yaw, flipped) in enumerate(augment(pano, scene_rng(seed, i, 1))):
        save_image(os.path.join(d, f"aug_{k}.hdr"), img)
        augs.append({"k": k, "yaw": yaw, "flipped": flipped})
    return params.to_dict(), augs


def write_dataset(out_dir, n_scenes, seed=0, height=64, jobs=1):
    if n_scenes < 1:
        raise ValueError("need at least one scene")
    tasks = [(out_dir, seed, i, height) for i in range(n_scenes)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_write_scene, tasks))
    else:
        results = [_write_scene(t) for t in tasks]
    split = split_dataset([scene_id(i) for i in range(n_scenes)], seed=seed)
    manifest = {"seed": seed, "height": height, "width": 2 * height, "scenes": {}}
    for i, (params, augs) in enumerate(results):
        sid = scene_id(i)
        manifest["scenes"][sid] = {"split": split[sid], "params": params, "augmentations": augs}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        f.write(manifest_json(manifest))
    return manifest


def manifest_json(manifest):
    return json.dumps(manifest, sort_keys=True, indent=1) + "\n"


def read_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    with open(path) as f:
        return json.load(f)


def scene_ids(manifest, split="train"):
    return sorted(s for s, e in manifest["scenes"].items() if split == "all" or e["split"] == split)


def load_panoramas(data_dir, split="test", augmented=False):
    manifest = read_manifest(data_dir)
    out = []
    for sid in scene_ids(manifest, split):
        d = os.path.join(data_dir, "scenes", sid)
        out.append(load_image(os.path.join(d, "pano.hdr")))
        if augmented:
            for a in manifest["scenes"][sid]["augmentations"]:
                out.append(load_image(os.path.join(d, f"aug_{a['k']}.hdr")))
    return out


def load_pairs(data_dir, split="train", seed=0):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    panos = load_panoramas(data_dir, split, augmented=True)
    if not panos:
        raise ValueError(f"no {split} scenes in {data_dir}")
    return PairDataset.from_pairs(make_training_pair(p, sample_fov(rng)) for p in panos)
