"""uformer360 command line: data synthesis, training, inference, evaluation, inspection."""

import argparse
import json
import os
import sys

import numpy as np

from . import checks
from . import geometry as G
from .data import load_pairs, load_panoramas, write_dataset
from .ibl import ConstantModel, GeneratorModel, IdentityModel, ProbeScene, eval_protocol, render_probe_array
from .imageio import display_ldr, load_image, save_image, tonemap_for_metrics
from .losses import LossWeights
from .networks import (DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator,
                       load_models, toy_discriminator_config, toy_generator_config)
from .training import TrainOptions, train


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# ---------------------------------------------------------------------------
# training configuration files

GEN_KEYS = {"height": int, "base_channels": int, "depths": "ints", "bottleneck_depth": int,
            "window_size": int, "head_dim": int, "mlp_ratio": int, "patch_size": int,
            "variant": str, "use_rel_pos_bias": bool, "pad_mode": str}
TRAIN_KEYS = {"steps": int, "batch_size": int, "lr_g": float, "lr_d": float, "beta1": float,
              "beta2": float, "weight_decay": float, "adversarial": str, "freeze_discriminator": bool,
              "checkpoint_every": int, "val_every": int, "seed": int}
OTHER_KEYS = {"preset": str, "disc_channels": int, "l1_weight": float, "perc_weight": float,
              "adv_weight": float}
CONFIG_KEYS = {**GEN_KEYS, **TRAIN_KEYS, **OTHER_KEYS}


def _convert(key, kind, text):
    try:
        if kind == "ints":
            return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        return kind(text)
    except ValueError:
        raise CliError(f"config key {key!r}: cannot parse {text!r}") from None


def parse_config(text):
    """Plain ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    cfg = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise CliError(f"config line {n}: unknown key {key!r}")
        if key in cfg:
            raise CliError(f"config line {n}: duplicate key {key!r}")
        cfg[key] = _convert(key, CONFIG_KEYS[key], value)
    return cfg


def build_from_config(cfg, seed=None):
    preset = cfg.get("preset", "toy")
    if preset not in ("toy", "default"):
        raise CliError(f"unknown preset {preset!r}")
    seed = cfg.get("seed", 0) if seed is None else seed
    gen_over = {k: v for k, v in cfg.items() if k in GEN_KEYS}
    if "height" in gen_over:
        gen_over["width"] = 2 * gen_over["height"]
    if preset == "toy":
        gcfg = toy_generator_config(seed=seed, **gen_over)
        dcfg = toy_discriminator_config(height=gcfg.height, width=gcfg.width, seed=seed + 1)
    else:
        gcfg = GeneratorConfig(seed=seed, **gen_over)
        dcfg = DiscriminatorConfig(height=gcfg.height, width=gcfg.width, seed=seed + 1)
    if "disc_channels" in cfg:
        dcfg.base_channels = cfg["disc_channels"]
    weights = LossWeights(cfg.get("l1_weight", 5.0), cfg.get("perc_weight", 5.0), cfg.get("adv_weight", 0.2))
    topts = {k: v for k, v in cfg.items() if k in TRAIN_KEYS}
    topts["seed"] = seed
    opts = TrainOptions(loss_weights=weights, **topts)
    return gcfg, dcfg, opts


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(a):
    m = write_dataset(a.out, a.scenes, seed=a.seed, height=a.height, jobs=a.jobs)
    n_test = sum(s["split"] == "test" for s in m["scenes"].values())
    print(f"wrote {a.scenes} scenes ({a.scenes - n_test} train, {n_test} test) to {a.out}")


def cmd_train(a):
    with open(a.config, encoding="utf-8") as f:
        cfg = parse_config(f.read())
    gcfg, dcfg, opts = build_from_config(cfg, a.seed)
    opts.out_dir = a.out
    data = load_pairs(a.data, "train", seed=opts.seed)
    if data.inputs.shape[2] != gcfg.height:
        raise CliError(f"dataset height {data.inputs.shape[2]} != model height {gcfg.height}")
    try:
        val = load_pairs(a.data, "test", seed=opts.seed)
    except ValueError:
        val = None
    gen, disc = build_generator(gcfg), build_discriminator(dcfg)
    result = train(gen, disc, data, opts, val_set=val)
    last = result.records[-1] if result.records else {}
    print(json.dumps({"steps": opts.steps, "final": last, "checkpoints": len(result.checkpoints)}, sort_keys=True))


def _read_ldr(path):
    img = load_image(path)
    return img if path.endswith(".ppm") else display_ldr(img)


def cmd_infer(a):
    gen, _, _ = load_models(a.ckpt)
    cfg = gen.config
    persp = _read_ldr(a.input)
    erp, mask = G.perspective_to_erp(persp, a.fov, a.yaw, a.pitch, cfg.height, cfg.width)
    inp = np.concatenate([np.clip(erp.values, 0, 1) * mask[..., None], mask[..., None]], axis=-1)
    hdr = GeneratorModel(gen)(inp.transpose(2, 0, 1).astype(np.float32))
    save_image(a.out + ".hdr", hdr.astype(np.float32))
    save_image(a.out + ".ppm", tonemap_for_metrics(hdr))
    print(f"wrote {a.out}.hdr and {a.out}.ppm")


def _model_for(a):
    if a.model == "identity":
        return IdentityModel()
    if a.model == "black":
        return ConstantModel(0.0)
    if not a.ckpt:
        raise CliError("eval needs --ckpt or --model identity|black")
    gen, _, _ = load_models(a.ckpt)
    return GeneratorModel(gen)


def cmd_eval(a):
    model = _model_for(a)
    panos = load_panoramas(a.data, a.split)
    if not panos:
        raise CliError(f"no {a.split} panoramas in {a.data}")
    report = eval_protocol(model, panos, a.mode, jobs=a.jobs)
    text = json.dumps(dict(report.to_dict(), mode=a.mode, panoramas=len(panos)), sort_keys=True, indent=1)
    with open(a.out, "w") as f:
        f.write(text + "\n")
    print(text)


def _split_ext(path):
    stem, ext = os.path.splitext(path)
    if ext not in (".hdr", ".pfm", ".ppm"):
        raise CliError(f"unsupported image extension {ext!r}")
    return stem, ext


def cmd_inspect(a):
    _, ext = _split_ext(a.input)
    img = G.ErpImage(load_image(a.input))
    outs = {
        "yaw180": G.yaw_roll(img, img.width // 2).values,
        "pitch_p90": G.pitch_rotate(img, 90.0).values,
        "pitch_m90": G.pitch_rotate(img, -90.0).values,
    }
    for name, v in outs.items():
        save_image(f"{a.out}_{name}{ext}", v.astype(np.float32))
    print(" ".join(f"{a.out}_{n}{ext}" for n in outs))


def cmd_erp(a):
    img = load_image(a.input)
    if a.op == "yaw":
        out = G.yaw_rotate(G.ErpImage(img), a.angle).values
    elif a.op == "pitch":
        out = G.pitch_rotate(G.ErpImage(img), a.angle).values
    elif a.op == "to-persp":
        out = G.erp_to_perspective(G.ErpImage(img), a.fov, a.yaw, a.pitch, a.size, a.size)
    else:
        erp, mask = G.perspective_to_erp(img, a.fov, a.yaw, a.pitch, a.height, 2 * a.height)
        out = erp.values
        if a.mask_out:
            save_image(a.mask_out, mask.astype(np.float32))
    save_image(a.out, np.asarray(out, dtype=np.float32))
    print(f"wrote {a.out}")


def cmd_render_diffuse(a):
    env = G.ErpImage(load_image(a.env))
    linear, tonemapped = render_probe_array(env.values, ProbeScene(elevation=a.elevation))
    save_image(a.out + ".pfm", linear.astype(np.float32))
    save_image(a.out + ".ppm", tonemapped)
    print(f"wrote {a.out}.pfm and {a.out}.ppm")


def cmd_grad_check(a):
    ok = True
    for name, err in checks.gradient_suite(a.seed):
        passed = err < checks.GRAD_TOL
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name} max_rel_err={err:.3e}")
    return 0 if ok else 1


def cmd_selftest(a):
    ok = True
    for name, passed, detail in checks.invariant_suite(a.seed):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name} {detail}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="uformer360", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    # also accepted after the subcommand name
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    s = sub.add_parser("synth-data", help="generate a procedural panorama dataset")
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=int, default=64)
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("train", help="train generator and critic")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="predict a panorama from a limited-FOV image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--fov", type=float, required=True)
    s.add_argument("--yaw", type=float, default=0.0)
    s.add_argument("--pitch", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", help="render-metric evaluation")
    s.add_argument("--ckpt")
    s.add_argument("--model", choices=("generator", "identity", "black"), default="generator")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("indoor", "outdoor"), required=True)
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("inspect", help="180-degree yaw and +-90-degree pitch views")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("erp", help="geometry utilities")
    s.add_argument("--op", choices=("yaw", "pitch", "to-persp", "from-persp"), required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--angle", type=float, default=0.0)
    s.add_argument("--fov", type=float, default=90.0)
    s.add_argument("--yaw", type=float, default=0.0)
    s.add_argument("--pitch", type=float, default=0.0)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--mask-out")
    s.set_defaults(fn=cmd_erp)

    s = sub.add_parser("render-diffuse", help="probe-scene renders lit by an environment map")
    s.add_argument("--env", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--elevation", type=float, default=45.0)
    s.set_defaults(fn=cmd_render_diffuse)

    s = sub.add_parser("grad-check", help="finite-difference gradient suite")
    s.set_defaults(fn=cmd_grad_check)
    s = sub.add_parser("selftest", help="invariant suite")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1")
        return args.fn(args) or 0
    except Exception as e:  # noqa: BLE001 - every failure becomes one stderr line
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
