"""Alternating critic/generator optimisation loop."""

import json
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .losses import ADVERSARIAL, LossWeights, PyramidExtractor, l1_loss, perceptual_loss, total_generator_loss
from .networks import save_models


@dataclass
class TrainingPair:
    """Network input (masked display LDR + mask, 4xHxW) and compressed HDR target (3xHxW)."""
    input: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        if self.input.ndim != 3 or self.input.shape[0] != 4:
            raise T.ShapeError(f"input must be 4xHxW, got {self.input.shape}")
        if self.target.shape != (3,) + self.input.shape[1:]:
            raise T.ShapeError(f"target shape {self.target.shape} does not match input {self.input.shape}")
        mask = self.input[3]
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must be binary")
        if np.any(self.input[:3][:, mask == 0] != 0):
            raise ValueError("LDR channels must be zero outside the mask")

    @property
    def mask(self):
        return self.input[3]


class PairDataset:
    """Stacked training pairs held in memory as float32 arrays."""

    def __init__(self, inputs, targets):
        self.inputs = np.ascontiguousarray(inputs, dtype=np.float32)
        self.targets = np.ascontiguousarray(targets, dtype=np.float32)
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in length")

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        if not pairs:
            raise ValueError("empty dataset")
        return cls(np.stack([p.input for p in pairs]), np.stack([p.target for p in pairs]))

    def __len__(self):
        return len(self.inputs)

    def batch(self, idx):
        return self.inputs[idx], self.targets[idx]


class Adam:
    """Adam with coupled L2 weight decay (decay added to the gradient)."""

    def __init__(self, params, lr, betas=(0.0, 0.9), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@contextmanager
def frozen(module):
    """Temporarily stop recording gradients for a module's parameters."""
    params = module.parameters()
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


@dataclass
class TrainOptions:
    steps: int = 2000
    batch_size: int = 4
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    adversarial: str = "ralsgan"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    freeze_discriminator: bool = False
    checkpoint_every: int = 500
    val_every: int = 200
    out_dir: str = None

    def __post_init__(self):
        if self.adversarial not in ADVERSARIAL:
            raise ValueError(f"unknown adversarial loss {self.adversarial!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


class TrainingDiverged(RuntimeError):
    def __init__(self, step, checkpoint):
        super().__init__(f"non-finite loss at step {step}; last good state saved to {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    records: list
    val_curve: list
    checkpoints: list


def validation_l1(gen, dataset, batch_size=8):
    if dataset is None or len(dataset) == 0:
        return float("nan")
    total = 0.0
    with T.no_grad():
        for s in range(0, len(dataset), batch_size):
            x, y = dataset.batch(slice(s, s + batch_size))
            pred = gen(x).data
            total += float(np.abs(pred - y).sum())
    return total / dataset.targets.size


def _sample_batch(rng, n, size):
    return np.sort(rng.choice(n, size=size, replace=n < size))


def train(gen, disc, dataset, opts=None, val_set=None, extractor=None, on_record=None):
    """Run ``opts.steps`` alternating D/G updates.

    Loss records go to ``out_dir/losses.jsonl`` and validation L1 to
    ``out_dir/val.jsonl`` when an output directory is given.  A non-finite
    loss writes ``last_good.ckpt`` from the pre-step parameters and raises
    :class:`TrainingDiverged`.
    """
    opts = opts or TrainOptions()
    extractor = extractor or PyramidExtractor()
    adv_fn = ADVERSARIAL[opts.adversarial]
    weights = opts.loss_weights
    rng = np.random.default_rng(opts.seed)
    opt_g = Adam(gen.parameters(), opts.lr_g, (opts.beta1, opts.beta2), weight_decay=opts.weight_decay)
    opt_d = Adam(disc.parameters(), opts.lr_d, (opts.beta1, opts.beta2), weight_decay=opts.weight_decay)

    out = opts.out_dir
    loss_file = val_file = None
    if out:
        os.makedirs(out, exist_ok=True)
        loss_file = open(os.path.join(out, "losses.jsonl"), "w")
        val_file = open(os.path.join(out, "val.jsonl"), "w")
    meta = {"train_options": _options_echo(opts)}
    records, val_curve, ckpts = [], [], []

    def log_val(step):
        if val_set is None:
            return
        v = validation_l1(gen, val_set)
        val_curve.append((step, v))
        if val_file:
            val_file.write(json.dumps({"step": step, "val_l1": v}) + "\n")
            val_file.flush()

    def checkpoint(name, step):
        if not out:
            return None
        path = os.path.join(out, name)
        save_models(path, gen, disc, dict(meta, step=step))
        ckpts.append(path)
        return path

    try:
        if opts.val_every:
            log_val(0)
        for step in range(1, opts.steps + 1):
            idx = _sample_batch(rng, len(dataset), opts.batch_size)
            x, y = dataset.batch(idx)

            # critic update on detached fakes
            loss_d_val = None
            if not opts.freeze_discriminator:
                with T.no_grad():
                    fake = gen(x).data
                loss_d, _ = adv_fn(disc(y), disc(fake))
                loss_d_val = float(loss_d.data)
                if not math.isfinite(loss_d_val):
                    raise TrainingDiverged(step, checkpoint("last_good.ckpt", step - 1))
                disc.zero_grad()
                loss_d.backward()
                opt_d.step()

            # generator update through a frozen critic
            pred = gen(x)
            l1 = l1_loss(pred, y)
            perc = perceptual_loss(extractor, pred, y)
            with frozen(disc):
                with T.no_grad():
                    d_real = disc(y).data
                _, adv = adv_fn(d_real, disc(pred))
            loss_g = total_generator_loss(weights, l1, perc, adv)
            rec = {"step": step, "loss_d": loss_d_val, "loss_g": float(loss_g.data),
                   "l1": float(l1.data), "perc": float(perc.data), "adv": float(adv.data)}
            if not math.isfinite(rec["loss_g"]):
                # the critic already moved this step; its pre-step state is gone, so
                # only the generator is guaranteed last-good here
                raise TrainingDiverged(step, checkpoint("last_good.ckpt", step - 1))
            gen.zero_grad()
            loss_g.backward()
            opt_g.step()

            records.append(rec)
            if loss_file:
                loss_file.write(json.dumps(rec) + "\n")
            if on_record:
                on_record(rec)
            if opts.val_every and step % opts.val_every == 0:
                log_val(step)
            if opts.checkpoint_every and step % opts.checkpoint_every == 0:
                checkpoint(f"step_{step:06d}.ckpt", step)
        checkpoint("final.ckpt", opts.steps)
    finally:
        if loss_file:
            loss_file.close()
            val_file.close()
    return TrainResult(records, val_curve, ckpts)


def _options_echo(opts):
    d = asdict(opts)
    d.pop("out_dir")
    return d
