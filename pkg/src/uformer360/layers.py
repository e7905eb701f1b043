"""Parameter containers and the handful of layers the networks are built from."""

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) truncated at +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def parameter(values):
    return Tensor(np.asarray(values, dtype=T.default_dtype()), requires_grad=True)


class Module:
    """Attribute-walking parameter registry (Tensors, Modules, lists of either)."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, prefix + name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, prefix):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield prefix, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{prefix}.{i}")


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self._eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self._eps)


class Conv2d(Module):
    """Convolution with explicit ERP-aware padding.

    ``pad`` pixels are added on every side: circular along width, and
    ``vertical`` mode (reflect or zero) along height.  ``horizontal`` can be
    forced to "zero" for the seam ablation.
    """

    def __init__(self, rng, c_in, c_out, kernel, stride=1, pad=0, horizontal="circular", vertical="reflect"):
        fan_in = c_in * kernel * kernel
        self.weight = parameter(rng.standard_normal((c_out, c_in, kernel, kernel)) * np.sqrt(2.0 / fan_in))
        self.bias = parameter(np.zeros(c_out))
        self._stride = stride
        self._pad = pad
        self.horizontal = horizontal
        self.vertical = vertical

    def forward(self, x):
        if self._pad:
            p = self._pad
            x = T.pad(x, {2: (p, p)}, mode=self.vertical)
            x = T.pad(x, {3: (p, p)}, mode=self.horizontal)
        return T.conv2d(x, self.weight, self.bias, stride=self._stride)


class Mlp(Module):
    def __init__(self, rng, dim, ratio=4):
        self.fc1 = Linear(rng, dim, dim * ratio)
        self.fc2 = Linear(rng, dim * ratio, dim)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))
