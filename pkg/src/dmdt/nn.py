"""Parameter containers and the basic layers built on the autograd engine."""
from __future__ import annotations

import contextlib

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def seeded_rng(seed):
    """Deterministic generator (numpy PCG64) for init, dropout and data."""
    return np.random.default_rng(seed)


class Module:
    training = True

    def named_tensors(self, prefix=""):
        """All tensors owned by this module, trainable or frozen, in a fixed order."""
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_tensors(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, t in self.named_tensors():
            t.grad = None

    def state_dict(self):
        return {name: t.data for name, t in self.named_tensors()}

    def load_state_dict(self, state):
        own = dict(self.named_tensors())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


INIT_SCHEMES = ("xavier", "fan_in")


def init_bound(n_in, n_out, scheme):
    if scheme == "xavier":
        return np.sqrt(6.0 / (n_in + n_out))
    if scheme == "fan_in":
        return 1.0 / np.sqrt(n_in)
    raise ValueError(f"unknown init scheme {scheme!r}")


_default_scheme = "xavier"


@contextlib.contextmanager
def init_scheme(name):
    """Weight init used by every Linear built inside the block."""
    global _default_scheme
    init_bound(1, 1, name)
    prev, _default_scheme = _default_scheme, name
    try:
        yield
    finally:
        _default_scheme = prev


class Linear(Module):
    """Affine map with weight stored (in, out), uniform init, zero bias.

    "xavier" draws U(+-sqrt(6/(in+out))), "fan_in" draws U(+-1/sqrt(in)).
    """

    def __init__(self, n_in, n_out, rng, dtype=np.float64, bias=True, scheme=None):
        bound = init_bound(n_in, n_out, scheme or _default_scheme)
        self.weight = param(rng.uniform(-bound, bound, (n_in, n_out)), dtype)
        self.bias = param(np.zeros(n_out), dtype) if bias else None

    def forward(self, x):
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float64, eps=1e-5):
        self.gain = param(np.ones(dim), dtype)
        self.bias = param(np.zeros(dim), dtype)
        self.eps = eps

    def forward(self, x):
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Affine layers with ReLU between them (none after the last)."""

    def __init__(self, dims, rng, dtype=np.float64):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ag.relu(x)
        return x


class Dropout(Module):
    def __init__(self, rate, rng):
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        return ag.dropout(x, self.rate, self.training, self.rng)
