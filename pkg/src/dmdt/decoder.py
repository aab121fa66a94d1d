"""Dynamic decoder: 2D adaptive sampling followed by text-guided decoding.

Each layer turns a sampling query into ``P`` (dx, dy) offsets around the
current reference point, bilinearly samples the visual feature grid and the
visual positional-embedding grid at those points, contextualises the samples
with one self-attention block and lets the language tokens cross-attend to
them. The pooled language tokens then predict the next reference point.

Coordinates are fractions of the image side. Offsets are unbounded; the
sampler clamps to the border cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import MLP, Linear, Module, param
from .transformer import CrossLayer, EncoderLayer

INIT_MODES = ("grid", "uniform", "learnable")


def pool_language(f_l, mask):
    return ag.masked_mean(f_l, mask)


def compute_sample_coords(ref, offsets):
    """``ref`` (B, 2) plus ``offsets`` (B, P, 2) or (P, 2); raw, unclamped."""
    return ag.add(ag.reshape(ref, (ref.shape[0], 1, 2)), offsets)


def grid_lattice(points):
    """Centred k x k lattice (k = ceil(sqrt(P))) in row-major order, first P points."""
    k = math.ceil(math.sqrt(points))
    ticks = (np.arange(k) + 0.5) / k
    xs, ys = np.meshgrid(ticks, ticks)
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)[:points]


def uniform_fixed_coords(points, rng):
    return 0.5 + rng.uniform(-0.5, 0.5, (points, 2))


def sample_features(grid, coords):
    return ag.bilinear_sample(grid, coords)


def sample_positional(pos_grid, coords):
    return ag.bilinear_sample(pos_grid, coords)


class OffsetGenerator(Linear):
    """Linear map C -> 2P with zero weight and U(-0.5, 0.5) bias at init."""

    def __init__(self, dim, points, rng, dtype=np.float64):
        self.points = points
        self.weight = param(np.zeros((dim, 2 * points)), dtype)
        self.bias = param(rng.uniform(-0.5, 0.5, 2 * points), dtype)

    def forward(self, f_s):
        out = super().forward(f_s)
        return out.reshape(*out.shape[:-1], self.points, 2)

    def freeze(self):
        self.weight.requires_grad = False
        self.bias.requires_grad = False


class DecoderLayer(Module):
    def __init__(self, dim, heads, ffn_dim, points, rng, *, first=False, sampling="dynamic",
                 ref_update=True, dropout=0.0, drop_rng=None, dtype=np.float64):
        self.first = first
        self.points = points
        self.query_gen = None
        self.offsets = None
        self.fixed_coords = None
        if sampling == "dynamic":
            if not first:
                self.query_gen = MLP([2 * dim, dim, dim], rng, dtype)
            self.offsets = OffsetGenerator(dim, points, rng, dtype)
        elif sampling == "frozen":
            self.offsets = OffsetGenerator(dim, points, rng, dtype)
            self.offsets.freeze()
        elif sampling == "grid":
            self.fixed_coords = Tensor(grid_lattice(points).astype(dtype))
        elif sampling == "uniform-fixed":
            self.fixed_coords = Tensor(uniform_fixed_coords(points, rng).astype(dtype))
        else:
            raise ValueError(f"unknown sampling mode {sampling!r}")
        self.sample_encoder = EncoderLayer(dim, heads, ffn_dim, rng, dropout, drop_rng, dtype)
        self.cross = CrossLayer(dim, heads, ffn_dim, rng, dropout, drop_rng, dtype)
        self.ref_head = MLP([dim, dim, 2], rng, dtype) if ref_update else None

    def sampling_query(self, f_s_prev, f_l):
        if self.query_gen is None:
            return f_s_prev
        return self.query_gen(ag.concat([f_s_prev, f_l], axis=-1))

    def decode(self, f_s, p_s, f_l, p_l, mask=None):
        """Self-attention over the samples, then language queries attend to them."""
        ctx = self.sample_encoder(f_s, p_s)
        return self.cross(f_l, p_l, ctx, p_s)

    def update_reference(self, f_l_next, mask, ref=None, mode="absolute"):
        h = self.ref_head(ag.masked_mean(f_l_next, mask))
        if mode == "delta":
            logit = ag.sub(ag.log(ref), ag.log(ag.sub(1.0, ref)))
            return ag.sigmoid(ag.add(logit, h))
        return ag.sigmoid(h)


@dataclass
class DecoderTrace:
    """Per-layer reference points (B, 2) and raw sampled coordinates (B, P, 2)."""

    refs: list = field(default_factory=list)
    coords: list = field(default_factory=list)

    def records(self, b=0):
        """(layer, kind, idx, x, y) rows for example ``b``, layers numbered from 1."""
        rows = []
        for i, (ref, pts) in enumerate(zip(self.refs, self.coords), 1):
            rows.append((i, "ref", 0, float(ref[b, 0]), float(ref[b, 1])))
            for j, (x, y) in enumerate(pts[b]):
                rows.append((i, "sample", j, float(x), float(y)))
        return rows


class DynamicDecoder(Module):
    def __init__(self, dim, heads, ffn_dim, layers, points, rng, *, init_sampling="learnable",
                 static_sampling=False, ref_update="absolute", dropout=0.0, drop_rng=None,
                 dtype=np.float64):
        if init_sampling not in INIT_MODES:
            raise ValueError(f"init_sampling must be one of {INIT_MODES}")
        self.points = points
        self.ref_mode = ref_update
        self.static = bool(static_sampling)
        self.init_query = None
        if not self.static:
            self.init_query = param(rng.normal(0.0, 0.02, dim), dtype)
        self.layers = []
        for i in range(layers):
            if self.static:
                mode = "uniform-fixed"
            elif i == 0:
                mode = {"grid": "grid", "uniform": "frozen", "learnable": "dynamic"}[init_sampling]
            else:
                mode = "dynamic"
            self.layers.append(
                DecoderLayer(dim, heads, ffn_dim, points, rng, first=i == 0, sampling=mode,
                             ref_update=not self.static and i < layers - 1,
                             dropout=dropout, drop_rng=drop_rng, dtype=dtype)
            )

    def forward(self, grid, pos_grid, f_l, p_l, mask):
        b = f_l.shape[0]
        dtype = f_l.dtype
        ref = Tensor(np.full((b, 2), 0.5, dtype=dtype))
        f_s = None
        if self.init_query is not None:
            f_s = ag.broadcast_to(self.init_query, (b, self.init_query.shape[0]))
        trace = DecoderTrace()
        for layer in self.layers:
            if layer.fixed_coords is not None:
                coords = Tensor(np.broadcast_to(layer.fixed_coords.data, (b, self.points, 2)).copy())
            else:
                if layer.query_gen is not None:
                    f_s = layer.sampling_query(f_s, pool_language(f_l, mask))
                coords = compute_sample_coords(ref, layer.offsets(f_s))
            trace.refs.append(ref.data.copy())
            trace.coords.append(coords.data.copy())
            f_samp = sample_features(grid, coords)
            p_samp = sample_positional(pos_grid, coords)
            f_l = layer.decode(f_samp, p_samp, f_l, p_l, mask)
            if layer.ref_head is not None:
                ref = layer.update_reference(f_l, mask, ref, self.ref_mode)
        return f_l, trace
