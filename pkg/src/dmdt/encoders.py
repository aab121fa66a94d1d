"""Visual/text stand-in encoders, the shared-width projection and the multimodal encoder."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, VocabError
from .nn import Linear, Module, param
from .transformer import EncoderLayer


def patchify(raster, patch):
    """(B, S, S, 3) -> (B, G*G, patch*patch*3), patches in row-major order y*G + x."""
    raster = np.asarray(raster)
    if raster.ndim == 3:
        raster = raster[None]
    b, s, s2, ch = raster.shape
    if s != s2 or s % patch:
        raise ConfigError(f"raster side {s} is not divisible by patch size {patch}")
    g = s // patch
    x = raster.reshape(b, g, patch, g, patch, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch * patch * ch)


def patchify_nested(raster, patch):
    """(B, S, S, 3) -> (B, G*G, 4, (patch/2)**2 * 3): each patch split into its 2x2 sub-patches."""
    raster = np.asarray(raster)
    if raster.ndim == 3:
        raster = raster[None]
    if patch % 2:
        raise ConfigError(f"two-level patch embedding needs an even patch size, got {patch}")
    b, s, _, ch = raster.shape
    if s % patch:
        raise ConfigError(f"raster side {s} is not divisible by patch size {patch}")
    g, h = s // patch, patch // 2
    x = raster.reshape(b, g, 2, h, g, 2, h, ch).transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, g * g, 4, h * h * ch)


def flatten_grid(grid):
    """(..., G, G, C) -> (..., G*G, C) with row index y*G + x."""
    *lead, g, g2, c = grid.shape
    return grid.reshape(*lead, g * g2, c)


def unflatten_grid(rows, g):
    *lead, n, c = rows.shape
    if n != g * g:
        raise DimensionError(f"{n} rows cannot form a {g}x{g} grid")
    return rows.reshape(*lead, g, g, c)


def sincos_2d(g, dim, temperature=10000.0):
    """Fixed 2D sin-cos table (G*G, dim): half the channels encode x, half encode y."""
    if dim % 4:
        raise ConfigError(f"sin-cos embedding needs dim divisible by 4, got {dim}")
    q = dim // 4
    omega = 1.0 / temperature ** (np.arange(q) / q)
    ys, xs = np.meshgrid(np.arange(g, dtype=np.float64), np.arange(g, dtype=np.float64), indexing="ij")
    ax = xs.reshape(-1, 1) * omega
    ay = ys.reshape(-1, 1) * omega
    return np.concatenate([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)], axis=1)


class VisualEncoder(Module):
    """Patch embedding, optional context layer, projection to the shared width.

    ``stem="linear"`` embeds each patch with one linear map. ``stem="two_level"``
    embeds the four half-size sub-patches, applies ReLU and merges them with a
    second linear map, which gives each patch a nonlinear shape descriptor.
    """

    def __init__(self, side, patch, width, dim, heads, ffn_dim, rng, context=False,
                 dropout=0.0, drop_rng=None, dtype=np.float64, channels=3, pos_embed="normal",
                 stem="linear"):
        if side % patch:
            raise ConfigError(f"raster side {side} is not divisible by patch size {patch}")
        self.side = side
        self.patch = patch
        self.grid_size = side // patch
        self.dtype = dtype
        self.stem = stem
        if stem == "linear":
            self.patch_embed = Linear(patch * patch * channels, width, rng, dtype)
        elif stem == "two_level":
            if patch % 2:
                raise ConfigError(f"two-level patch embedding needs an even patch size, got {patch}")
            self.sub_embed = Linear((patch // 2) ** 2 * channels, width, rng, dtype)
            self.patch_embed = Linear(4 * width, width, rng, dtype)
        else:
            raise ConfigError(f"unknown visual stem {stem!r}")
        # ViT-style absolute embedding added to patch values, so features carry location
        self.patch_pos = None
        if pos_embed == "sincos":
            self.patch_pos = param(sincos_2d(self.grid_size, width), dtype)
        elif pos_embed == "normal":
            self.patch_pos = param(rng.normal(0.0, 0.02, (self.grid_size**2, width)), dtype)
        elif pos_embed != "none":
            raise ConfigError(f"unknown visual position embedding {pos_embed!r}")
        self.context = None
        if context:
            self.context = EncoderLayer(width, heads, 4 * width, rng, dropout, drop_rng, dtype)
            self.context_pos = param(rng.normal(0.0, 0.02, (self.grid_size**2, width)), dtype)
        self.proj = Linear(width, dim, rng, dtype)

    def embed(self, raster):
        if self.stem == "linear":
            return self.patch_embed(Tensor(patchify(raster, self.patch).astype(self.dtype)))
        sub = ag.relu(self.sub_embed(Tensor(patchify_nested(raster, self.patch).astype(self.dtype))))
        return self.patch_embed(sub.reshape(*sub.shape[:-2], -1))

    def forward(self, raster):
        z = self.embed(raster)
        if self.patch_pos is not None:
            z = z + self.patch_pos
        if self.context is not None:
            z = self.context(z, self.context_pos)
        return self.proj(z)


class TextEncoder(Module):
    """Token embedding lookup, optional masked context layer, projection."""

    def __init__(self, vocab_size, max_len, width, dim, heads, rng, context=False,
                 dropout=0.0, drop_rng=None, dtype=np.float64):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.table = param(rng.normal(0.0, 1.0, (vocab_size, width)), dtype)
        self.context = None
        if context:
            self.context = EncoderLayer(width, heads, 4 * width, rng, dropout, drop_rng, dtype)
            self.context_pos = param(rng.normal(0.0, 0.02, (max_len, width)), dtype)
        self.proj = Linear(width, dim, rng, dtype)

    def embed(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1] != self.max_len:
            raise DimensionError(f"expected {self.max_len} tokens, got {ids.shape[-1]}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise VocabError(f"token id outside [0, {self.vocab_size})")
        return ag.embedding(self.table, ids)

    def forward(self, ids, mask):
        z = self.embed(ids)
        if self.context is not None:
            z = self.context(z, self.context_pos, mask)
        return self.proj(z)


def concat_sequence(f_v, f_l, lang_mask):
    """Visual rows first, language rows second, plus the combined key mask."""
    if f_v.shape[-1] != f_l.shape[-1]:
        raise DimensionError(f"widths differ: visual {f_v.shape}, language {f_l.shape}")
    lang_mask = np.asarray(lang_mask, dtype=bool)
    vis_mask = np.ones(lang_mask.shape[:-1] + (f_v.shape[-2],), dtype=bool)
    return ag.concat([f_v, f_l], axis=-2), np.concatenate([vis_mask, lang_mask], axis=-1)


class MultimodalEncoder(Module):
    """Stack of post-norm encoder layers sharing one learnable positional embedding."""

    def __init__(self, n_visual, n_lang, dim, heads, ffn_dim, layers, rng,
                 dropout=0.0, drop_rng=None, dtype=np.float64):
        self.n_visual = n_visual
        self.n_lang = n_lang
        self.grid_size = int(round(np.sqrt(n_visual)))
        self.pos = param(rng.normal(0.0, 0.02, (n_visual + n_lang, dim)), dtype)
        self.layers = [
            EncoderLayer(dim, heads, ffn_dim, rng, dropout, drop_rng, dtype) for _ in range(layers)
        ]

    def forward(self, f, key_mask):
        if f.shape[-2] != self.pos.shape[0]:
            raise DimensionError(f"sequence length {f.shape[-2]} != {self.pos.shape[0]}")
        for layer in self.layers:
            f = layer(f, self.pos, key_mask)
        return f

    def split(self, f_e):
        """Return (F_v, P_v, F_l, P_l, P_v as a G x G x C grid)."""
        f_v, f_l = ag.split(f_e, [self.n_visual, self.n_lang], axis=-2)
        p_v, p_l = ag.split(self.pos, [self.n_visual, self.n_lang], axis=0)
        return f_v, p_v, f_l, p_l, unflatten_grid(p_v, self.grid_size)
