"""Analytic FLOPs model for encoder-only and encoder-decoder grounding heads.

Only the matrix products are counted by default: projections, attention
score/context products, FFNs, the sampling MLP and linear, the bilinear
gathers and the reference FFN. ``flops_per_mac`` picks the convention: 1
counts a multiply-add once (the fvcore convention common in detection
work), 2 counts the multiply and the add separately.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

DECODER_KINDS = ("dynamic", "static", "sampling-only")


@dataclass(frozen=True)
class ArchConfig:
    dim: int = 256
    heads: int = 8
    ffn_dim: int = 2048
    n_visual: int = 400
    n_lang: int = 40
    reg_token: bool = False
    enc_layers: int = 3
    dec_layers: int = 3
    points: int = 36
    decoder: str = "dynamic"
    flops_per_mac: int = 1
    lower_order: bool = False

    def __post_init__(self):
        for name in ("dim", "heads", "ffn_dim", "n_visual", "n_lang", "enc_layers", "dec_layers", "points"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.decoder not in DECODER_KINDS:
            raise ValueError(f"decoder must be one of {DECODER_KINDS}")
        if self.flops_per_mac not in (1, 2):
            raise ValueError("flops_per_mac must be 1 or 2")
        if self.n_visual and self.points > 4 * self.n_visual:
            raise ValueError(f"{self.points} points is more than 4x the {self.n_visual} visual tokens")

    @property
    def encoder_tokens(self):
        return self.n_visual + self.n_lang + int(self.reg_token)


@dataclass
class FlopsReport:
    """FLOP counts by component, plus per-layer totals. ``total`` is the sum of ``parts``."""

    config: ArchConfig
    parts: dict = field(default_factory=dict)
    encoder_layer: int = 0
    decoder_layer: int = 0

    @property
    def total(self):
        return sum(self.parts.values())

    @property
    def gflops(self):
        return self.total / 1e9

    def to_dict(self):
        return {
            "config": asdict(self.config),
            "parts": dict(self.parts),
            "encoder_layer": self.encoder_layer,
            "decoder_layer": self.decoder_layer,
            "total": self.total,
            "gflops": self.gflops,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def table(self):
        rows = [(k, v) for k, v in self.parts.items()] + [("total", self.total)]
        width = max(len(k) for k, _ in rows)
        lines = [f"{'component':<{width}}  {'FLOPs':>15}  {'GFLOPS':>8}"]
        for k, v in rows:
            if k == "total":
                lines.append("-" * (width + 27))
            lines.append(f"{k:<{width}}  {v:>15,d}  {v / 1e9:>8.3f}")
        return "\n".join(lines)


def _merge(into, parts, times=1):
    for k, v in parts.items():
        into[k] = into.get(k, 0) + v * times
    return into


def encoder_layer_parts(n, cfg: ArchConfig, prefix="enc"):
    c, f, k = cfg.dim, cfg.ffn_dim, cfg.flops_per_mac
    parts = {
        f"{prefix}.attn_proj": k * 4 * n * c * c,
        f"{prefix}.attn_matmul": k * 2 * n * n * c,
        f"{prefix}.ffn": k * 2 * n * c * f,
    }
    if cfg.lower_order:
        # softmax (exp, sum, divide per score), two layer norms, two residual adds
        parts[f"{prefix}.lower_order"] = 3 * cfg.heads * n * n + 2 * 5 * n * c + 2 * n * c
    return parts


def encoder_layer_flops(n, cfg: ArchConfig):
    """4nC^2 + 2n^2C + 2nC*C_ffn multiply-adds for one post-norm encoder layer."""
    if n < 1:
        raise ValueError("an encoder layer needs at least one token")
    return sum(encoder_layer_parts(n, cfg).values())


def _cross_parts(n_q, n_kv, cfg):
    c, f, k = cfg.dim, cfg.ffn_dim, cfg.flops_per_mac
    parts = {
        "dec.cross_proj": k * (2 * n_q * c * c + 2 * n_kv * c * c),
        "dec.cross_matmul": k * 2 * n_q * n_kv * c,
        "dec.ffn": k * 2 * n_q * c * f,
    }
    if cfg.lower_order:
        parts["dec.lower_order"] = 3 * cfg.heads * n_q * n_kv + 2 * 5 * n_q * c + 2 * n_q * c
    return parts


def _sampling_parts(cfg):
    c, p, k = cfg.dim, cfg.points, cfg.flops_per_mac
    return {
        "dec.query_gen": k * (2 * c * c + c * c),
        "dec.offsets": k * c * 2 * p,
        # four weighted taps per channel, on the feature map and the positional map
        "dec.interp": k * 2 * 4 * p * c,
        "dec.ref_ffn": k * (c * c + 2 * c),
    }


def decoder_layer_parts(cfg: ArchConfig):
    if cfg.decoder == "static":
        # no sampling: the decoder reads every visual token
        parts = {}
        _merge(parts, encoder_layer_parts(cfg.n_visual, cfg, "dec.inner"))
        return _merge(parts, _cross_parts(cfg.n_lang, cfg.n_visual, cfg))
    parts = _sampling_parts(cfg)
    if cfg.decoder == "sampling-only":
        # text-guided decoding replaced by average pooling of the samples
        parts["dec.pool"] = cfg.flops_per_mac * cfg.points * cfg.dim
        return parts
    _merge(parts, encoder_layer_parts(cfg.points, cfg, "dec.inner"))
    return _merge(parts, _cross_parts(cfg.n_lang, cfg.points, cfg))


def decoder_layer_flops(cfg: ArchConfig):
    """One decoder layer. For dynamic and sampling-only decoders no term involves n_visual."""
    return sum(decoder_layer_parts(cfg).values())


def model_flops(cfg: ArchConfig):
    """enc_layers * encoder layer + dec_layers * decoder layer, broken down by component."""
    parts = {}
    enc = dec = 0
    if cfg.enc_layers:
        enc_parts = encoder_layer_parts(cfg.encoder_tokens, cfg)
        enc = sum(enc_parts.values())
        _merge(parts, enc_parts, cfg.enc_layers)
    if cfg.dec_layers:
        dec_parts = decoder_layer_parts(cfg)
        dec = sum(dec_parts.values())
        _merge(parts, dec_parts, cfg.dec_layers)
    return FlopsReport(cfg, parts, enc, dec)


PRESETS = {
    # six encoder layers over all visual and text tokens plus the [REG] token
    "paper-transvg": ArchConfig(reg_token=True, enc_layers=6, dec_layers=0, points=400),
    "paper-static-decoder": ArchConfig(enc_layers=3, dec_layers=3, points=400, decoder="static"),
    "paper-sampling-only": ArchConfig(enc_layers=3, dec_layers=3, points=36, decoder="sampling-only"),
    "paper-dynamic": ArchConfig(enc_layers=3, dec_layers=3, points=36),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def layer_split_sweep(total_layers=6, points=36, base=None):
    """(enc, dec, points) configs with enc + dec fixed, from 1 encoder layer up to all-encoder."""
    base = base or PRESETS["paper-dynamic"]
    out = []
    for enc in range(1, total_layers + 1):
        out.append(replace(base, enc_layers=enc, dec_layers=total_layers - enc, points=points))
    return out


def points_sweep(points=(9, 16, 25, 36, 64, 100, 144), base=None):
    base = base or PRESETS["paper-dynamic"]
    return [replace(base, points=p) for p in points]


def sweep_table(configs):
    lines = [f"{'(#enc,#dec,#points)':<20}  {'GFLOPS':>8}"]
    for cfg in configs:
        tag = f"({cfg.enc_layers},{cfg.dec_layers},{cfg.points})"
        lines.append(f"{tag:<20}  {model_flops(cfg).gflops:>8.3f}")
    return "\n".join(lines)


def arch_from_model_config(mcfg, **overrides):
    """FLOPs config matching a trainable desk model."""
    arch = ArchConfig(
        dim=mcfg.dim, heads=mcfg.heads, ffn_dim=mcfg.ffn_dim, n_visual=mcfg.n_visual,
        n_lang=mcfg.max_len, enc_layers=mcfg.enc_layers, dec_layers=mcfg.dec_layers,
        points=mcfg.n_visual if mcfg.static_sampling else mcfg.points,
        decoder="static" if mcfg.static_sampling else "dynamic",
    )
    return replace(arch, **overrides)
