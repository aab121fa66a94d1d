"""The full grounding model: stand-in encoders, multimodal encoder, dynamic decoder, head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .config import ModelConfig
from .decoder import DecoderTrace, DynamicDecoder
from .encoders import MultimodalEncoder, TextEncoder, VisualEncoder, concat_sequence, unflatten_grid
from .head import PredictionHead, pool_reg
from .nn import Module, init_scheme, seeded_rng
from .transformer import zero_residual_branches


@dataclass
class Output:
    boxes: Tensor
    trace: DecoderTrace


class GroundingModel(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        with init_scheme(cfg.init):
            self._build(cfg, seed)

    def _build(self, cfg, seed):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = seeded_rng([seed, 0])
        # dropout draws come from their own stream so init order never shifts them
        self.drop_rng = seeded_rng([seed, 1])
        kw = dict(dropout=cfg.dropout, drop_rng=self.drop_rng, dtype=dtype)
        self.visual = VisualEncoder(cfg.side, cfg.patch, cfg.dim, cfg.dim, cfg.heads, cfg.ffn_dim,
                                    rng, context=cfg.visual_context,
                                    pos_embed=cfg.visual_pos_embed, stem=cfg.visual_stem, **kw)
        self.text = TextEncoder(cfg.vocab_size, cfg.max_len, cfg.dim, cfg.dim, cfg.heads, rng,
                                context=cfg.text_context, **kw)
        self.encoder = MultimodalEncoder(cfg.n_visual, cfg.max_len, cfg.dim, cfg.heads, cfg.ffn_dim,
                                         cfg.enc_layers, rng, **kw)
        self.decoder = DynamicDecoder(cfg.dim, cfg.heads, cfg.ffn_dim, cfg.dec_layers, cfg.points, rng,
                                      init_sampling=cfg.init_sampling,
                                      static_sampling=cfg.static_sampling,
                                      ref_update=cfg.ref_update, **kw)
        self.head = PredictionHead(cfg.dim, rng, dtype)
        if cfg.zero_residual:
            zero_residual_branches(self)

    def encoder_parameters(self):
        """Parameters of the stand-in feature encoders (the second learning-rate group)."""
        return self.visual.parameters() + self.text.parameters()

    def embed_inputs(self, rasters, ids, mask):
        return self.visual(rasters), self.text(ids, mask)

    def forward_features(self, f_v, f_l, mask):
        mask = np.asarray(mask, dtype=bool)
        seq, key_mask = concat_sequence(f_v, f_l, mask)
        f_e = self.encoder(seq, key_mask)
        f_v, _, f_l, p_l, p_v_grid = self.encoder.split(f_e)
        grid = unflatten_grid(f_v, self.cfg.grid_size)
        f_d, trace = self.decoder(grid, p_v_grid, f_l, p_l, mask)
        return Output(self.head(pool_reg(f_d, mask)), trace)

    def forward(self, rasters, ids, mask):
        f_v, f_l = self.embed_inputs(rasters, ids, mask)
        return self.forward_features(f_v, f_l, mask)

    def predict(self, rasters, ids, mask, batch_size=64):
        """Boxes and traces without building a graph, in eval mode."""
        was_training = self.training
        self.eval()
        boxes, refs, coords = [], [], []
        try:
            with no_grad():
                for s in range(0, len(ids), batch_size):
                    out = self(rasters[s:s + batch_size], ids[s:s + batch_size], mask[s:s + batch_size])
                    boxes.append(out.boxes.data)
                    refs.append(np.stack(out.trace.refs, 1))
                    coords.append(np.stack(out.trace.coords, 1))
        finally:
            self.train(was_training)
        trace = DecoderTrace(
            refs=list(np.moveaxis(np.concatenate(refs), 1, 0)),
            coords=list(np.moveaxis(np.concatenate(coords), 1, 0)),
        )
        return np.concatenate(boxes), trace
