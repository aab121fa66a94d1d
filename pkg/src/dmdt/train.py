"""Training loop, evaluation and sampling traces."""
from __future__ import annotations

import csv
import json
import logging
import os
import time

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import build_split, hflip
from .head import acc_at_50, iou, total_loss
from .model import GroundingModel
from .nn import seeded_rng
from .optim import AdamW, ParamGroup, clip_grad_norm, step_lr_factor

log = logging.getLogger(__name__)


def load_splits(cfg: RunConfig, names=("train", "val", "test")):
    counts = {"train": cfg.data.train_count, "val": cfg.data.val_count, "test": cfg.data.test_count}
    return {n: build_split(cfg.train.seed, counts[n], cfg.data.generator, n) for n in names}


def build_optimizer(model, tcfg):
    enc = model.encoder_parameters()
    enc_ids = {id(p) for p in enc}
    rest = [p for p in model.parameters() if id(p) not in enc_ids]
    return AdamW([
        ParamGroup(rest, tcfg.lr, tcfg.weight_decay),
        ParamGroup(enc, tcfg.lr_encoders, tcfg.weight_decay),
    ])


def evaluate(model, ds, batch_size=64):
    boxes, trace = model.predict(ds.rasters, ds.tokens, ds.mask, batch_size)
    ious = iou(boxes, ds.boxes)
    return {
        "acc50": acc_at_50(boxes, ds.boxes),
        "count": int(len(ds)),
        "mean_iou": float(np.mean(ious)),
    }, boxes, trace


def train(cfg: RunConfig, out_dir=None, splits=None, max_steps=None):
    """Train per ``cfg``; writes metrics.jsonl, last.ckpt and best.ckpt to ``out_dir``.

    Returns (model, history). ``max_steps`` stops early (tests and smoke runs).
    """
    tcfg = cfg.train
    splits = splits or load_splits(cfg, ("train", "val"))
    train_ds, val_ds = splits["train"], splits["val"]
    model = GroundingModel(cfg.model, seed=tcfg.seed)
    model.train()
    opt = build_optimizer(model, tcfg)
    base_lrs = [g.lr for g in opt.groups]
    params = model.parameters()
    shuffle_rng = seeded_rng([tcfg.seed, 2])
    flip_rng = seeded_rng([tcfg.seed, 3])

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_f = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        with open(os.path.join(out_dir, "config.json"), "w") as f:
            f.write(cfg.to_json(indent=2))
    else:
        metrics_f = None

    history = []
    best = -1.0
    steps = 0
    try:
        for epoch in range(tcfg.epochs):
            t0 = time.time()
            factor = step_lr_factor(epoch, tcfg.lr_drop_epoch, tcfg.lr_drop_factor)
            opt.set_lr_scale(base_lrs, factor)
            order = shuffle_rng.permutation(len(train_ds))
            tot = l1s = gls = 0.0
            seen = 0
            for s in range(0, len(order), tcfg.batch_size):
                idx = order[s:s + tcfg.batch_size]
                rasters, tokens, mask, boxes = train_ds.batch(idx)
                if tcfg.hflip:
                    rasters, tokens, boxes = hflip(rasters, tokens, boxes, flip_rng.random(len(idx)) < 0.5)
                out = model(rasters, tokens, mask)
                loss, l1, gl = total_loss(out.boxes, boxes, cfg.model.l1_reduction)
                opt.zero_grad()
                loss.backward()
                clip_grad_norm(params, tcfg.max_grad_norm)
                opt.step()
                n = len(idx)
                tot += loss.item() * n
                l1s += l1 * n
                gls += gl * n
                seen += n
                steps += 1
                if max_steps is not None and steps >= max_steps:
                    break
            val, _, _ = evaluate(model, val_ds)
            rec = {
                "epoch": epoch + 1,
                "train_loss": tot / seen,
                "l1": l1s / seen,
                "giou_loss": gls / seen,
                "val_acc50": val["acc50"],
                "val_mean_iou": val["mean_iou"],
                "lr": opt.groups[0].lr,
                "lr_encoders": opt.groups[1].lr,
            }
            history.append(rec)
            log.info("epoch %d %s (%.1fs)", epoch + 1, json.dumps(rec), time.time() - t0)
            if metrics_f:
                metrics_f.write(json.dumps(rec) + "\n")
                metrics_f.flush()
                checkpoint.save(os.path.join(out_dir, "last.ckpt"), model, cfg, {"epoch": epoch + 1})
                if val["acc50"] > best:
                    best = val["acc50"]
                    checkpoint.save(os.path.join(out_dir, "best.ckpt"), model, cfg,
                                    {"epoch": epoch + 1, "val_acc50": best})
            if max_steps is not None and steps >= max_steps:
                break
    finally:
        if metrics_f:
            metrics_f.close()
    model.eval()
    return model, history


TRACE_HEADER = ["layer", "kind", "idx", "x", "y", "x_clamped", "y_clamped"]


def trace_rows(trace, b=0):
    rows = []
    for layer, kind, idx, x, y in trace.records(b):
        rows.append([layer, kind, idx, x, y, min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0)])
    return rows


def write_trace_csv(path, trace, b=0):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_HEADER)
        w.writerows(trace_rows(trace, b))
