"""Seeded synthetic referring-expression data: coloured shapes on black.

Each example is derived only from ``(seed, split, index)`` so streams are
reproducible and can be generated in any order. Expressions come from a
small grammar::

    the [COLOR] (SHAPE | object) [RELATION the [COLOR] (SHAPE | object)]

and are accepted only when exactly one object in the scene satisfies them.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import GenerationError, ParseError

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
RELATIONS = ("left-of", "right-of", "above", "below")
VOCAB = ("<pad>", "the", "object") + COLORS + SHAPES + RELATIONS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = 0

RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


@dataclass
class DataConfig:
    side: int = 64
    max_len: int = 8
    min_objects: int = 2
    max_objects: int = 4
    min_size: float = 0.14
    max_size: float = 0.28
    min_center_dist: float = 0.2
    relation_margin: float = 0.1
    relation_fraction: float = 0.5
    max_retries: int = 200


@dataclass
class SceneObject:
    shape: str
    color: str
    cx: float
    cy: float
    size: float

    def analytic_box(self):
        """(x0, y0, x1, y1) of the continuous shape; every shape spans ``size``."""
        h = self.size / 2
        return (self.cx - h, self.cy - h, self.cx + h, self.cy + h)


@dataclass
class Example:
    raster: np.ndarray
    tokens: np.ndarray
    mask: np.ndarray
    box: np.ndarray
    objects: list = field(default_factory=list, compare=False, repr=False)
    target: int = field(default=-1, compare=False)

    def __eq__(self, other):
        if not isinstance(other, Example):
            return NotImplemented
        return (
            np.array_equal(self.raster, other.raster)
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.box, other.box)
        )

    def text(self):
        return " ".join(VOCAB[t] for t, m in zip(self.tokens, self.mask) if m)


# -- semantics ------------------------------------------------------------------


def matches(obj, desc):
    color, shape = desc
    return (color is None or obj.color == color) and (shape is None or obj.shape == shape)


def related(a, b, relation, margin):
    if relation == "left-of":
        return a.cx < b.cx - margin
    if relation == "right-of":
        return a.cx > b.cx + margin
    if relation == "above":
        return a.cy < b.cy - margin
    if relation == "below":
        return a.cy > b.cy + margin
    raise ValueError(relation)


def satisfying(objects, expr, margin):
    """Indices of objects satisfying ``expr`` = (target_desc, relation, anchor_desc)."""
    desc, relation, anchor = expr
    out = []
    for i, o in enumerate(objects):
        if not matches(o, desc):
            continue
        if relation is None:
            out.append(i)
        elif any(
            j != i and matches(a, anchor) and related(o, a, relation, margin)
            for j, a in enumerate(objects)
        ):
            out.append(i)
    return out


def expression_tokens(expr):
    desc, relation, anchor = expr

    def phrase(d):
        color, shape = d
        words = ["the"]
        if color:
            words.append(color)
        words.append(shape or "object")
        return words

    words = phrase(desc)
    if relation is not None:
        words += [relation] + phrase(anchor)
    return [TOKEN_ID[w] for w in words]


def _descriptors(obj):
    return [(obj.color, obj.shape), (None, obj.shape), (obj.color, None)]


# -- scenes and rendering -----------------------------------------------------------


def _place_objects(rng, cfg):
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    for _ in range(n):
        for _attempt in range(100):
            size = float(rng.uniform(cfg.min_size, cfg.max_size))
            lo, hi = 0.05 + size / 2, 0.95 - size / 2
            cx, cy = float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))
            cand = SceneObject(
                SHAPES[int(rng.integers(len(SHAPES)))],
                COLORS[int(rng.integers(len(COLORS)))],
                cx,
                cy,
                size,
            )
            if all(_separated(cand, o, cfg, 1.0 / cfg.side) for o in objects):
                objects.append(cand)
                break
        else:
            return None
    return objects


def _separated(a, b, cfg, gap):
    if np.hypot(a.cx - b.cx, a.cy - b.cy) < cfg.min_center_dist:
        return False
    ax0, ay0, ax1, ay1 = a.analytic_box()
    bx0, by0, bx1, by1 = b.analytic_box()
    return ax1 + gap < bx0 or bx1 + gap < ax0 or ay1 + gap < by0 or by1 + gap < ay0


def shape_mask(obj, side):
    """Boolean side x side mask of pixels whose centres lie inside ``obj``."""
    centers = (np.arange(side) + 0.5) / side
    px = centers[None, :]
    py = centers[:, None]
    h = obj.size / 2
    if obj.shape == "circle":
        return (px - obj.cx) ** 2 + (py - obj.cy) ** 2 <= h * h
    if obj.shape == "square":
        return (np.abs(px - obj.cx) <= h) & (np.abs(py - obj.cy) <= h)
    # upright isosceles triangle: apex at the top edge, base on the bottom edge
    top = obj.cy - h
    depth = py - top
    # the apex is drawn at least one pixel wide so the tip row is never empty
    half = np.maximum(depth / 2, 0.5 / side)
    return (depth >= 0) & (depth <= obj.size) & (np.abs(px - obj.cx) <= half)


def render(objects, side):
    raster = np.zeros((side, side, 3), dtype=np.float32)
    masks = []
    for o in objects:
        m = shape_mask(o, side)
        raster[m] = RGB[o.color]
        masks.append(m)
    return raster, masks


def pixel_box(mask):
    """Normalised (cx, cy, w, h) of the tight pixel-aligned bound of ``mask``."""
    side = mask.shape[0]
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min() / side, (xs.max() + 1) / side
    y0, y1 = ys.min() / side, (ys.max() + 1) / side
    return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0])


# -- generation ----------------------------------------------------------------------


def _choose_expression(rng, objects, cfg):
    margin = cfg.relation_margin
    simple, relational, hard = [], [], []
    for t, obj in enumerate(objects):
        for desc in _descriptors(obj):
            if satisfying(objects, (desc, None, None), margin) == [t]:
                simple.append((t, (desc, None, None)))
            ambiguous = len(satisfying(objects, (desc, None, None), margin)) > 1
            for a, anchor_obj in enumerate(objects):
                if a == t:
                    continue
                for adesc in _descriptors(anchor_obj):
                    if satisfying(objects, (adesc, None, None), margin) != [a]:
                        continue
                    for rel in RELATIONS:
                        if not related(obj, anchor_obj, rel, margin):
                            continue
                        expr = (desc, rel, adesc)
                        if satisfying(objects, expr, margin) == [t]:
                            relational.append((t, expr))
                            if ambiguous:
                                hard.append((t, expr))
    want_rel = rng.random() < cfg.relation_fraction
    pools = [hard or relational, simple] if want_rel else [simple, hard or relational]
    for pool in pools:
        if pool:
            return pool[int(rng.integers(len(pool)))]
    return None


def make_example(seed, split, index, cfg=None):
    cfg = cfg or DataConfig()
    rng = np.random.default_rng([int(seed), SPLIT_IDS[split], int(index)])
    for _ in range(cfg.max_retries):
        objects = _place_objects(rng, cfg)
        if objects is None:
            continue
        chosen = _choose_expression(rng, objects, cfg)
        if chosen is None:
            continue
        target, expr = chosen
        ids = expression_tokens(expr)
        if len(ids) > cfg.max_len:
            continue
        raster, masks = render(objects, cfg.side)
        tokens = np.full(cfg.max_len, PAD_ID, dtype=np.int64)
        tokens[: len(ids)] = ids
        mask = np.zeros(cfg.max_len, dtype=bool)
        mask[: len(ids)] = True
        return Example(raster, tokens, mask, pixel_box(masks[target]), objects, target)
    raise GenerationError(
        f"no valid scene for seed={seed} split={split} index={index} after {cfg.max_retries} tries"
    )


def generate(seed, count, config=None, split="train", start=0) -> Iterator[Example]:
    if count < 1:
        raise ValueError("count must be >= 1")
    for i in range(start, start + count):
        yield make_example(seed, split, i, config)


@dataclass
class ArrayDataset:
    """Stacked examples ready for batching."""

    rasters: np.ndarray
    tokens: np.ndarray
    mask: np.ndarray
    boxes: np.ndarray

    def __len__(self):
        return len(self.boxes)

    def batch(self, idx):
        return self.rasters[idx], self.tokens[idx], self.mask[idx], self.boxes[idx]


def stack(examples: Iterable[Example]) -> ArrayDataset:
    ex = list(examples)
    return ArrayDataset(
        np.stack([e.raster for e in ex]),
        np.stack([e.tokens for e in ex]),
        np.stack([e.mask for e in ex]),
        np.stack([e.box for e in ex]),
    )


def hflip(rasters, tokens, boxes, which):
    """Mirror the rows selected by boolean ``which`` left-right.

    left-of and right-of swap so every expression keeps its single referent,
    and the box centre maps to 1 - cx. Returns new arrays.
    """
    which = np.asarray(which, dtype=bool)
    rasters, tokens, boxes = rasters.copy(), tokens.copy(), boxes.copy()
    rasters[which] = rasters[which][:, :, ::-1]
    t = tokens[which]
    left, right = t == TOKEN_ID["left-of"], t == TOKEN_ID["right-of"]
    t[left], t[right] = TOKEN_ID["right-of"], TOKEN_ID["left-of"]
    tokens[which] = t
    boxes[which, 0] = 1.0 - boxes[which, 0]
    return rasters, tokens, boxes


def build_split(seed, count, config, split):
    return stack(generate(seed, count, config, split))


# -- JSONL ----------------------------------------------------------------------------


def export_jsonl(stream, path, sidecar=None):
    """Write one JSON object per example.

    With ``sidecar`` set, rasters go to that file as little-endian float32 and
    each line stores ``{"file", "offset", "length"}`` (bytes) instead.
    """
    side_f = open(sidecar, "wb") if sidecar else None
    try:
        with open(path, "w") as f:
            for ex in stream:
                rec = {
                    "tokens": [int(t) for t in ex.tokens],
                    "mask": [int(m) for m in ex.mask],
                    "box": [float(v) for v in ex.box],
                }
                if side_f is not None:
                    payload = np.asarray(ex.raster, dtype="<f4").tobytes()
                    rec["raster"] = {
                        "file": os.path.basename(sidecar),
                        "offset": side_f.tell(),
                        "length": len(payload),
                        "shape": list(ex.raster.shape),
                    }
                    side_f.write(payload)
                else:
                    rec["raster"] = [float(v) for v in np.asarray(ex.raster).ravel()]
                    rec["side"] = int(ex.raster.shape[0])
                f.write(json.dumps(rec) + "\n")
    finally:
        if side_f is not None:
            side_f.close()


def import_jsonl(path) -> Iterator[Example]:
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                yield _example_from_record(rec, base)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, OSError, struct.error) as exc:
                raise ParseError(str(exc), line=lineno) from exc


def _example_from_record(rec, base):
    box = np.asarray(rec["box"], dtype=np.float64)
    if box.shape != (4,) or np.any(box < 0) or np.any(box > 1):
        raise ValueError(f"box {rec['box']} must be four values in [0, 1]")
    mask = np.asarray(rec["mask"], dtype=np.int64)
    if np.any((mask != 0) & (mask != 1)):
        raise ValueError("mask entries must be 0 or 1")
    tokens = np.asarray(rec["tokens"], dtype=np.int64)
    if tokens.shape != mask.shape:
        raise ValueError("tokens and mask lengths differ")
    raster = rec["raster"]
    if isinstance(raster, dict):
        with open(os.path.join(base, raster["file"]), "rb") as sf:
            sf.seek(raster["offset"])
            buf = sf.read(raster["length"])
        arr = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(raster["shape"])
    else:
        side = int(rec["side"])
        arr = np.asarray(raster, dtype=np.float32).reshape(side, side, 3)
    return Example(arr, tokens, mask.astype(bool), box)
