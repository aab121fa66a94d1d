"""Train a small model for a few minutes, then follow where one example's
sampling points move from the first decoder layer to the last.

Run: python demos/train_and_trace.py [epochs]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from dmdt.config import RunConfig
from dmdt.head import iou
from dmdt.train import evaluate, load_splits, train, write_trace_csv

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8
cfg = RunConfig.from_dict({
    "train": {"epochs": epochs, "lr_drop_epoch": max(epochs - 2, 1)},
    "data": {"train_count": 2000, "val_count": 200, "test_count": 200},
})
out = Path(tempfile.mkdtemp(prefix="dmdt-demo-"))
splits = load_splits(cfg)
model, history = train(cfg, out, splits=splits)
for h in history:
    print(f"epoch {h['epoch']}: loss {h['train_loss']:.3f}, val acc@0.5 {h['val_acc50']:.3f}")

test = splits["test"]
metrics, boxes, _ = evaluate(model, test)
print(f"test acc@0.5 {metrics['acc50']:.3f}, mean IoU {metrics['mean_iou']:.3f}")

i = int(np.argmax(iou(boxes, test.boxes)))
_, trace = model.predict(test.rasters[i:i + 1], test.tokens[i:i + 1], test.mask[i:i + 1])
centre = test.boxes[i, :2]
for layer, pts in enumerate(trace.coords):
    d = np.linalg.norm(np.clip(pts[0], 0, 1) - centre, axis=-1).mean()
    print(f"decoder layer {layer}: mean distance of samples to the target centre {d:.3f}")
write_trace_csv(out / "trace.csv", trace, 0)
print(f"checkpoints, metrics.jsonl and trace.csv are in {out}")
