"""Print a few synthetic scenes as ASCII art next to their expressions and boxes.
Pixels of the referred object are drawn as @, other objects as #.

Run: python demos/scenes.py [count]
"""
import sys

import numpy as np

from dmdt.data import generate

def ascii_raster(raster, box, step=2):
    side = raster.shape[0]
    cx, cy, w, h = box
    x0, y0, x1, y1 = (np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]) * side).astype(int)
    rows = []
    for y in range(0, side, step):
        row = ""
        for x in range(0, side, step):
            if raster[y, x].max() == 0:
                row += "."
            else:
                row += "@" if x0 <= x < x1 and y0 <= y < y1 else "#"
        rows.append(row)
    return "\n".join(rows)


count = int(sys.argv[1]) if len(sys.argv) > 1 else 3
for ex in generate(seed=0, count=count):
    print(f"expression: {ex.text()}")
    print(f"box (cx, cy, w, h): {np.round(ex.box, 3).tolist()}")
    print(ascii_raster(ex.raster, ex.box))
    print()
