"""
The two-blob query task
=======================

Each image holds two Gaussian blobs of different sizes. The query names one
size class, and the gaze targets star around that blob's center.
"""

import sys
from pathlib import Path

import numpy as np

from gemgaze.formats import render_overlay, encode_ppm
from gemgaze.pipeline import CLASS_TOKEN0, TrainConfig, blob_radius, make_split

cfg = TrainConfig()
samples = make_split(cfg, "train", 4)

for s in samples:
    cls = s.tokens[1] - CLASS_TOKEN0
    print(f"query class {cls} (radius {blob_radius(cls):.0f}px) -> target {np.round(s.meta['center'], 3)}, "
          f"distractor class {s.meta['other_cls']} at {np.round(s.meta['other_center'], 3)}")

# satellites scatter with sigma 0.04 around the target
s = samples[0]
print("gaze points:\n", np.round(s.gaze, 3))

# write the first sample with its gaze targets in red
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("sample0.ppm")
out.write_bytes(encode_ppm(render_overlay(s.image, np.zeros((0, 2)), s.gaze)))
print("wrote", out)
