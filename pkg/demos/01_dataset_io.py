"""
Reading and writing indexed-palette datasets
============================================

Frames live under ``JPEGImages/<video>/`` and label maps under
``Annotations/<video>/`` as palette PNGs whose raw indices are object ids.
"""

import tempfile
from pathlib import Path

import numpy as np

from mose_pipeline.data_io import load_mask, load_video, mask_to_binary_stack, scan_dataset, write_video
from mose_pipeline.synthetic import toy_video

root = Path(tempfile.mkdtemp())

# two small synthetic sequences, written in the standard layout
for seed in (0, 1):
    write_video(root, toy_video(seed, n_frames=4, size=(48, 48), n_objects=1 + seed))

# scanning reports frame and object counts per video
for seq in scan_dataset(root).sequences:
    print(seq.video, "frames:", seq.n_frames, "objects:", list(seq.object_ids))

# masks come back as integer label maps, never as RGB colors
mask = load_mask(root / "Annotations" / "toy1" / "00000.png")
print("labels in first mask:", np.unique(mask))

# one binary plane per object id
video = load_video(root, "toy1")
stack = mask_to_binary_stack(video.masks[0], video.object_ids)
print("binary stack:", stack.shape, "pixels per object:", stack.sum((1, 2)))
