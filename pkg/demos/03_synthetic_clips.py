"""
Pretraining clips from static images
====================================

Instance masks of allowed classes are merged into one label map, then a
chain of small random affine warps turns the still image into a short clip.
"""

import numpy as np

from mose_pipeline.augment import AffineJitter, InstanceRecord, filter_and_binarize, merge_masks, synth_video
from mose_pipeline.synthetic import toy_scene

rng = np.random.default_rng(1)
image, scene = toy_scene(rng, size=(64, 64), n_objects=2)

# pretend a segmenter produced three instances, one of an unwanted class
records = [
    InstanceRecord("img", "person", scene == 1),
    InstanceRecord("img", "dog", scene == 2),
    InstanceRecord("img", "kite", np.eye(64, dtype=bool)),
]
kept = filter_and_binarize(records, {"person", "dog"})
print("kept classes:", [r.class_name for r in kept])

mask = merge_masks(kept)
print("merged labels:", np.unique(mask))

# each frame is warped a little further from the previous one
clip = synth_video(image, mask, 5, AffineJitter(), rng)
for t, m in enumerate(clip.masks):
    print(f"frame {t}: object pixels", [(int(k), int((m == k).sum())) for k in (1, 2)])
