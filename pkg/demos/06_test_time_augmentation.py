"""
Flip and multi-scale test-time augmentation
===========================================

Every branch propagates on its own copy of the video, returns probability
stacks at its own size, and the stacks are averaged at full resolution.
"""

import numpy as np

from mose_pipeline.infer import InferConfig, fuse_tta, rescaled_size, run_flip_branch, soft_aggregate
from mose_pipeline.synthetic import toy_video

# soft aggregation of two half-confident objects
print("aggregate of (0.5, 0.5):", soft_aggregate(np.full((2, 1, 1), 0.5)).ravel())

# "maximum shorter side" caps never upscale
for target in (600, 720, 800):
    print(f"720x1280 capped at {target}:", rescaled_size(720, 1280, target))


def oracle_runner(video):
    # stands in for a model: returns the first mask as a probability stack
    masks = video.masks[0]
    probs = np.stack([(masks == k).astype(float) for k in video.object_ids])
    return [soft_aggregate(probs)] * len(video)


video = toy_video(1, n_frames=3, size=(48, 48))
direct = oracle_runner(video)
flipped = run_flip_branch(video, InferConfig(), runner=oracle_runner)
print("flip branch agrees with direct branch:", np.allclose(direct[1], flipped[1]))

fused = fuse_tta([direct, flipped], video.size)
print("fused channel sums:", float(fused[1].sum(0).min()), float(fused[1].sum(0).max()))
