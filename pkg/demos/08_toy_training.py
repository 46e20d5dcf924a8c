"""
Training a toy model end to end
===============================

Runs both training stages on one synthetic sequence and propagates its
first mask through the remaining frames. Takes a few minutes on one CPU;
set ``DEMO_ITERS`` to shorten it.
"""

import os
import tempfile
import time

import numpy as np
import torch

from mose_pipeline.infer import InferConfig, propagate
from mose_pipeline.metrics import jaccard
from mose_pipeline.network import VOSModel
from mose_pipeline.synthetic import toy_video
from mose_pipeline.train import TrainingSources, toy_config, train_stage

iters = os.environ.get("DEMO_ITERS")
torch.manual_seed(0)
model = VOSModel()
video = toy_video(0)
sources = TrainingSources([(f, m) for f, m in zip(video.frames, video.masks)], [video])
out = tempfile.mkdtemp()

start = time.time()
for stage in ("pretrain", "main"):
    overrides = {}
    if iters:
        overrides = {"iters": int(iters), "decay_points": ()}
    result = train_stage(toy_config(stage, **overrides), model, sources, out)
    print(f"{stage}: loss {result.losses[0][2]:.3f} -> {result.losses[-1][2]:.3f}")
print(f"trained in {time.time() - start:.0f}s")

masks = propagate(video, InferConfig(scales=(None,), flip=False), model)
scores = [jaccard(p == 1, g == 1) for p, g in zip(masks[1:], video.masks[1:])]
print("per-frame J:", np.round(scores, 3))
