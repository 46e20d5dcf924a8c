"""
One propagation step through the network
========================================

The session encodes frame 0 with its mask, then for each new frame reads
the pixel memory, refines the readout with object queries and decodes
per-object logits.
"""

import numpy as np
import torch

from mose_pipeline.infer import InferenceSession
from mose_pipeline.network import VOSModel, describe
from mose_pipeline.synthetic import toy_video

torch.manual_seed(0)
model = VOSModel().eval()
print(describe(model).splitlines()[-1])

video = toy_video(0, n_frames=3, size=(64, 64), n_objects=2)
frames = [torch.from_numpy(f.transpose(2, 0, 1).copy()) for f in video.frames]
first = torch.from_numpy(np.stack([video.masks[0] == k for k in (1, 2)]).astype(np.float32))

session = InferenceSession(model, model.cfg.memory_config(t_max=18, interval=1))
with torch.no_grad():
    session.start(frames[0], first)
    for t in (1, 2):
        logits, agg = session.step(frames[t])
        print(f"frame {t}: logits {tuple(logits.shape)}, channel sums in "
              f"[{agg.sum(0).min():.6f}, {agg.sum(0).max():.6f}]")

print("memory holds frames", session.pixel.frame_indices)
print("object tokens", tuple(session.objects.tokens.shape))
