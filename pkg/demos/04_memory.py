"""
Pixel memory admission and readout
==================================

Frame 0 is kept forever. Later frames are admitted every ``interval``
frames and the oldest of them is dropped once ``t_max`` entries are stored.
"""

import torch

from mose_pipeline.memory import MemoryConfig, PixelMemory, read_values

for t_max, interval in [(3, 1), (3, 2), (18, 1)]:
    mem = PixelMemory(MemoryConfig(t_max=t_max, interval=interval, key_dim=4, value_dim=2))
    for t in range(30):
        mem.admit(t, torch.randn(4, 2, 2), torch.randn(1, 2, 2, 2))
    print(f"t_max={t_max:2d} interval={interval}: stored frames {mem.frame_indices}")

# a readout is an affinity-weighted average of stored values
mem = PixelMemory(MemoryConfig(key_dim=4, value_dim=1))
key = torch.randn(4, 1, 2)
mem.admit(0, key, torch.tensor([[[[0.0, 10.0]]]]))
out, weights = read_values(mem, key, return_weights=True)
print("weights (memory x query):\n", weights)
print("readout:", out.flatten())

# reading a frame's own or later entries is refused
try:
    read_values(mem, key, query_index=0)
except Exception as exc:
    print("causality guard:", exc)
