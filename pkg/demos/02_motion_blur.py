"""
Linear motion-blur kernels
==========================

A kernel is a normalized line of ``size`` pixels through the center at a
given angle. Blurring is a plain 2-D convolution with reflected borders.
"""

import numpy as np

from mose_pipeline.augment import BlurConfig, apply_motion_blur, make_blur_kernel, sample_blur

np.set_printoptions(precision=3, suppress=True)

# horizontal and diagonal kernels of size 5
for angle in (0.0, 45.0):
    k = make_blur_kernel(5, angle)
    print(f"angle {angle}:\n{k.weights}\nsum = {k.weights.sum():.6f}\n")

# a vertical bar smears along the blur direction only
img = np.zeros((15, 15, 3))
img[:, 7] = 1.0
out = apply_motion_blur(img, make_blur_kernel(7, 0.0))
print("row through the bar after horizontal blur:", out[7, 3:12, 0])
out = apply_motion_blur(img, make_blur_kernel(7, 90.0))
print("same row after vertical blur:            ", out[7, 3:12, 0])

# the sampler fires with probability 0.3 by default
rng = np.random.default_rng(0)
draws = [sample_blur(rng, BlurConfig()) for _ in range(1000)]
print("fraction blurred:", np.mean([d is not None for d in draws]))
