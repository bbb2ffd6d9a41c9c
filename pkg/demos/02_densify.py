"""Turn a handful of depth samples into two dense guidance maps.

The first map copies the depth of the nearest sample into every pixel. The
second is a Gaussian of the distance to that sample, so the network can tell
how much to trust the first. Images land next to this script's working
directory as PNGs.
"""

import numpy as np

from priordepth import SparsePrior, densify, downsample_prior
from priordepth.densify import save_debug_images

rng = np.random.default_rng(0)
points = np.column_stack([rng.uniform(0, 319, 12), rng.uniform(0, 239, 12), rng.uniform(1, 8, 12)])
maps = densify(SparsePrior(points), width=320, height=240, sigma=10.0)

print("nearest-depth map range:", maps.s1.min(), "to", maps.s1.max())
print("proximity peak (1 / sigma sqrt(2 pi)):", maps.s2.max())

coarse = downsample_prior(maps, 4)
print("downsampled by 4:", coarse.s1.shape)

for path in save_debug_images(maps, "densify_demo"):
    print("wrote", path)
