"""Recover sparse depth priors from two frames of a moving camera.

Two crops of one synthetic scene, shifted a few pixels apart, stand in for
consecutive video frames. Keypoints are matched across the pair, checked
against the estimated epipolar geometry, and the survivors read their depth
from the first frame's depth map.
"""

import numpy as np

from priordepth import extract_prior, generate_synthetic, subsample_prior
from priordepth.data import prior_coverage

frame_a, frame_b = generate_synthetic(seed=4, count=2, width=128, height=96, n_prior=0, sequence_shift=3)

prior = extract_prior(frame_a.image, frame_b.image, frame_a.gt_depth, frame_a.validity,
                      source_image_id=frame_a.id)
print(f"{len(prior)} keypoints survived matching and the epipolar check")

# Every prior depth is read straight off the ground truth at the snapped pixel.
cols, rows = np.floor(prior.xy + 0.5).astype(int).T
print("max deviation from ground truth:", float(np.abs(prior.depths - frame_a.gt_depth[rows, cols]).max()))

budget = subsample_prior(prior, 20, seed=0)
print(f"subsampled to {len(budget)} points, covering {100 * prior_coverage(len(budget), 128, 96):.2f}% of pixels")
