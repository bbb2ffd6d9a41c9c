"""How the network turns bin probabilities into depth, and what it is trained on.

A bin layout is a set of widths that add up to a predicted range. Depth at a
pixel is the probability-weighted average of the bin centres. Training mixes
a plain RMSE, a scale-invariant log loss and a Chamfer term that pulls the
centres towards the ground-truth depths.
"""

import math

import torch

from priordepth import compute_bin_centers, compute_bin_widths, loss_chamfer, loss_rmse, loss_silog

logits = torch.tensor([[0.2, 0.7]], dtype=torch.float64)
raw_range = torch.tensor([10.0 + math.log(-math.expm1(-10.0))], dtype=torch.float64)  # softplus -> 10
_, widths, _ = compute_bin_widths(logits, raw_range, eps=1e-3, r_min=0.0)
centers = compute_bin_centers(widths)
print("widths:", widths.tolist(), "centres:", centers.tolist())

probs = torch.tensor([0.25, 0.75], dtype=torch.float64)
print("expected depth for p = (0.25, 0.75):", float((probs * centers[0]).sum()))

gt = torch.linspace(0.5, 9.0, 36, dtype=torch.float64).reshape(6, 6)
print("rmse of 1.1 x gt:", float(loss_rmse(1.1 * gt, gt)))
print("silog of e x gt:", float(loss_silog(math.e * gt, gt)))
print("chamfer between centres {1} and depths {2, 4}:",
      float(loss_chamfer(torch.tensor([1.0]), torch.tensor([[2.0, 4.0]]))))
