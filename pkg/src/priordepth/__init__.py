"""Monocular metric depth estimation with fused sparse depth priors."""

from .data import AugmentConfig, DepthSample, augment, generate_synthetic, load_dataset
from .densify import PriorMaps, densify, downsample_prior, nearest_index_map, zero_prior_maps
from .evaluation import MetricReport, evaluate, evaluate_prior_standalone, evaluate_ranges
from .losses import LossConfig, loss_chamfer, loss_objective, loss_rmse, loss_silog
from .model import NetworkConfig, PriorDepthNet, compute_bin_centers, compute_bin_widths
from .priors import SparsePrior, extract_prior, subsample_prior
from .training import TrainConfig, fit, lr_schedule, train_step

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "DepthSample", "augment", "generate_synthetic", "load_dataset",
    "PriorMaps", "densify", "downsample_prior", "nearest_index_map", "zero_prior_maps",
    "MetricReport", "evaluate", "evaluate_prior_standalone", "evaluate_ranges",
    "LossConfig", "loss_chamfer", "loss_objective", "loss_rmse", "loss_silog",
    "NetworkConfig", "PriorDepthNet", "compute_bin_centers", "compute_bin_widths",
    "SparsePrior", "extract_prior", "subsample_prior",
    "TrainConfig", "fit", "lr_schedule", "train_step",
]
