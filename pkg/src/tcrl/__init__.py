"""Unsupervised re-identification with part, global and cluster memory banks.

A desk-scale engine: toy MLP encoder, synthetic identities, DBSCAN pseudo
labels and hand-derived gradients for every loss.
"""

from .clustering import PseudoLabeling, dbscan, pairwise_distance, relabel_epoch
from .data import Dataset, gen_synthetic, load_folder, mask_block, mask_grid, mask_random
from .losses import LossConfig, baseline_ccl, hcl, pcl, wrccl
from .memory import MomentumConfig, UpdatePolicy, init_banks, update_cluster, update_instance
from .pipeline import EvalReport, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EvalReport", "LossConfig", "MomentumConfig", "PseudoLabeling", "TrainConfig",
    "UpdatePolicy", "baseline_ccl", "dbscan", "evaluate", "gen_synthetic", "hcl", "init_banks",
    "load_checkpoint", "load_folder", "mask_block", "mask_grid", "mask_random", "pairwise_distance",
    "pcl", "relabel_epoch", "save_checkpoint", "train", "update_cluster", "update_instance", "wrccl",
]
