"""Heterogeneous multi-agent trajectory forecasting with latent interaction
graphs, graph-entropy regularization, and mixup training."""

from .autodiff import DArray, no_grad
from .data import (Normalizer, Scene, SyntheticConfig, WindowPlan,
                   generate_synthetic, load_csv, plan_windows, save_csv,
                   split_scenes)
from .nn import ParamStore
from .rng import RngStream

__version__ = "0.1.0"

__all__ = [
    "DArray", "no_grad", "ParamStore", "RngStream",
    "Scene", "Normalizer", "WindowPlan", "SyntheticConfig",
    "plan_windows", "generate_synthetic", "load_csv", "save_csv",
    "split_scenes", "__version__",
]
