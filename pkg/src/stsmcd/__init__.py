"""Spatio-temporal state-space change detection at desk scale.

Binary change, semantic change, and building-damage models built from a
selective-scan state-space backbone, all running on a small NumPy tensor
engine with reverse-mode autodiff.
"""

from . import autodiff, bench, blocks, data, losses, metrics, models, scan2d, ssm

__all__ = [
    "autodiff", "bench", "blocks", "data", "losses", "metrics", "models", "scan2d", "ssm",
]
