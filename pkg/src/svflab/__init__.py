"""Singular value fine-tuning on synthetic few-shot segmentation."""

from svflab.autodiff import Graph, Param
from svflab.episodes import Episode, SplitPlan
from svflab.linalg import SvdFactors, matmul, svd
from svflab.strategy import StrategyConfig
from svflab.svf import DecomposedConv, decompose_conv, recompose, svf_forward

__all__ = [
    "DecomposedConv", "Episode", "Graph", "Param", "SplitPlan", "StrategyConfig", "SvdFactors",
    "decompose_conv", "matmul", "recompose", "svd", "svf_forward",
]
__version__ = "0.1.0"
