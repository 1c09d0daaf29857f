"""Cell graphs from nucleus segmentations, classified by a hand-written GNN.

Subpackages are plain modules: ``autodiff`` (tensors and reverse mode),
``graph`` (KD-tree and KNN edges), ``features`` (morphology and GLCM),
``cpc`` (self-supervised patch encoder), ``gnn`` (GraphSAGE with attention
pooling), ``data`` (labels, crops, folds, synthetic cohorts, graph files),
``metrics``, ``pipeline`` and ``cli``.
"""
from .autodiff import Tensor, backward, gradcheck
from .config import RunConfig
from .gnn import CellGraph, GnnConfig, ModelParams, forward
from .graph import EdgeList, KdTree, knn_graph

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "gradcheck", "RunConfig", "CellGraph", "GnnConfig", "ModelParams",
           "forward", "EdgeList", "KdTree", "knn_graph", "__version__"]
