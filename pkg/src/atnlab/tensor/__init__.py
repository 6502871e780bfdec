"""Dense tensors as float32 numpy arrays, plus a small autodiff graph."""

from .graph import OPS, GradResult, Graph, Node, backward, forward, top2_indices
from .gradcheck import grad_check
from .kernels import BACKEND

__all__ = [
    "BACKEND",
    "OPS",
    "GradResult",
    "Graph",
    "Node",
    "backward",
    "forward",
    "grad_check",
    "top2_indices",
]
