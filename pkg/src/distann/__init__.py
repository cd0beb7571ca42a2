"""Single-graph ANN index sharded across a node store, searched by a
multi-hop orchestrator with near-data scoring."""

from distann.kernels import BACKEND
from distann.vectors import VectorDataset, brute_force_topk, l2_sq, read_vectors, write_vectors

__all__ = [
    "BACKEND",
    "VectorDataset",
    "brute_force_topk",
    "l2_sq",
    "read_vectors",
    "write_vectors",
]

__version__ = "0.1.0"
