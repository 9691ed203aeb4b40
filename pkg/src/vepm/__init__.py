"""Variational edge partition models for node and graph classification.

The package bundles a small differentiable computation engine, the
Weibull/Gamma probabilistic core, the four-module architecture
(community encoder, edge partitioner, community-GNN bank, representation
composer), a two-phase training loop, evaluation protocols, and a CLI.
"""

__version__ = "0.1.0"

from .sparse import SparseMatrix, normalize_adjacency, degree_vector
from .graphs import Graph, GraphCollection, PlantedCommunities, sample_epm_graph

__all__ = [
    "SparseMatrix",
    "normalize_adjacency",
    "degree_vector",
    "Graph",
    "GraphCollection",
    "PlantedCommunities",
    "sample_epm_graph",
    "__version__",
]
