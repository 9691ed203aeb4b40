import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from vepm.graphs import Graph, GraphCollection, sample_epm_graph  # noqa: E402
from vepm.rng import substream  # noqa: E402


def data_dir() -> str:
    return os.environ.get(
        "VEPM_DATA", os.path.join(os.path.dirname(__file__), "..", "data"))


def dataset_path(name: str):
    """Path to a converted benchmark dataset, or None if absent."""
    path = os.path.join(data_dir(), name)
    return path if os.path.isfile(os.path.join(path, "features.csv")) else None


def require_dataset(name: str) -> str:
    path = dataset_path(name)
    if path is None:
        pytest.skip(
            f"dataset {name!r} not present under {data_dir()!r}; convert it "
            f"with `vepm convert-planetoid` / `vepm convert-tu` (see README)")
    return path


def planted_graph(seed: int, n: int = 200, c: int = 4, boost: float = 30.0,
                  gamma: float = 8e-4):
    """The standard separable synthetic oracle graph."""
    return sample_epm_graph(n, c, 1.0, 1.0, np.full(c, gamma), seed=seed,
                            within_boost=boost)


def masked_node_graph(seed: int = 0, n: int = 80, **kw) -> Graph:
    """Planted graph with a 40/20/40 train/val/test node split."""
    graph, _ = planted_graph(seed, n=n, **kw)
    order = substream(seed, "test-masks").permutation(n)
    train = np.zeros(n, bool)
    val = np.zeros(n, bool)
    test = np.zeros(n, bool)
    train[order[: int(n * 0.4)]] = True
    val[order[int(n * 0.4) : int(n * 0.6)]] = True
    test[order[int(n * 0.6) :]] = True
    graph.train_mask, graph.val_mask, graph.test_mask = train, val, test
    return graph


def synthetic_collection(n_graphs: int = 40, seed: int = 0) -> GraphCollection:
    """Two-class toy collection: planted two-block graphs vs homogeneous
    graphs of matched size."""
    graphs, labels = [], []
    for i in range(n_graphs):
        cls = i % 2
        n = int(substream(seed, "size", i).integers(12, 20))
        if cls == 0:
            g, _ = sample_epm_graph(n, 2, 1.0, 1.0, np.full(2, 4e-3),
                                    seed=seed * 977 + i, within_boost=12.0)
        else:
            g, _ = sample_epm_graph(n, 2, 1.0, 1.0, np.full(2, 0.30),
                                    seed=seed * 977 + i)
        feats = np.ones((n, 2))
        feats[:, 1] = np.arange(n) / n
        graphs.append(Graph(adjacency=g.adjacency, features=feats))
        labels.append(cls)
    return GraphCollection(graphs=graphs, graph_labels=np.asarray(labels))
