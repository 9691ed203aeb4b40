"""The model: community encoder, edge partitioner, community-GNN bank,
representation composer, pooling, and the Monte Carlo label predictor.

Aggregation comes in two kinds: degree-normalized with self-loops for node
tasks, and sum aggregation with a learnable self-weight and a two-layer
per-node transform for graph tasks. Each partitioned graph is normalized
with its own weighted degrees, differentiably, so gradients reach the
partition weights (and through them the affiliations and activations); the
binary support of the adjacency stays constant.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import diffmath as dm
from .diffmath import Node, ParameterStore
from .distributions import (
    CommunityActivations,
    block_structure,
    clamp_weibull,
    weibull_rsample,
)
from .graphs import Graph
from .rng import substream
from .sparse import SparseMatrix, normalize_adjacency

LAYER_KINDS = ("gcn", "gin")
COMPOSER_KINDS = ("gnn", "dense")
PARTITION_MODES = ("learned", "even", "random")
INPUT_MODES = ("features_and_z", "features_only", "z_only", "random")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_metacommunities: int = 4
    communities_per_block: int = 4
    tau: float = 1.0
    encoder_layers: int = 2
    bank_layers: int = 2
    composer_layers: int = 2
    hidden_dim: int = 64
    layer_kind: str = "gcn"
    composer_kind: str = "gnn"
    partition_mode: str = "learned"
    input_mode: str = "features_and_z"
    mc_samples: int = 4
    dropout: float = 0.5

    def __post_init__(self):
        for name in ("n_metacommunities", "communities_per_block", "encoder_layers",
                     "bank_layers", "composer_layers", "hidden_dim", "mc_samples"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.tau <= 0:
            raise ModelError("tau must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")
        if self.layer_kind not in LAYER_KINDS:
            raise ModelError(f"layer_kind must be one of {LAYER_KINDS}")
        if self.composer_kind not in COMPOSER_KINDS:
            raise ModelError(f"composer_kind must be one of {COMPOSER_KINDS}")
        if self.partition_mode not in PARTITION_MODES:
            raise ModelError(f"partition_mode must be one of {PARTITION_MODES}")
        if self.input_mode not in INPUT_MODES:
            raise ModelError(f"input_mode must be one of {INPUT_MODES}")

    @property
    def total_communities(self) -> int:
        return self.n_metacommunities * self.communities_per_block

    @property
    def bank_width(self) -> int:
        # per-community hidden budget: 1/K of the shared hidden dimension
        return math.ceil(self.hidden_dim / self.n_metacommunities)


@dataclass
class AffiliationPosterior:
    weibull_shape: Node
    weibull_scale: Node
    z: Node
    uniforms: np.ndarray


@dataclass
class EdgePartition:
    """K weighted edge sets sharing the adjacency support.

    `weights` has one row per stored (directed) entry and K columns; the
    row sums reproduce the original edge values.
    """

    n: int
    k: int
    rows: np.ndarray
    cols: np.ndarray
    edge_vals: np.ndarray
    weights: Node

    def weight_values(self) -> np.ndarray:
        return self.weights.value

    def sum_deviation(self) -> float:
        if self.rows.size == 0:
            return 0.0
        return float(np.abs(self.weights.value.sum(axis=1) - self.edge_vals).max())

    def to_sparse_matrices(self) -> list[SparseMatrix]:
        w = self.weights.value
        return [
            SparseMatrix(self.n, self.n, self.rows.copy(), self.cols.copy(), w[:, j].copy())
            for j in range(self.k)
        ]


@dataclass
class PreparedGraph:
    """A graph plus the constants every forward pass reuses."""

    graph: Graph
    task: str
    n_classes: int
    a_norm: SparseMatrix = field(init=False)
    x_const: Node = field(init=False)
    graph_ids: Optional[np.ndarray] = None
    graph_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.task not in ("node", "graph"):
            raise ModelError("task must be 'node' or 'graph'")
        self.a_norm = normalize_adjacency(self.graph.adjacency)
        self.x_const = dm.constant(self.graph.features)
        if self.task == "graph":
            if self.graph_ids is None or self.graph_labels is None:
                raise ModelError("graph task requires graph_ids and graph_labels")
            self.graph_ids = np.asarray(self.graph_ids, dtype=np.int64)
            self.graph_labels = np.asarray(self.graph_labels, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return self.graph.n_nodes

    @property
    def n_graphs(self) -> int:
        return 0 if self.graph_ids is None else int(self.graph_ids.max()) + 1


def prepare_node_graph(graph: Graph, n_classes: Optional[int] = None) -> PreparedGraph:
    return PreparedGraph(graph=graph, task="node",
                         n_classes=n_classes or graph.n_classes())


def prepare_graph_batch(union: Graph, graph_ids, graph_labels, n_classes) -> PreparedGraph:
    return PreparedGraph(graph=union, task="graph", n_classes=n_classes,
                         graph_ids=graph_ids, graph_labels=graph_labels)


# ---------------------------------------------------------------------------
# parameters


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _bank_input_dim(cfg: ModelConfig, n_features: int) -> int:
    return {
        "features_and_z": n_features + cfg.total_communities,
        "features_only": n_features,
        "z_only": cfg.total_communities,
        "random": n_features,
    }[cfg.input_mode]


def _add_layer(store, rng, name, din, dout, kind, group):
    if kind == "gcn" or kind == "dense":
        store.add(f"{name}.W", _glorot(rng, din, dout), group)
        store.add(f"{name}.b", np.zeros(dout), group)
    else:  # gin: learnable self-weight + two-layer transform
        store.add(f"{name}.eps", np.zeros(()), group)
        store.add(f"{name}.W1", _glorot(rng, din, dout), group)
        store.add(f"{name}.b1", np.zeros(dout), group)
        store.add(f"{name}.W2", _glorot(rng, dout, dout), group)
        store.add(f"{name}.b2", np.zeros(dout), group)


def init_params(cfg: ModelConfig, n_features: int, n_classes: int, seed: int,
                task: str) -> ParameterStore:
    """Fresh parameter store for the full architecture."""
    store = ParameterStore()
    c_total = cfg.total_communities

    dims = [n_features] + [cfg.hidden_dim] * (cfg.encoder_layers - 1) + [2 * c_total]
    for li in range(cfg.encoder_layers):
        rng = substream(seed, "init", "enc", li)
        _add_layer(store, rng, f"enc.{li}", dims[li], dims[li + 1], "gcn", "phi")

    store.add("gamma_raw", CommunityActivations.initial_raw(c_total), "shared")

    bw = cfg.bank_width
    din = _bank_input_dim(cfg, n_features)
    for k in range(cfg.n_metacommunities):
        bdims = [din] + [bw] * cfg.bank_layers
        for li in range(cfg.bank_layers):
            rng = substream(seed, "init", "bank", k, li)
            _add_layer(store, rng, f"bank.{k}.{li}", bdims[li], bdims[li + 1],
                       cfg.layer_kind, "theta")

    comp_out = n_classes if task == "node" else cfg.hidden_dim
    cdims = [cfg.n_metacommunities * bw] + [cfg.hidden_dim] * (cfg.composer_layers - 1) + [comp_out]
    comp_kind = cfg.layer_kind if cfg.composer_kind == "gnn" else "dense"
    for li in range(cfg.composer_layers):
        rng = substream(seed, "init", "comp", li)
        _add_layer(store, rng, f"comp.{li}", cdims[li], cdims[li + 1], comp_kind, "theta")

    if task == "graph":
        rng = substream(seed, "init", "out")
        store.add("out.W", _glorot(rng, cfg.hidden_dim, n_classes), "theta")
        store.add("out.b", np.zeros(n_classes), "theta")
    return store


def gamma_node(store: ParameterStore) -> Node:
    return CommunityActivations.gamma(store["gamma_raw"])


# ---------------------------------------------------------------------------
# module 4: community encoder


def encode_communities(prep: PreparedGraph, store: ParameterStore, cfg: ModelConfig,
                       uniforms: np.ndarray, training: bool = False,
                       step: int = 0, seed: int = 0) -> AffiliationPosterior:
    """Variational Weibull posterior over node-community affiliations.

    The encoder GNN emits 2C columns, split into shape and scale halves and
    mapped through softplus; the sample is the inverse-CDF transform of the
    supplied uniforms, differentiable in both halves.
    """
    h = prep.x_const
    for li in range(cfg.encoder_layers):
        if training and li > 0:
            h = dm.dropout(h, cfg.dropout, substream(seed, "dropout", "enc", li, step), True)
        w, b = store[f"enc.{li}.W"], store[f"enc.{li}.b"]
        h = dm.sparse_dense_matmul(prep.a_norm, dm.matmul(h, w) + b)
        if li < cfg.encoder_layers - 1:
            h = dm.relu(h)
    c = cfg.total_communities
    if h.value.shape[1] != 2 * c:
        raise ModelError(f"encoder output width {h.value.shape[1]} != 2C = {2 * c}")
    shape_k, scale = clamp_weibull(dm.slice_columns(h, 0, c), dm.slice_columns(h, c, 2 * c))
    z = weibull_rsample(shape_k, scale, uniforms)
    return AffiliationPosterior(weibull_shape=shape_k, weibull_scale=scale, z=z,
                                uniforms=uniforms)


def encoder_uniforms(n: int, c: int, seed: int, *path) -> np.ndarray:
    return substream(seed, "encoder-noise", *path).random((n, c))


# ---------------------------------------------------------------------------
# module 1: edge partitioner


def draw_random_partition_weights(adjacency: SparseMatrix, cfg: ModelConfig,
                                  seed: int) -> np.ndarray:
    """Frozen random partition: U(0,100) per undirected edge and block,
    softmax-normalized at temperature tau, mirrored to both directions."""
    n = adjacency.n_rows
    rows, cols = adjacency.rows, adjacency.cols
    pair_key = np.minimum(rows, cols) * n + np.maximum(rows, cols)
    uniq = np.unique(pair_key)
    raw = substream(seed, "random-partition").uniform(0.0, 100.0,
                                                      (uniq.size, cfg.n_metacommunities))
    x = raw / cfg.tau
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    w = e / e.sum(axis=1, keepdims=True)
    return w[np.searchsorted(uniq, pair_key)]


def partition_edges(adjacency: SparseMatrix, z: Optional[Node], gamma: Optional[Node],
                    cfg: ModelConfig, seed: int = 0) -> EdgePartition:
    """Split each edge into K weights summing to the original edge value.

    learned: per-edge softmax of the K metacommunity interaction rates at
    temperature tau; even: every weight 1/K; random: frozen seeded weights.
    """
    rows, cols, vals = adjacency.rows, adjacency.cols, adjacency.vals
    e, k = rows.size, cfg.n_metacommunities
    if cfg.partition_mode == "learned":
        if z is None or gamma is None:
            raise ModelError("learned partition requires affiliations and activations")
        zg = dm.elementwise_mul(z, gamma)
        prod = dm.elementwise_mul(dm.gather_rows(zg, rows), dm.gather_rows(z, cols))
        rates = dm.matmul(prod, dm.constant(block_structure(cfg.total_communities, k)))
        soft = dm.row_softmax_with_temperature(rates, cfg.tau)
    elif cfg.partition_mode == "even":
        soft = dm.constant(np.full((e, k), 1.0 / k))
    else:
        soft = dm.constant(draw_random_partition_weights(adjacency, cfg, seed))
    weights = dm.scale_rows(soft, dm.constant(vals))
    return EdgePartition(n=adjacency.n_rows, k=k, rows=rows, cols=cols,
                         edge_vals=vals, weights=weights)


# ---------------------------------------------------------------------------
# aggregation layers


def _gcn_layer(h, w_edge, rows, cols, n, store, name, cfg, training, step, seed,
               drop_tag, first, pre=None):
    """Degree-normalized propagation over differentiable edge weights.

    Weighted degrees include the unit self-loop; each part is normalized by
    its own D^{-1/2} (A^(k) + I) D^{-1/2}. `pre` short-circuits the linear
    transform when it was computed jointly for all communities.
    """
    if pre is None:
        if training and not first:
            h = dm.dropout(h, cfg.dropout,
                           substream(seed, "dropout", *drop_tag, step), True)
        m = dm.matmul(h, store[f"{name}.W"]) + store[f"{name}.b"]
    else:
        m = pre
    deg = dm.scatter_add_rows(w_edge, rows, n) + dm.constant(1.0)
    dinv_sqrt = dm.power(deg, -0.5)
    ew = dm.elementwise_mul(
        w_edge, dm.elementwise_mul(dm.gather_rows(dinv_sqrt, rows),
                                   dm.gather_rows(dinv_sqrt, cols)))
    agg = dm.scatter_add_rows(dm.scale_rows(dm.gather_rows(m, cols), ew), rows, n)
    return agg + dm.scale_rows(m, dm.power(deg, -1.0))


def _gin_layer(h, w_edge, rows, cols, n, store, name, cfg, training, step, seed,
               drop_tag, first):
    """Sum aggregation with learnable self-weight and a 2-layer transform."""
    if training and not first:
        h = dm.dropout(h, cfg.dropout, substream(seed, "dropout", *drop_tag, step), True)
    neigh = dm.scatter_add_rows(dm.scale_rows(dm.gather_rows(h, cols), w_edge), rows, n)
    self_w = dm.constant(1.0) + store[f"{name}.eps"]
    agg = neigh + dm.elementwise_mul(h, self_w)
    m = dm.relu(dm.matmul(agg, store[f"{name}.W1"]) + store[f"{name}.b1"])
    return dm.matmul(m, store[f"{name}.W2"]) + store[f"{name}.b2"]


_LAYER_FNS = {"gcn": _gcn_layer, "gin": _gin_layer}


# ---------------------------------------------------------------------------
# module 2: community-GNN bank


def build_input_features(prep: PreparedGraph, z: Node, cfg: ModelConfig,
                         seed: int) -> Node:
    if cfg.input_mode == "features_and_z":
        return dm.concat_columns([prep.x_const, z])
    if cfg.input_mode == "features_only":
        return prep.x_const
    if cfg.input_mode == "z_only":
        return z
    noise = substream(seed, "input-noise").standard_normal(prep.graph.features.shape)
    return dm.constant(noise)


def community_gnn_forward(x_star: Node, partition: EdgePartition,
                          store: ParameterStore, cfg: ModelConfig,
                          training: bool = False, step: int = 0,
                          seed: int = 0) -> list[Node]:
    """One L2-layer GNN per metacommunity over its partitioned graph."""
    layer_fn = _LAYER_FNS[cfg.layer_kind]
    k_meta, bw = cfg.n_metacommunities, cfg.bank_width

    # the first transform shares its (wide) input across communities, so for
    # the transform-then-aggregate kind run it as one fused product
    pre_slices = [None] * k_meta
    if cfg.layer_kind == "gcn":
        w_cat = dm.concat_columns([store[f"bank.{k}.0.W"] for k in range(k_meta)])
        b_cat = dm.concat_columns(
            [dm.reshape(store[f"bank.{k}.0.b"], (1, bw)) for k in range(k_meta)])
        m_all = dm.matmul(x_star, w_cat) + b_cat
        pre_slices = [dm.slice_columns(m_all, k * bw, (k + 1) * bw)
                      for k in range(k_meta)]

    out = []
    for k in range(k_meta):
        w_k = dm.reshape(dm.slice_columns(partition.weights, k, k + 1),
                         (partition.rows.size,))
        h = x_star
        for li in range(cfg.bank_layers):
            kwargs = {"pre": pre_slices[k]} if li == 0 and cfg.layer_kind == "gcn" else {}
            h = layer_fn(h, w_k, partition.rows, partition.cols, partition.n,
                         store, f"bank.{k}.{li}", cfg, training, step, seed,
                         ("bank", k, li), first=(li == 0), **kwargs)
            if li < cfg.bank_layers - 1:
                h = dm.relu(h)
        out.append(h)
    return out


# ---------------------------------------------------------------------------
# module 3: representation composer


def compose_representations(h_list: list[Node], prep: PreparedGraph,
                            store: ParameterStore, cfg: ModelConfig,
                            training: bool = False, step: int = 0,
                            seed: int = 0) -> Node:
    """Fuse the K community embeddings into one representation.

    The gnn composer aggregates the concatenation over the full (normalized
    or binary, matching the layer kind) graph; the dense variant is a
    per-node map that never touches the adjacency.
    """
    h = dm.concat_columns(h_list)
    adj = prep.graph.adjacency
    ones = dm.constant(np.ones(adj.rows.size))
    for li in range(cfg.composer_layers):
        name = f"comp.{li}"
        if cfg.composer_kind == "dense":
            if training and li > 0:
                h = dm.dropout(h, cfg.dropout,
                               substream(seed, "dropout", "comp", li, step), True)
            h = dm.matmul(h, store[f"{name}.W"]) + store[f"{name}.b"]
        elif cfg.layer_kind == "gcn":
            if training and li > 0:
                h = dm.dropout(h, cfg.dropout,
                               substream(seed, "dropout", "comp", li, step), True)
            h = dm.sparse_dense_matmul(prep.a_norm, dm.matmul(h, store[f"{name}.W"])
                                       + store[f"{name}.b"])
        else:
            h = _gin_layer(h, ones, adj.rows, adj.cols, prep.n_nodes, store, name,
                           cfg, training, step, seed, ("comp", li), first=(li == 0))
        if li < cfg.composer_layers - 1:
            h = dm.relu(h)
    return h


def graph_pool(h_v: Node, graph_ids: np.ndarray, n_graphs: int) -> Node:
    """Sum node rows within each graph."""
    if h_v.value.shape[0] == 0:
        raise ModelError("cannot pool an empty graph")
    return dm.scatter_add_rows(h_v, graph_ids, n_graphs)


# ---------------------------------------------------------------------------
# pipeline


def forward_logits(prep: PreparedGraph, z: Node, partition: EdgePartition,
                   store: ParameterStore, cfg: ModelConfig,
                   training: bool = False, step: int = 0, seed: int = 0,
                   x_star: Optional[Node] = None) -> Node:
    if x_star is None:
        x_star = build_input_features(prep, z, cfg, seed)
    h_list = community_gnn_forward(x_star, partition, store, cfg, training, step, seed)
    h_v = compose_representations(h_list, prep, store, cfg, training, step, seed)
    if prep.task == "node":
        return h_v
    pooled = graph_pool(h_v, prep.graph_ids, prep.n_graphs)
    return dm.matmul(pooled, store["out.W"]) + store["out.b"]


def predict_probabilities(prep: PreparedGraph, store: ParameterStore,
                          cfg: ModelConfig, uniforms: np.ndarray,
                          partition_seed: int = 0) -> np.ndarray:
    """Single-sample class probabilities (evaluation mode, no dropout)."""
    post = encode_communities(prep, store, cfg, uniforms)
    part = partition_edges(prep.graph.adjacency, post.z, gamma_node(store), cfg,
                           seed=partition_seed)
    logits = forward_logits(prep, post.z, part, store, cfg)
    return dm.row_softmax_with_temperature(logits, 1.0).value.copy()


def posterior_predictive(prep: PreparedGraph, store: ParameterStore, cfg: ModelConfig,
                         s: int, seed: int, partition_seed: int = 0,
                         uniforms_list=None) -> np.ndarray:
    """Monte Carlo average of the predicted class distributions.

    Draws `s` affiliation samples from the (sample-independent) posterior,
    runs the generative pipeline for each, and averages the probability
    outputs (not the logits).
    """
    if s < 1:
        raise ModelError("need at least one posterior sample")
    c = cfg.total_communities
    shape_v = scale_v = None
    gamma = gamma_node(store)
    acc = None
    for i in range(s):
        if uniforms_list is not None:
            u = uniforms_list[i]
        else:
            u = encoder_uniforms(prep.n_nodes, c, seed, "predict", i)
        if shape_v is None:
            post = encode_communities(prep, store, cfg, u)
            shape_v = dm.constant(post.weibull_shape.value)
            scale_v = dm.constant(post.weibull_scale.value)
            z = post.z
        else:
            z = weibull_rsample(shape_v, scale_v, u)
        part = partition_edges(prep.graph.adjacency, z, gamma, cfg,
                               seed=partition_seed)
        logits = forward_logits(prep, z, part, store, cfg)
        p = dm.row_softmax_with_temperature(logits, 1.0).value.copy()
        acc = p if acc is None else acc + p
    return acc / s


# ---------------------------------------------------------------------------
# exports


def mu_statistic(z: np.ndarray, gamma: np.ndarray, k: int) -> np.ndarray:
    """Total interaction each node engages per metacommunity:
    mu[u, k] = sum_v (block-k rate between u and v)."""
    z = np.asarray(z, dtype=np.float64)
    blocks = block_structure(z.shape[1], k)
    return (z * gamma * z.sum(axis=0)) @ blocks


def node_ordering(mu: np.ndarray) -> np.ndarray:
    """Bucket nodes by argmax metacommunity; buckets sorted by size
    descending, nodes within a bucket by descending mu."""
    assign = np.argmax(mu, axis=1)
    sizes = np.bincount(assign, minlength=mu.shape[1])
    bucket_order = np.argsort(-sizes, kind="stable")
    order = []
    for b in bucket_order:
        members = np.flatnonzero(assign == b)
        order.extend(members[np.argsort(-mu[members, b], kind="stable")])
    return np.asarray(order, dtype=np.int64)


def export_partition(out_dir: str, partition: EdgePartition, mu: np.ndarray):
    """part_k.csv files (one undirected edge per row) plus the node order."""
    os.makedirs(out_dir, exist_ok=True)
    w = partition.weight_values()
    keep = partition.rows < partition.cols
    iu, ju = partition.rows[keep], partition.cols[keep]
    for k in range(partition.k):
        with open(os.path.join(out_dir, f"part_{k}.csv"), "w", encoding="utf-8") as fh:
            for i, j, v in zip(iu, ju, w[keep, k]):
                fh.write(f"{i},{j},{float(v)!r}\n")
    assign = np.argmax(mu, axis=1)
    with open(os.path.join(out_dir, "node_order.csv"), "w", encoding="utf-8") as fh:
        for u in node_ordering(mu):
            fh.write(f"{u},{assign[u]},{float(mu[u, assign[u]])!r}\n")


def export_embeddings(out_dir: str, h_list: list[np.ndarray], z: np.ndarray):
    os.makedirs(out_dir, exist_ok=True)
    for k, h in enumerate(h_list):
        np.savetxt(os.path.join(out_dir, f"embedding_{k}.csv"), h, delimiter=",")
    np.savetxt(os.path.join(out_dir, "affiliations.csv"), z, delimiter=",")


def default_config_for_task(task: str, **overrides) -> ModelConfig:
    base = ModelConfig(layer_kind="gcn" if task == "node" else "gin")
    return replace(base, **overrides) if overrides else base
