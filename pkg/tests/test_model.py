import numpy as np
import pytest

from conftest import masked_node_graph, planted_graph, synthetic_collection
from vepm import diffmath as dm
from vepm.graphs import Graph, batch_graphs
from vepm.model import (
    ModelConfig,
    ModelError,
    build_input_features,
    community_gnn_forward,
    compose_representations,
    encode_communities,
    encoder_uniforms,
    forward_logits,
    gamma_node,
    graph_pool,
    init_params,
    mu_statistic,
    node_ordering,
    partition_edges,
    posterior_predictive,
    predict_probabilities,
    prepare_graph_batch,
    prepare_node_graph,
)
from vepm.rng import substream
from vepm.sparse import SparseMatrix, adjacency_from_edges
from vepm.verify import edge_weight_entropies


def small_setup(seed=0, **cfg_kw):
    graph = masked_node_graph(seed=seed, n=40)
    defaults = dict(n_metacommunities=4, communities_per_block=1, hidden_dim=16,
                    dropout=0.0)
    defaults.update(cfg_kw)
    cfg = ModelConfig(**defaults)
    prep = prepare_node_graph(graph)
    store = init_params(cfg, graph.n_features, graph.n_classes(), seed, "node")
    return graph, cfg, prep, store


class TestModelConfig:
    def test_bank_width_is_hidden_over_k_rounded_up(self):
        assert ModelConfig(hidden_dim=64, n_metacommunities=4).bank_width == 16
        assert ModelConfig(hidden_dim=65, n_metacommunities=4).bank_width == 17

    def test_total_communities(self):
        cfg = ModelConfig(n_metacommunities=3, communities_per_block=5)
        assert cfg.total_communities == 15

    def test_validation(self):
        with pytest.raises(ModelError):
            ModelConfig(tau=0.0)
        with pytest.raises(ModelError):
            ModelConfig(layer_kind="attention")
        with pytest.raises(ModelError):
            ModelConfig(hidden_dim=0)


class TestEncoder:
    def test_zero_weights_give_softplus_zero(self):
        graph, cfg, prep, store = small_setup()
        for name in store.names("phi"):
            store.set_value(name, np.zeros_like(store[name].value))
        u = encoder_uniforms(40, cfg.total_communities, 0, "t")
        post = encode_communities(prep, store, cfg, u)
        np.testing.assert_allclose(post.weibull_shape.value, np.log(2.0), atol=1e-12)
        np.testing.assert_allclose(post.weibull_scale.value, np.log(2.0), atol=1e-12)

    def test_isomorphic_nodes_identical_posteriors(self):
        # path 1-0-2 with identical features: nodes 1 and 2 are isomorphic
        adj = adjacency_from_edges(3, np.array([[0, 1], [0, 2]]))
        graph = Graph(adjacency=adj, features=np.ones((3, 2)),
                      labels=np.array([0, 1, 1]))
        cfg = ModelConfig(n_metacommunities=2, communities_per_block=1,
                          hidden_dim=8, dropout=0.0)
        prep = prepare_node_graph(graph)
        store = init_params(cfg, 2, 2, 3, "node")
        u = encoder_uniforms(3, 2, 1, "iso")
        post = encode_communities(prep, store, cfg, u)
        np.testing.assert_allclose(post.weibull_shape.value[1],
                                   post.weibull_shape.value[2], atol=1e-12)
        np.testing.assert_allclose(post.weibull_scale.value[1],
                                   post.weibull_scale.value[2], atol=1e-12)

    def test_fixed_seed_reproducible_sample(self):
        graph, cfg, prep, store = small_setup()
        u = encoder_uniforms(40, cfg.total_communities, 7, "rep")
        z1 = encode_communities(prep, store, cfg, u).z.value
        z2 = encode_communities(prep, store, cfg, u).z.value
        assert np.array_equal(z1, z2)


class TestPartitioner:
    def test_single_part_equals_adjacency(self):
        graph, cfg, prep, store = small_setup(n_metacommunities=1)
        u = encoder_uniforms(40, cfg.total_communities, 0, "t")
        post = encode_communities(prep, store, cfg, u)
        part = partition_edges(graph.adjacency, post.z, gamma_node(store), cfg)
        np.testing.assert_allclose(part.weight_values(),
                                   graph.adjacency.vals[:, None], atol=1e-12)

    def test_block_rates_softmax_example(self):
        # rates (1, 2) at unit temperature split an edge 0.26894 / 0.73106
        adj = adjacency_from_edges(2, np.array([[0, 1]]))
        cfg = ModelConfig(n_metacommunities=2, communities_per_block=1, tau=1.0)
        z = dm.constant(np.array([[1.0, 1.0], [1.0, 2.0]]))
        gamma = dm.constant(np.ones(2))
        part = partition_edges(adj, z, gamma, cfg)
        np.testing.assert_allclose(part.weight_values(),
                                   [[0.26894142, 0.73105858]] * 2, atol=1e-8)

    def test_equal_rates_give_uniform_weights(self):
        adj = adjacency_from_edges(2, np.array([[0, 1]]))
        for tau in (0.1, 1.0, 100.0):
            cfg = ModelConfig(n_metacommunities=4, communities_per_block=1, tau=tau)
            z = dm.constant(np.ones((2, 4)))
            part = partition_edges(adj, z, dm.constant(np.ones(4)), cfg)
            np.testing.assert_allclose(part.weight_values(), 0.25, atol=1e-12)

    @pytest.mark.parametrize("mode", ["learned", "even", "random"])
    def test_sum_invariant_all_modes(self, mode):
        graph, cfg, prep, store = small_setup(partition_mode=mode)
        u = encoder_uniforms(40, cfg.total_communities, 0, "t")
        post = encode_communities(prep, store, cfg, u)
        part = partition_edges(graph.adjacency, post.z, gamma_node(store), cfg, seed=5)
        assert part.sum_deviation() < 1e-9

    def test_random_mode_frozen_and_symmetric(self):
        graph, cfg, prep, store = small_setup(partition_mode="random")
        part1 = partition_edges(graph.adjacency, None, None, cfg, seed=5)
        part2 = partition_edges(graph.adjacency, None, None, cfg, seed=5)
        assert np.array_equal(part1.weight_values(), part2.weight_values())
        # mirrored entries carry the same weights
        w = part1.weight_values()
        key = {(r, c): w[e] for e, (r, c) in enumerate(zip(part1.rows, part1.cols))}
        for (r, c), v in key.items():
            np.testing.assert_array_equal(v, key[(c, r)])
        assert not np.array_equal(
            w, partition_edges(graph.adjacency, None, None, cfg, seed=6).weight_values())

    def test_entropy_monotone_in_tau(self):
        ents = edge_weight_entropies((0.1, 1.0, 10.0, 100.0, 1000.0), seed=0)
        assert np.all(np.diff(ents) >= -1e-12)

    def test_one_hot_limit_as_tau_vanishes(self):
        adj = adjacency_from_edges(2, np.array([[0, 1]]))
        cfg = ModelConfig(n_metacommunities=2, communities_per_block=1, tau=1e-3)
        z = dm.constant(np.array([[1.0, 1.0], [1.0, 2.0]]))
        part = partition_edges(adj, z, dm.constant(np.ones(2)), cfg)
        assert part.weight_values().max() > 0.999

    def test_to_sparse_matrices_share_support(self):
        graph, cfg, prep, store = small_setup()
        u = encoder_uniforms(40, cfg.total_communities, 0, "t")
        post = encode_communities(prep, store, cfg, u)
        part = partition_edges(graph.adjacency, post.z, gamma_node(store), cfg)
        mats = part.to_sparse_matrices()
        assert len(mats) == 4
        total = sum(m.to_dense() for m in mats)
        np.testing.assert_allclose(total, graph.adjacency.to_dense(), atol=1e-9)


class TestBankAndComposer:
    def test_identical_parts_and_params_give_identical_embeddings(self):
        graph, cfg, prep, store = small_setup(n_metacommunities=2, hidden_dim=8,
                                              input_mode="features_only")
        ref = {"W": store["bank.0.0.W"].value, "b": store["bank.0.0.b"].value,
               "W1": store["bank.0.1.W"].value, "b1": store["bank.0.1.b"].value}
        store.set_value("bank.1.0.W", ref["W"])
        store.set_value("bank.1.0.b", ref["b"])
        store.set_value("bank.1.1.W", ref["W1"])
        store.set_value("bank.1.1.b", ref["b1"])
        e = graph.adjacency.nnz
        part = partition_edges(graph.adjacency, None, None,
                               ModelConfig(n_metacommunities=2,
                                           communities_per_block=1,
                                           partition_mode="even"))
        x_star = dm.constant(graph.features)
        h = community_gnn_forward(x_star, part, store, cfg)
        np.testing.assert_allclose(h[0].value, h[1].value, atol=1e-12)

    def test_zero_weight_part_reduces_to_per_node_transform(self):
        graph, cfg, prep, store = small_setup(n_metacommunities=1, hidden_dim=4,
                                              bank_layers=1,
                                              input_mode="features_only")
        e = graph.adjacency.nnz
        part_zero = type("P", (), {})()
        from vepm.model import EdgePartition

        part = EdgePartition(n=40, k=1, rows=graph.adjacency.rows,
                             cols=graph.adjacency.cols,
                             edge_vals=graph.adjacency.vals,
                             weights=dm.constant(np.zeros((e, 1))))
        x_star = dm.constant(graph.features)
        h = community_gnn_forward(x_star, part, store, cfg)[0]
        expected = graph.features @ store["bank.0.0.W"].value + store["bank.0.0.b"].value
        np.testing.assert_allclose(h.value, expected, atol=1e-12)

    def test_dense_composer_ignores_adjacency(self):
        graph, cfg, prep, store = small_setup(composer_kind="dense")
        u = encoder_uniforms(40, cfg.total_communities, 0, "t")
        post = encode_communities(prep, store, cfg, u)
        z_const = dm.constant(post.z.value)
        part = partition_edges(graph.adjacency, z_const, dm.constant(
            gamma_node(store).value), cfg)
        logits1 = forward_logits(prep, z_const, part, store, cfg).value

        # rewire the composer's graph: shuffle edges, keep the partition
        rng = substream(3, "shuffle")
        e2 = rng.integers(0, 40, (graph.n_edges, 2))
        g2 = Graph(adjacency=adjacency_from_edges(40, e2), features=graph.features,
                   labels=graph.labels, train_mask=graph.train_mask,
                   val_mask=graph.val_mask, test_mask=graph.test_mask)
        prep2 = prepare_node_graph(g2)
        logits2 = forward_logits(prep2, z_const, part, store, cfg).value
        np.testing.assert_allclose(logits1, logits2, atol=1e-12)

    def test_single_community_identity_composer_is_degree_smoothing(self):
        graph, cfg, prep, store = small_setup(n_metacommunities=1, hidden_dim=4,
                                              bank_layers=1, composer_layers=1)
        u = encoder_uniforms(40, cfg.total_communities, 0, "t")
        post = encode_communities(prep, store, cfg, u)
        z_const = dm.constant(post.z.value)
        part = partition_edges(graph.adjacency, z_const,
                               dm.constant(gamma_node(store).value), cfg)
        x_star = build_input_features(prep, z_const, cfg, 0)
        h1 = community_gnn_forward(x_star, part, store, cfg)[0]
        store.set_value("comp.0.W", np.eye(4, graph.n_classes()))
        store.set_value("comp.0.b", np.zeros(graph.n_classes()))
        out = compose_representations([h1], prep, store, cfg).value
        expected = prep.a_norm.matmul_dense(h1.value @ np.eye(4, graph.n_classes()))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_node_logits_width_is_class_count(self):
        graph, cfg, prep, store = small_setup()
        u = encoder_uniforms(40, cfg.total_communities, 0, "t")
        post = encode_communities(prep, store, cfg, u)
        part = partition_edges(graph.adjacency, post.z, gamma_node(store), cfg)
        logits = forward_logits(prep, post.z, part, store, cfg)
        assert logits.value.shape == (40, graph.n_classes())


class TestPooling:
    def test_single_node_graph_pool_is_identity(self):
        h = dm.constant(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(graph_pool(h, np.array([0]), 1).value,
                                      [[1.0, 2.0, 3.0]])

    def test_disjoint_self_union_doubles(self):
        rng = substream(0, "pool")
        h = rng.random((6, 3))
        single = graph_pool(dm.constant(h), np.zeros(6, np.int64), 1).value
        doubled = graph_pool(dm.constant(np.vstack([h, h])),
                             np.zeros(12, np.int64), 1).value
        np.testing.assert_allclose(doubled, 2 * single, atol=1e-12)

    def test_permutation_invariance(self):
        rng = substream(1, "pool2")
        h = rng.random((8, 3))
        gids = np.array([0, 0, 1, 1, 0, 1, 0, 1])
        base = graph_pool(dm.constant(h), gids, 2).value
        perm = rng.permutation(8)
        again = graph_pool(dm.constant(h[perm]), gids[perm], 2).value
        np.testing.assert_allclose(base, again, atol=1e-12)


class TestPosteriorPredictive:
    def test_identical_uniforms_collapse_to_single_sample(self):
        graph, cfg, prep, store = small_setup()
        u = encoder_uniforms(40, cfg.total_communities, 3, "pp")
        single = predict_probabilities(prep, store, cfg, u)
        avg = posterior_predictive(prep, store, cfg, 3, 0, uniforms_list=[u, u, u])
        np.testing.assert_allclose(avg, single, atol=1e-12)

    def test_rows_sum_to_one(self):
        graph, cfg, prep, store = small_setup()
        probs = posterior_predictive(prep, store, cfg, 4, seed=5)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_sample_order_does_not_matter(self):
        graph, cfg, prep, store = small_setup()
        u1 = encoder_uniforms(40, cfg.total_communities, 3, "a")
        u2 = encoder_uniforms(40, cfg.total_communities, 3, "b")
        p12 = posterior_predictive(prep, store, cfg, 2, 0, uniforms_list=[u1, u2])
        p21 = posterior_predictive(prep, store, cfg, 2, 0, uniforms_list=[u2, u1])
        np.testing.assert_allclose(p12, p21, atol=1e-12)


class TestEquivariance:
    def test_full_pipeline_permutation_equivariance(self):
        feats = substream(5, "feat").standard_normal((40, 6))
        graph, _ = planted_graph(5, n=40, boost=10.0, gamma=2e-3)
        graph = Graph(adjacency=graph.adjacency, features=feats,
                      labels=graph.labels)
        cfg = ModelConfig(n_metacommunities=4, communities_per_block=1,
                          hidden_dim=16, dropout=0.0)
        prep = prepare_node_graph(graph)
        store = init_params(cfg, 6, graph.n_classes(), 2, "node")
        u = encoder_uniforms(40, 4, 11, "pp")
        base = predict_probabilities(prep, store, cfg, u)

        perm = substream(8, "perm").permutation(40)
        inv = np.argsort(perm)
        adj = graph.adjacency
        padj = SparseMatrix(40, 40, inv[adj.rows], inv[adj.cols], adj.vals.copy())
        pgraph = Graph(adjacency=padj, features=graph.features[perm],
                       labels=graph.labels[perm])
        pprep = prepare_node_graph(pgraph)
        permuted = predict_probabilities(pprep, store, cfg, u[perm])
        assert np.abs(permuted - base[perm]).max() < 1e-9

    def test_gin_bank_permutes_rows(self):
        coll = synthetic_collection(n_graphs=2, seed=3)
        union, gids, labels = batch_graphs(coll, np.array([0, 1]))
        cfg = ModelConfig(layer_kind="gin", n_metacommunities=2,
                          communities_per_block=1, hidden_dim=8, dropout=0.0,
                          input_mode="features_only")
        prep = prepare_graph_batch(union, gids, labels, 2)
        store = init_params(cfg, 2, 2, 4, "graph")
        part = partition_edges(union.adjacency, None, None,
                               ModelConfig(layer_kind="gin", n_metacommunities=2,
                                           communities_per_block=1,
                                           partition_mode="even"))
        x_star = dm.constant(union.features)
        h = community_gnn_forward(x_star, part, store, cfg)
        n = union.n_nodes
        perm = substream(2, "gperm").permutation(n)
        inv = np.argsort(perm)
        padj = SparseMatrix(n, n, inv[union.adjacency.rows],
                            inv[union.adjacency.cols], union.adjacency.vals.copy())
        part_p = partition_edges(padj, None, None,
                                 ModelConfig(layer_kind="gin", n_metacommunities=2,
                                             communities_per_block=1,
                                             partition_mode="even"))
        h_p = community_gnn_forward(dm.constant(union.features[perm]), part_p,
                                    store, cfg)
        for a, b in zip(h, h_p):
            assert np.abs(b.value - a.value[perm]).max() < 1e-9


class TestExports:
    def test_mu_statistic_and_ordering(self):
        z = np.array([[5.0, 0.1], [4.0, 0.2], [0.1, 3.0], [0.3, 0.2]])
        gamma = np.ones(2)
        mu = mu_statistic(z, gamma, 2)
        s = z.sum(axis=0)
        np.testing.assert_allclose(mu, z * s, atol=1e-12)
        order = node_ordering(mu)
        # bucket 0 holds nodes {0, 1, 3} (largest first), bucket 1 holds {2}
        assert list(order) == [0, 1, 3, 2]

    def test_mass_in_block_two_assigned_two(self):
        z = np.zeros((1, 6))
        z[0, 4] = 3.0  # third block of width 2
        mu = mu_statistic(z, np.ones(6), 3)
        assert np.argmax(mu[0]) == 2
