import numpy as np
import pytest

from land_use_planner.citysynth import SpatialAttributedGraph, context_graph
from land_use_planner.numgrad import gradient_check
from land_use_planner.stages.ctxembed import (
    GraphEncoder,
    encode_graph,
    encode_graphs,
    fuse_condition,
    condition_width,
    graph_vae_loss,
    normalized_adjacency,
    pad_condition,
    reconstruction_loss,
    train_graph_encoder,
)


@pytest.fixture(scope="module")
def graphs(tiny_dataset):
    return [context_graph(s) for s in tiny_dataset.samples[:16]]


def test_identity_adjacency_shared_features_give_equal_embeddings():
    graph = SpatialAttributedGraph(np.eye(4), np.tile([[0.5, -1.0, 2.0]], (4, 1)))
    encoding = encode_graph(graph, GraphEncoder(3, 8, 5, seed=2))
    for row in encoding.node_mu:
        np.testing.assert_allclose(row, encoding.node_mu[0])
    np.testing.assert_allclose(encoding.pooled, encoding.node_mu[0])


def test_permutation_moves_nodes_and_keeps_pooled(graphs):
    encoder = GraphEncoder(4, 8, 5, seed=0)
    order = [3, 0, 8, 1, 7, 2, 6, 4, 5]
    base = encode_graph(graphs[0], encoder)
    moved = encode_graph(graphs[0].permuted(order), encoder)
    np.testing.assert_allclose(moved.node_mu, base.node_mu[order], atol=1e-12)
    np.testing.assert_allclose(moved.pooled, base.pooled, atol=1e-12)


def test_normalized_adjacency_by_hand():
    path = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]])
    r6 = 1.0 / np.sqrt(6.0)
    expected = np.array([[0.5, r6, 0.0], [r6, 1.0 / 3.0, r6], [0.0, r6, 0.5]])
    np.testing.assert_allclose(normalized_adjacency(path), expected)


def test_forward_with_identity_weights_by_hand():
    adjacency = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]])
    features = np.array([[1.0], [-2.0], [3.0]])
    encoder = GraphEncoder(1, 1, 1)
    encoder.w_hidden.assign(np.ones((1, 1)))
    encoder.w_mu.assign(np.ones((1, 1)))
    s = normalized_adjacency(adjacency)
    expected = s @ np.maximum(s @ features, 0.0)
    encoding = encode_graph(SpatialAttributedGraph(adjacency, features), encoder)
    np.testing.assert_allclose(encoding.node_mu, expected)
    assert encoding.pooled[0] == pytest.approx(expected.mean())


def test_asymmetric_adjacency_rejected():
    graph = SpatialAttributedGraph(np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        encode_graph(graph, GraphEncoder(1, 2, 2))


def test_batch_encoding_matches_single(graphs):
    encoder = GraphEncoder(4, 8, 5, seed=1)
    batch = encode_graphs(graphs[:3], encoder)
    for row, graph in zip(batch, graphs[:3]):
        np.testing.assert_allclose(row, encode_graph(graph, encoder).pooled, atol=1e-12)
    assert encode_graphs([], encoder).shape == (0, 5)


def test_graph_vae_loss_gradient(graphs):
    encoder = GraphEncoder(4, 4, 3, seed=5)
    features = np.stack([g.features for g in graphs[:2]])
    adjacency = np.stack([g.adjacency for g in graphs[:2]])
    norm_adj = np.stack([normalized_adjacency(a) for a in adjacency])
    noise = np.random.default_rng(0).standard_normal((2, 9, 3))
    error = gradient_check(lambda: graph_vae_loss(encoder, features, adjacency, norm_adj, noise)[0],
                           encoder.params.parameters())
    assert error <= 1e-4


def test_training_reduces_reconstruction_loss(graphs):
    initial = reconstruction_loss(GraphEncoder(4, 8, 4, seed=3), graphs)
    encoder, history = train_graph_encoder(graphs, epochs=30, seed=3, batch_size=8, hidden_dim=8, embed_dim=4)
    assert reconstruction_loss(encoder, graphs) <= initial
    assert history.epochs == list(range(30))


def test_training_is_deterministic(graphs):
    a, history_a = train_graph_encoder(graphs, epochs=2, seed=9, hidden_dim=4, embed_dim=3)
    b, history_b = train_graph_encoder(graphs, epochs=2, seed=9, hidden_dim=4, embed_dim=3)
    assert a.params.digest() == b.params.digest()
    assert history_a.losses == history_b.losses


def test_training_requires_graphs():
    with pytest.raises(ValueError):
        train_graph_encoder([], epochs=1, seed=0)


def test_fuse_condition_concatenates_one_hot():
    np.testing.assert_array_equal(fuse_condition(np.array([0.1, 0.2]), 3),
                                  [0.1, 0.2, 0.0, 0.0, 0.0, 1.0, 0.0])


def test_fuse_condition_levels_differ_only_in_one_hot():
    pooled = np.array([0.3, -0.4, 0.5])
    a, b = fuse_condition(pooled, 0), fuse_condition(pooled, 4)
    np.testing.assert_array_equal(a[:3], b[:3])
    assert np.count_nonzero(a[3:] != b[3:]) == 2


def test_fuse_condition_ablations_zero_their_part():
    pooled = np.array([0.3, -0.4])
    np.testing.assert_array_equal(fuse_condition(pooled, 2, use_context=False), [0, 0, 0, 0, 1, 0, 0])
    np.testing.assert_array_equal(fuse_condition(pooled, 2, use_instruction=False), [0.3, -0.4, 0, 0, 0, 0, 0])


@pytest.mark.parametrize("level", [-1, 5, 2.5, True])
def test_fuse_condition_rejects_invalid_level(level):
    with pytest.raises(ValueError):
        fuse_condition(np.zeros(2), level)


def test_condition_width():
    assert condition_width(16, 1) == 21
    assert condition_width(16, 4) == 24
    assert condition_width(4, 3) == 9


def test_pad_condition():
    np.testing.assert_array_equal(pad_condition(np.array([1.0, 2.0]), 4), [1.0, 2.0, 0.0, 0.0])
    assert pad_condition(np.ones((3, 2)), 5).shape == (3, 5)
    with pytest.raises(ValueError):
        pad_condition(np.ones(5), 3)
