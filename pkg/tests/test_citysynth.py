import asyncio

import numpy as np
import pytest
from scipy.spatial.distance import cosine

from land_use_planner.citysynth import (
    CONTEXT_COUNT,
    DEFAULT_BIN_EDGES,
    FEATURE_DIM,
    NUM_CATEGORIES,
    CitySample,
    build_configuration,
    build_context_graph,
    context_graph,
    derive_instruction,
    generate_dataset,
    generate_dataset_async,
    green_share,
    quintile_edges,
    region_features,
    simulate_trajectories,
)


def _samples_equal(a: CitySample, b: CitySample) -> bool:
    return a.to_dict() == b.to_dict()


def test_generate_dataset_is_deterministic():
    first = generate_dataset(11, 6, 4, 2)
    second = generate_dataset(11, 6, 4, 2)
    assert first.metadata() == second.metadata()
    assert all(_samples_equal(a, b) for a, b in zip(first.samples, second.samples))


def test_generate_dataset_seed_changes_output():
    a = generate_dataset(1, 3, 4, 2)
    b = generate_dataset(2, 3, 4, 2)
    assert not np.array_equal(a.samples[0].configuration, b.samples[0].configuration)


def test_empty_dataset_has_valid_metadata():
    dataset = generate_dataset(0, 0, 5, 2)
    assert len(dataset) == 0
    meta = dataset.metadata()
    assert meta["num_samples"] == 0
    assert meta["grid_size"] == 5
    assert meta["num_categories"] == NUM_CATEGORIES
    assert meta["bin_edges"] == list(DEFAULT_BIN_EDGES)


@pytest.mark.parametrize("grid_size, num_zones", [(1, 1), (3, 0), (3, 10)])
def test_generate_dataset_rejects_bad_shape(grid_size, num_zones):
    with pytest.raises(ValueError):
        generate_dataset(0, 2, grid_size, num_zones)


def test_dataset_sample_shapes(tiny_dataset):
    sample = tiny_dataset.samples[0]
    assert sample.configuration.shape == (5, 5, NUM_CATEGORIES)
    assert sample.configuration.dtype == np.int64
    assert sample.context_features.shape == (CONTEXT_COUNT, FEATURE_DIM)
    assert sample.archetypes.shape == (5, 5)
    assert set(np.unique(sample.archetypes)) <= {0, 1}
    assert len(sample.trajectories) == 20
    assert all(len(t) == 10 for t in sample.trajectories)


def test_split_is_floor_of_test_fraction(tiny_dataset):
    assert len(tiny_dataset.test_indices) == 6
    assert len(tiny_dataset.train_indices) == 58
    assert set(tiny_dataset.train_indices).isdisjoint(tiny_dataset.test_indices)
    assert sorted(tiny_dataset.train_indices + tiny_dataset.test_indices) == list(range(64))


def test_instructions_follow_bin_edges(tiny_dataset):
    for sample in tiny_dataset.samples:
        assert sample.instruction == derive_instruction(sample.green_rate, tiny_dataset.bin_edges)
    assert len({s.instruction for s in tiny_dataset.samples}) == 5


def test_greener_levels_have_more_green_poi(tiny_dataset):
    low = [s.configuration for s in tiny_dataset.samples if s.instruction == 0]
    high = [s.configuration for s in tiny_dataset.samples if s.instruction == 4]
    assert green_share(high) > green_share(low)


async def test_async_generation_matches_sequential():
    sequential = generate_dataset(5, 8, 4, 2)
    parallel = await generate_dataset_async(5, 8, 4, 2, workers=3)
    assert sequential.metadata() == parallel.metadata()
    assert all(_samples_equal(a, b) for a, b in zip(sequential.samples, parallel.samples))


def test_derive_instruction_extremes():
    assert derive_instruction(0.0) == 0
    assert derive_instruction(1.0) == 4
    assert derive_instruction(0.2) == 1
    assert derive_instruction(0.79) == 3


@pytest.mark.parametrize("rate", [-0.01, 1.5])
def test_derive_instruction_rejects_out_of_range(rate):
    with pytest.raises(ValueError):
        derive_instruction(rate)


def test_quintile_edges_fall_back_when_degenerate():
    assert quintile_edges([0.3, 0.3]) == DEFAULT_BIN_EDGES
    assert quintile_edges([0.5] * 10) == DEFAULT_BIN_EDGES
    edges = quintile_edges(np.linspace(0.05, 0.95, 100))
    assert len(edges) == 4
    assert all(a < b for a, b in zip(edges, edges[1:]))


def test_build_configuration_empty():
    config = build_configuration([], 3)
    assert config.shape == (3, 3, NUM_CATEGORIES)
    assert config.sum() == 0


def test_build_configuration_single_event():
    config = build_configuration([(1, 2, 5)], 3)
    assert np.count_nonzero(config) == 1
    assert config[1, 2, 5] == 1


def test_build_configuration_conserves_counts(rng):
    events = np.column_stack([rng.integers(0, 4, 1000), rng.integers(0, 4, 1000),
                              rng.integers(0, NUM_CATEGORIES, 1000)])
    assert build_configuration(events, 4).sum() == 1000


def test_build_configuration_rejects_out_of_range():
    with pytest.raises(ValueError):
        build_configuration([(0, 3, 0)], 3)


def test_context_graph_structure(tiny_dataset):
    graph = context_graph(tiny_dataset.samples[0])
    assert graph.num_nodes == 1 + CONTEXT_COUNT
    np.testing.assert_array_equal(graph.adjacency, graph.adjacency.T)
    np.testing.assert_array_equal(np.diag(graph.adjacency), np.ones(9))
    np.testing.assert_array_equal(graph.features[0], np.zeros(FEATURE_DIM))
    # 目标区域与 8 个周边区域全部相邻
    np.testing.assert_array_equal(graph.adjacency[0], np.ones(9))


def test_corner_context_neighbors(tiny_dataset):
    graph = context_graph(tiny_dataset.samples[0])
    corner = graph.adjacency[1].copy()
    corner[1] = 0
    # 左上角：右侧、下方两个周边区域加上目标区域
    assert set(np.flatnonzero(corner)) == {0, 2, 8}
    edge = graph.adjacency[2].copy()
    edge[2] = 0
    assert set(np.flatnonzero(edge)) == {0, 1, 3, 4, 8}


def test_context_graph_requires_eight_neighbors():
    with pytest.raises(ValueError):
        build_context_graph(None, [np.zeros(FEATURE_DIM)] * 7)


def test_trajectories_uniform_on_empty_configuration():
    empty = np.zeros((3, 3, NUM_CATEGORIES))
    walks = np.asarray(simulate_trajectories(empty, 10_000, 10, seed=3))
    counts = np.bincount(walks.reshape(-1), minlength=9)
    expected = walks.size / 9
    assert np.all(np.abs(counts - expected) <= 0.05 * expected)


def test_trajectories_length_one_and_adjacency(rng):
    config = rng.integers(0, 5, size=(4, 4, NUM_CATEGORIES))
    single = simulate_trajectories(config, 5, 1, seed=0)
    assert all(len(t) == 1 for t in single)
    for walk in simulate_trajectories(config, 50, 8, seed=1):
        for a, b in zip(walk, walk[1:]):
            (ra, ca), (rb, cb) = divmod(a, 4), divmod(b, 4)
            assert abs(ra - rb) + abs(ca - cb) <= 1


def test_trajectories_deterministic(rng):
    config = rng.integers(0, 5, size=(4, 4, NUM_CATEGORIES))
    assert simulate_trajectories(config, 7, 6, seed=9) == simulate_trajectories(config, 7, 6, seed=9)


def test_trajectories_reject_bad_arguments():
    with pytest.raises(ValueError):
        simulate_trajectories(np.zeros((2, 2, NUM_CATEGORIES)), 0, 5, seed=0)


def test_green_share_clamps_negatives():
    config = np.zeros((1, 1, NUM_CATEGORIES))
    config[0, 0, 7] = 1.0
    config[0, 0, 0] = 1.0
    config[0, 0, 3] = -5.0
    assert green_share([config]) == pytest.approx(0.5)
    assert green_share([np.zeros((2, 2, NUM_CATEGORIES))]) == 0.0


def test_sample_dict_round_trip(tiny_dataset):
    sample = tiny_dataset.samples[3]
    assert _samples_equal(CitySample.from_dict(sample.to_dict()), sample)


def test_async_generation_runs_in_event_loop():
    dataset = asyncio.run(generate_dataset_async(2, 3, 3, 1, workers=1))
    assert len(dataset) == 3


def test_region_features_are_log_scaled():
    config = np.zeros((2, 2, NUM_CATEGORIES))
    config[..., 0] = 3.0
    config[..., 4] = 2.0
    config[..., 11] = 1.0
    expected = [np.log1p(3.0), np.log1p(2.0), 1.0 / 6.0, np.log1p(6.0)]
    np.testing.assert_allclose(region_features(config), expected)
    np.testing.assert_allclose(region_features(config.sum(axis=(0, 1)), cells=4), expected)


def test_region_features_of_empty_region():
    np.testing.assert_array_equal(region_features(np.zeros((3, 3, NUM_CATEGORIES))), np.zeros(FEATURE_DIM))
    with pytest.raises(ValueError):
        region_features(np.ones(NUM_CATEGORIES), cells=0)


def test_context_features_are_bounded(tiny_dataset):
    features = np.stack([s.context_features for s in tiny_dataset.samples])
    assert np.all(np.isfinite(features))
    assert np.all(features >= 0.0)
    assert np.all(features[..., 2] <= 1.0)
    # 每格约 20 个 POI，对数尺度下密度在 log1p(20) 附近
    assert 1.5 < features[..., 3].mean() < 4.5


def test_quintile_levels_hold_a_fifth_each():
    dataset = generate_dataset(21, 500, 4, 2)
    counts = np.bincount([s.instruction for s in dataset.samples], minlength=5)
    assert np.all(np.abs(counts / len(dataset) - 0.2) <= 0.02)


def test_same_archetype_cells_are_more_similar(tiny_dataset):
    within, between = [], []
    for sample in tiny_dataset.samples[:12]:
        cells = sample.configuration.reshape(-1, NUM_CATEGORIES).astype(float)
        labels = sample.archetypes.reshape(-1)
        for i in range(len(cells)):
            for j in range(i + 1, len(cells)):
                if cells[i].sum() == 0 or cells[j].sum() == 0:
                    continue
                similarity = 1.0 - cosine(cells[i], cells[j])
                (within if labels[i] == labels[j] else between).append(similarity)
    assert within and between
    assert np.mean(within) > np.mean(between)
