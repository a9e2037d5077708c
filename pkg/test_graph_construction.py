#!/usr/bin/env python3
"""
Graph construction tests - distances, positional bias, KNN selection, export
"""

import numpy as np
import pytest

from graph_construction import (
    Graph,
    PositionalCodes,
    adjust_with_relative_pe,
    build_graph,
    dilation_for_layer,
    knn_graph,
    pairwise_sq_distances,
    relative_position_bias,
    sincos_codes,
    write_dot,
    write_edge_list,
)
from vig_errors import ConfigError, DimensionError, InsufficientNodesError


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def brute_force_distances(x):
    n = x.shape[0]
    return np.array([[np.sum((x[i] - x[j]) ** 2) for j in range(n)] for i in range(n)])


def test_identical_rows_give_zero_matrix():
    np.testing.assert_array_equal(pairwise_sq_distances(np.ones((4, 3))).data, np.zeros((4, 4)))


def test_hand_distance():
    m = pairwise_sq_distances(np.array([[0.0, 0.0], [3.0, 4.0]])).data
    assert m[0, 1] == pytest.approx(25.0)
    assert m[1, 0] == pytest.approx(25.0)


def test_distances_are_symmetric_nonnegative_zero_diagonal(rng):
    x = rng.normal(size=(2, 12, 5)) * 100
    m = pairwise_sq_distances(x).data
    np.testing.assert_array_equal(m, np.swapaxes(m, -1, -2))
    assert (m >= 0).all()
    assert (np.diagonal(m, axis1=-2, axis2=-1) == 0).all()
    np.testing.assert_allclose(m[1], brute_force_distances(x[1]), rtol=1e-9, atol=1e-6)


def test_single_node_is_insufficient():
    with pytest.raises(InsufficientNodesError):
        pairwise_sq_distances(np.ones((1, 3)))


def test_zero_bias_leaves_distances_unchanged(rng):
    m = pairwise_sq_distances(rng.normal(size=(6, 3)))
    out = adjust_with_relative_pe(m, PositionalCodes(relative_bias=np.zeros((6, 6))))
    np.testing.assert_array_equal(out.data, m.data)


def test_constant_bias_keeps_knn_result(rng):
    m = pairwise_sq_distances(rng.normal(size=(10, 3)))
    shifted = adjust_with_relative_pe(m, PositionalCodes(relative_bias=np.full((10, 10), 3.5)))
    np.testing.assert_array_equal(knn_graph(m, 3).neighbors, knn_graph(shifted, 3).neighbors)


def test_strongly_negative_bias_makes_mutual_nearest(rng):
    m = pairwise_sq_distances(rng.normal(size=(8, 3)))
    bias = np.zeros((8, 8))
    bias[2, 6] = bias[6, 2] = -1e6
    graph = knn_graph(adjust_with_relative_pe(m, PositionalCodes(relative_bias=bias)), 1)
    assert graph.neighbors[2, 0] == 6
    assert graph.neighbors[6, 0] == 2


def test_bias_shape_mismatch_is_rejected():
    with pytest.raises(DimensionError):
        adjust_with_relative_pe(np.zeros((4, 4)), PositionalCodes(relative_bias=np.zeros((5, 5))))


def test_sincos_codes_are_unit_length():
    codes = sincos_codes(3, 4, 10)
    assert codes.shape == (12, 8)
    np.testing.assert_allclose(np.linalg.norm(codes, axis=1), 1.0)


def test_relative_bias_favors_nearby_positions():
    bias = relative_position_bias(4, 4, 16)
    np.testing.assert_array_equal(bias, bias.T)
    # node 5 = (1, 1): its right neighbor scores lower than the far corner
    assert bias[5, 6] < bias[5, 15]


def test_two_nodes_point_at_each_other():
    graph = knn_graph(pairwise_sq_distances(np.array([[0.0], [1.0]])), 1)
    assert graph.neighbors.tolist() == [[1], [0]]


def test_equidistant_ties_pick_lowest_indices():
    graph = knn_graph(np.ones((4, 4)) - np.eye(4), 2)
    assert graph.neighbors.tolist() == [[1, 2], [0, 2], [0, 1], [0, 1]]


def test_dilated_selection_matches_brute_force(rng):
    x = rng.normal(size=(16, 4))
    graph = knn_graph(pairwise_sq_distances(x), 3, dilation=2)
    dist = brute_force_distances(x)
    for i in range(16):
        candidates = [j for j in np.argsort(dist[i], kind="stable") if j != i]
        assert graph.neighbors[i].tolist() == [candidates[0], candidates[2], candidates[4]]
    graph.check_invariants()


def test_selection_matches_exhaustive_sort_for_every_k_and_dilation():
    rng = np.random.default_rng(2024)
    for instance in range(200):
        n, d = int(rng.integers(2, 65)), int(rng.integers(1, 17))
        # every other instance uses small integers so distance ties are common
        x = rng.integers(-2, 3, size=(n, d)).astype(float) if instance % 2 else rng.normal(size=(n, d))
        dist = pairwise_sq_distances(x).data
        ranked = np.array([sorted((j for j in range(n) if j != i), key=lambda j: (dist[i, j], j))
                           for i in range(n)])
        for k in range(1, n):
            for dilation in range(1, (n - 1) // k + 1):
                graph = knn_graph(dist, k, dilation)
                np.testing.assert_array_equal(graph.neighbors, ranked[:, ::dilation][:, :k],
                                              err_msg=f"N={n} D={d} K={k} d={dilation}")


def test_too_many_neighbors_is_insufficient():
    with pytest.raises(InsufficientNodesError):
        knn_graph(np.zeros((5, 5)), 3, dilation=2)


def test_zero_k_is_a_config_error():
    with pytest.raises(ConfigError):
        knn_graph(np.zeros((5, 5)), 0)


def test_batched_graphs_are_built_per_image(rng):
    x = rng.normal(size=(3, 9, 4))
    graph = build_graph(x, 2)
    assert graph.batched
    np.testing.assert_array_equal(graph[1].neighbors, build_graph(x[1], 2).neighbors)


def test_permuted_graph_matches_graph_of_permuted_features(rng):
    x = rng.normal(size=(10, 3))
    perm = rng.permutation(10)
    shuffled = np.empty_like(x)
    shuffled[perm] = x
    np.testing.assert_array_equal(build_graph(shuffled, 3).neighbors, build_graph(x, 3).permuted(perm).neighbors)


def test_check_invariants_rejects_self_loop():
    with pytest.raises(DimensionError):
        Graph(np.array([[0], [0]]), k=1).check_invariants()


@pytest.mark.parametrize("layer, expected", [(1, 1), (4, 1), (5, 2), (16, 4)])
def test_dilation_for_layer(layer, expected):
    assert dilation_for_layer(layer) == expected


def test_dilation_is_clamped_on_small_graphs():
    assert dilation_for_layer(16, k=9, num_nodes=20) == 2


def test_dilation_rejects_layer_zero():
    with pytest.raises(ConfigError):
        dilation_for_layer(0)


def test_edge_list_and_dot_export(tmp_path, rng):
    graph = build_graph(rng.normal(size=(6, 2)), 2)
    count = write_edge_list(graph, tmp_path / "g.edges.txt")
    lines = (tmp_path / "g.edges.txt").read_text().splitlines()
    assert count == 12 == len(lines)
    assert lines[0] == f"0 {graph.neighbors[0, 0]} 0"

    write_dot(graph, tmp_path / "g.dot", center=3, grid_w=3)
    dot = (tmp_path / "g.dot").read_text()
    assert "shape=star" in dot
    assert dot.count("->") == 2
