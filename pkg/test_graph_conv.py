#!/usr/bin/env python3
"""
Graph convolution tests - aggregation variants, multi-head update, equivariance
"""

import numpy as np
import pytest
from scipy.special import erf

from graph_construction import Graph, build_graph
from graph_conv import ConvVariant, GraphConvParams, aggregate, graph_conv, multi_head_update
from tensor_core import HIGH, GradTape, Tensor, backward, grad_check_params, matmul, sum_
from vig_errors import DimensionError, HeadSplitError


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def conv_params(variant, d_in, d_out, heads=1, seed=0):
    params = GraphConvParams(variant, d_in, d_out, heads, HIGH)
    params.materialize(np.random.default_rng(seed))
    return params


def t64(values):
    return Tensor(np.asarray(values, dtype=np.float64), HIGH)


TOY_NEIGHBORS = np.array([[1, 2], [0, 3], [3, 1], [2, 0]])


def loop_aggregate(variant, x, neighbors, params):
    rows = []
    for i, nb in enumerate(neighbors):
        xi, xs = x[i], x[nb]
        if variant == "max_relative":
            rows.append(np.max(xi - xs, axis=0))
        elif variant == "max_relative_concat":
            rows.append(np.concatenate([xi, np.max(xi - xs, axis=0)]))
        elif variant == "edge":
            w = params.edge_weight.value.data
            d = x.shape[1]
            z = [xi @ w[:d] + (xj - xi) @ w[d:] for xj in xs]
            rows.append(np.max([v * 0.5 * (1 + erf(v / np.sqrt(2))) for v in z], axis=0))
        elif variant == "gin":
            rows.append((1 + params.eps.value.data[0]) * xi + xs.sum(axis=0))
        else:
            rows.append(np.concatenate([xi, xs.mean(axis=0) @ params.neighbor_weight.value.data]))
    return np.array(rows)


def test_max_relative_with_equal_neighbors_is_zero():
    x = t64(np.ones((4, 3)))
    out = aggregate(x, Graph(TOY_NEIGHBORS, 2), conv_params("max_relative", 3, 3))
    np.testing.assert_array_equal(out.data, np.zeros((4, 3)))


def test_gin_sums_neighbors():
    x = np.arange(12.0).reshape(4, 3)
    out = aggregate(t64(x), Graph(TOY_NEIGHBORS, 2), conv_params("gin", 3, 3))
    np.testing.assert_allclose(out.data[0], x[0] + x[1] + x[2])


@pytest.mark.parametrize("variant", [v.value for v in ConvVariant])
def test_aggregation_matches_direct_loop(variant, rng):
    x = rng.normal(size=(4, 6))
    params = conv_params(variant, 6, 6, seed=3)
    if variant == "gin":
        params.eps.value = np.array([0.25])
    out = aggregate(t64(x), Graph(TOY_NEIGHBORS, 2), params)
    np.testing.assert_allclose(out.data, loop_aggregate(variant, x, TOY_NEIGHBORS, params), rtol=1e-10, atol=1e-12)


def test_single_head_equals_plain_matmul(rng):
    params = conv_params("max_relative", 6, 4)
    x = t64(rng.normal(size=(2, 5, 6)))
    np.testing.assert_array_equal(multi_head_update(x, params).data,
                                  matmul(x, Tensor(params.update.value.data[0], HIGH)).data)


def test_identity_heads_pass_input_through(rng):
    params = GraphConvParams("max_relative", 8, 8, heads=4, dtype=HIGH)
    params.update.value = np.stack([np.eye(2)] * 4)
    x = t64(rng.normal(size=(3, 8)))
    np.testing.assert_array_equal(multi_head_update(x, params).data, x.data)


def test_head_count_must_divide_widths():
    with pytest.raises(HeadSplitError):
        GraphConvParams("max_relative", 6, 6, heads=4)


def test_update_rejects_wrong_width(rng):
    with pytest.raises(DimensionError):
        multi_head_update(t64(rng.normal(size=(3, 4))), conv_params("max_relative_concat", 4, 4, heads=2))


def test_concat_variant_on_equal_rows_uses_only_center_half(rng):
    params = conv_params("max_relative_concat", 4, 4, heads=2)
    x = np.tile(rng.normal(size=4), (4, 1))
    out = graph_conv(t64(x), Graph(TOY_NEIGHBORS, 2), params).data
    w = params.update.value.data
    expected = np.concatenate([x[:, :4] @ w[0], np.zeros((4, 4)) @ w[1]], axis=1)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_micro_instance_matches_reference(rng):
    x = rng.normal(size=(5, 4))
    graph = build_graph(x, 2)
    params = conv_params("max_relative_concat", 4, 8, heads=2, seed=5)
    agg = loop_aggregate("max_relative_concat", x, graph.neighbors, params)
    w = params.update.value.data
    expected = np.concatenate([agg[:, :4] @ w[0], agg[:, 4:] @ w[1]], axis=1)
    np.testing.assert_allclose(graph_conv(t64(x), graph, params).data, expected, rtol=1e-10)


@pytest.mark.parametrize("variant", [v.value for v in ConvVariant])
def test_permutation_equivariance(variant, rng):
    x = rng.normal(size=(9, 4))
    perm = rng.permutation(9)
    shuffled = np.empty_like(x)
    shuffled[perm] = x
    params = conv_params(variant, 4, 4, heads=2, seed=2)
    graph = build_graph(x, 3)
    out = graph_conv(t64(x), graph, params).data
    out_shuffled = graph_conv(t64(shuffled), graph.permuted(perm), params).data
    np.testing.assert_allclose(out_shuffled[perm], out, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("variant", ["max_relative", "gin", "sage"])
def test_neighbor_order_does_not_matter(variant, rng):
    x = rng.normal(size=(2, 12, 6))
    params = conv_params(variant, 6, 6, heads=3, seed=4)
    if variant == "gin":
        params.eps.value = np.array([0.3])
    graph = build_graph(x, 5)
    shuffled = np.stack([np.stack([rng.permutation(row) for row in image]) for image in graph.neighbors])
    out = graph_conv(t64(x), graph, params).data
    out_shuffled = graph_conv(t64(x), Graph(shuffled, graph.k), params).data
    np.testing.assert_allclose(out_shuffled, out, rtol=1e-12, atol=1e-14)


def test_graph_must_cover_all_nodes(rng):
    with pytest.raises(DimensionError):
        graph_conv(t64(rng.normal(size=(5, 4))), Graph(TOY_NEIGHBORS, 2), conv_params("max_relative", 4, 4))


@pytest.mark.parametrize("variant", [v.value for v in ConvVariant])
def test_parameter_gradients_match_finite_differences(variant, rng):
    x = t64(rng.normal(size=(6, 4)))
    graph = build_graph(x, 2)
    params = conv_params(variant, 4, 4, heads=2, seed=9)
    if variant == "gin":
        params.eps.value = np.array([0.1])
    weights = t64(rng.normal(size=(6, 4)))
    errors = grad_check_params(lambda: sum_(graph_conv(x, graph, params) * weights),
                               params.named_parameters())
    assert max(errors.values()) <= 1e-6


def test_macs_per_variant():
    assert GraphConvParams("max_relative", 8, 8, heads=2).macs(10, 3) == (10 * 3 * 8, 10 * 8 * 8 // 2)
    assert GraphConvParams("max_relative_concat", 8, 16, heads=4).macs(10, 3)[1] == 10 * 16 * 16 // 4
    assert GraphConvParams("sage", 8, 16, heads=1).macs(10, 3)[0] == 10 * 3 * 8 + 10 * 64


def test_tape_gradient_reaches_every_variant_parameter(rng):
    x = t64(rng.normal(size=(6, 4)))
    params = conv_params("edge", 4, 4)
    with GradTape() as tape:
        tape.watch_parameters(params.named_parameters())
        loss = sum_(graph_conv(x, build_graph(x, 2), params))
    grads = backward(loss, tape)
    assert set(grads) == {"update", "edge_weight"}
    assert np.abs(grads["edge_weight"]).sum() > 0
