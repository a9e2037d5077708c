#!/usr/bin/env python3
"""
🔗 Graph Convolution - aggregate neighbor features, then a multi-head update

Five aggregation variants share one update step: the aggregated features are
split into h contiguous heads and each head is multiplied by its own weight
(no bias), outputs concatenated.

    max_relative         max_j (x_i − x_j)                       width D
    max_relative_concat  [x_i ‖ max_j (x_i − x_j)]               width 2D
    edge                 max_j GELU(x_i·W_c + (x_j − x_i)·W_d)   width D
    gin                  (1 + ε)·x_i + Σ_j x_j                   width D
    sage                 [x_i ‖ mean_j(x_j)·W_nb]                width 2D
"""

import logging
from enum import Enum
from typing import Tuple

from graph_construction import Graph
from tensor_core import (
    STANDARD,
    Parameter,
    ParameterGroup,
    Tensor,
    add,
    concat,
    fan_in_init,
    gather_neighbors,
    gelu,
    grouped_matmul,
    matmul,
    mean,
    mul,
    reduce_max_over_set,
    reshape,
    sub,
    sum_,
    take_rows,
    zeros_init,
)
from vig_errors import DimensionError, HeadSplitError

logger = logging.getLogger(__name__)


class ConvVariant(str, Enum):
    MAX_RELATIVE = "max_relative"
    MAX_RELATIVE_CONCAT = "max_relative_concat"
    EDGE = "edge"
    GIN = "gin"
    SAGE = "sage"


_CONCAT_VARIANTS = {ConvVariant.MAX_RELATIVE_CONCAT, ConvVariant.SAGE}


def aggregated_width(variant: ConvVariant, d_in: int) -> int:
    return 2 * d_in if ConvVariant(variant) in _CONCAT_VARIANTS else d_in


class GraphConvParams(ParameterGroup):
    """Weights of one graph convolution D_in → D_out with h update heads."""

    def __init__(self, variant, d_in: int, d_out: int, heads: int = 4, dtype: str = STANDARD):
        self.variant = ConvVariant(variant)
        self.d_in, self.d_out, self.heads = d_in, d_out, heads
        self.d_agg = aggregated_width(self.variant, d_in)
        if heads < 1 or self.d_agg % heads or d_out % heads:
            raise HeadSplitError(
                f"{heads} heads do not divide aggregated width {self.d_agg} and output width {d_out}"
            )
        block_in = self.d_agg // heads
        self.update = Parameter("update", (heads, block_in, d_out // heads), dtype, fan_in_init(block_in))

        if self.variant is ConvVariant.EDGE:
            self.edge_weight = Parameter("edge_weight", (2 * d_in, d_in), dtype, fan_in_init(2 * d_in))
        elif self.variant is ConvVariant.GIN:
            self.eps = Parameter("eps", (1,), dtype, zeros_init)
        elif self.variant is ConvVariant.SAGE:
            self.neighbor_weight = Parameter("neighbor_weight", (d_in, d_in), dtype, fan_in_init(d_in))

    def macs(self, num_nodes: int, k: int) -> Tuple[int, int]:
        """(aggregation, update) multiply-accumulates for one image."""
        n, d = num_nodes, self.d_in
        if self.variant is ConvVariant.EDGE:
            aggregate_macs = n * d * d + n * k * d * d + n * k * d
        elif self.variant is ConvVariant.SAGE:
            aggregate_macs = n * k * d + n * d * d
        else:
            aggregate_macs = n * k * d
        update_macs = n * self.d_agg * self.d_out // self.heads
        return aggregate_macs, update_macs


def _with_set_axis(x: Tensor) -> Tensor:
    """(..., N, D) -> (..., N, 1, D) so it broadcasts against gathered neighbors."""
    return reshape(x, x.shape[:-1] + (1, x.shape[-1]))


def aggregate(x: Tensor, graph: Graph, params: GraphConvParams) -> Tensor:
    if x.shape[-1] != params.d_in:
        raise DimensionError(f"features have width {x.shape[-1]}, conv expects {params.d_in}")
    if graph.neighbors.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"graph over {graph.neighbors.shape[:-1]} nodes, features {x.shape}")

    neighbors = gather_neighbors(x, graph.neighbors)
    variant = params.variant

    if variant in (ConvVariant.MAX_RELATIVE, ConvVariant.MAX_RELATIVE_CONCAT):
        relative = reduce_max_over_set(sub(_with_set_axis(x), neighbors), axis=-2)
        if variant is ConvVariant.MAX_RELATIVE:
            return relative
        return concat([x, relative], axis=-1)

    if variant is ConvVariant.EDGE:
        w = params.edge_weight.value
        d = params.d_in
        center = _with_set_axis(matmul(x, take_rows(w, 0, d)))
        offsets = matmul(sub(neighbors, _with_set_axis(x)), take_rows(w, d, 2 * d))
        return reduce_max_over_set(gelu(add(center, offsets)), axis=-2)

    if variant is ConvVariant.GIN:
        self_term = mul(add(1.0, params.eps.value), x)
        return add(self_term, sum_(neighbors, axis=-2))

    neighborhood = matmul(mean(neighbors, axis=-2), params.neighbor_weight.value)
    return concat([x, neighborhood], axis=-1)


def multi_head_update(x_agg: Tensor, params: GraphConvParams) -> Tensor:
    width = x_agg.shape[-1]
    if width % params.heads:
        raise HeadSplitError(f"{params.heads} heads do not divide width {width}")
    if width != params.d_agg:
        raise DimensionError(f"aggregated width {width} != expected {params.d_agg}")
    return grouped_matmul(x_agg, params.update.value)


def graph_conv(x: Tensor, graph: Graph, params: GraphConvParams) -> Tensor:
    return multi_head_update(aggregate(x, graph, params), params)
