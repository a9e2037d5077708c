#!/usr/bin/env python3
"""
🧱 ViG Blocks - Grapher and FFN residual modules

Grapher:  X1 = BN(X·W_in);  G = knn(X1);  Y = DropPath(BN(GELU(BN(GraphConv(X1, G)))·W_out)) + X
FFN:      Z = DropPath(BN(GELU(BN(Y·W1))·W2)) + Y

Features carry a leading batch axis: (B, N, D). Batch norm pools statistics
over every image and node of the batch.
"""

import logging
from typing import Callable, Optional, Union

import numpy as np

from graph_construction import Graph, PositionalCodes, build_graph, effective_k
from graph_conv import ConvVariant, GraphConvParams, graph_conv
from tensor_core import (
    STANDARD,
    BatchNorm,
    Linear,
    Mode,
    ParameterGroup,
    Tensor,
    add,
    as_mode,
    gelu,
    mul,
)
from vig_errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

GraphObserver = Callable[[Graph], None]


def drop_path(x: Tensor, rate: float, mode: Union[Mode, str],
              rng: Optional[np.random.Generator] = None) -> Tensor:
    """Stochastic depth: zero the whole branch per sample, scale survivors by 1/(1 − rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"drop path rate must lie in [0, 1), got {rate}", field="drop_path_rate")
    if rate == 0.0 or as_mode(mode) is Mode.EVAL:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    samples = x.shape[0] if x.ndim == 3 else 1
    keep = rng.random(samples) >= rate
    mask = (keep / (1.0 - rate)).astype(x.data.dtype)
    mask = mask.reshape((samples,) + (1,) * (x.ndim - 1)) if x.ndim == 3 else mask.reshape(())
    return mul(x, Tensor(mask, x.dtype))


class GrapherParams(ParameterGroup):
    def __init__(self, dim: int, k: int = 9, dilation: int = 1, conv: str = ConvVariant.MAX_RELATIVE_CONCAT,
                 heads: int = 4, drop_path_rate: float = 0.0, use_fc: bool = True,
                 relative_bias: Optional[np.ndarray] = None, dtype: str = STANDARD):
        self.dim, self.k, self.dilation = dim, k, dilation
        self.drop_path_rate = drop_path_rate
        self.use_fc = use_fc
        self.codes = PositionalCodes(relative_bias=relative_bias)
        if use_fc:
            self.fc_in = Linear(dim, dim, dtype=dtype)
            self.bn_in = BatchNorm(dim, dtype)
            hidden = 2 * dim
        else:
            hidden = dim
        self.conv = GraphConvParams(conv, dim, hidden, heads, dtype)
        self.bn_conv = BatchNorm(hidden, dtype)
        if use_fc:
            self.fc_out = Linear(hidden, dim, dtype=dtype)
        self.bn_out = BatchNorm(dim, dtype)

    def neighbors_for(self, num_nodes: int):
        """(K, dilation) actually used on a graph of num_nodes nodes."""
        k = effective_k(self.k, num_nodes)
        return k, max(1, min(self.dilation, (num_nodes - 1) // k))


class FFNParams(ParameterGroup):
    def __init__(self, dim: int, ratio: int = 4, drop_path_rate: float = 0.0, dtype: str = STANDARD):
        self.dim, self.ratio = dim, ratio
        self.drop_path_rate = drop_path_rate
        self.fc1 = Linear(dim, ratio * dim, dtype=dtype)
        self.bn1 = BatchNorm(ratio * dim, dtype)
        self.fc2 = Linear(ratio * dim, dim, dtype=dtype)
        self.bn2 = BatchNorm(dim, dtype)


class ViGBlockParams(ParameterGroup):
    def __init__(self, grapher: GrapherParams, ffn: Optional[FFNParams] = None):
        self.grapher = grapher
        if ffn is not None:
            self.ffn = ffn

    @property
    def dim(self) -> int:
        return self.grapher.dim


def _check_width(x: Tensor, dim: int) -> None:
    if x.shape[-1] != dim:
        raise DimensionError(f"block of width {dim} got features {x.shape}")


def grapher_forward(x: Tensor, p: GrapherParams, mode: Union[Mode, str] = Mode.EVAL,
                    rng: Optional[np.random.Generator] = None,
                    on_graph: Optional[GraphObserver] = None) -> Tensor:
    mode = as_mode(mode)
    _check_width(x, p.dim)
    nodes = p.bn_in(p.fc_in(x), mode) if p.use_fc else x

    k, dilation = p.neighbors_for(x.shape[-2])
    graph = build_graph(nodes, k, dilation, p.codes)
    if on_graph is not None:
        on_graph(graph)

    branch = gelu(p.bn_conv(graph_conv(nodes, graph, p.conv), mode))
    branch = p.bn_out(p.fc_out(branch) if p.use_fc else branch, mode)
    return add(drop_path(branch, p.drop_path_rate, mode, rng), x)


def ffn_forward(y: Tensor, p: FFNParams, mode: Union[Mode, str] = Mode.EVAL,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    mode = as_mode(mode)
    _check_width(y, p.dim)
    branch = gelu(p.bn1(p.fc1(y), mode))
    branch = p.bn2(p.fc2(branch), mode)
    return add(drop_path(branch, p.drop_path_rate, mode, rng), y)


def vig_block_forward(x: Tensor, block: ViGBlockParams, mode: Union[Mode, str] = Mode.EVAL,
                      rng: Optional[np.random.Generator] = None,
                      on_graph: Optional[GraphObserver] = None) -> Tensor:
    out = grapher_forward(x, block.grapher, mode, rng, on_graph)
    ffn = getattr(block, "ffn", None)
    return ffn_forward(out, ffn, mode, rng) if ffn is not None else out
