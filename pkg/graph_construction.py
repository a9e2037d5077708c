#!/usr/bin/env python3
"""
🕸️ Graph Construction - dynamic KNN graphs over patch nodes

Every Grapher rebuilds its graph from the current node features: squared
Euclidean distances, an optional positional bias, then K nearest neighbors
with dilated selection. Graph building is discrete, so nothing here records
on the gradient tape.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np

from tensor_core import Tensor
from vig_errors import ConfigError, DimensionError, InsufficientNodesError

logger = logging.getLogger(__name__)

ArrayLike = Union[Tensor, np.ndarray]


def _array(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class Graph:
    """Directed KNN graph; neighbors[..., i, :] lists the sources j of edges j → i."""

    neighbors: np.ndarray
    k: int
    dilation: int = 1

    @property
    def num_nodes(self) -> int:
        return self.neighbors.shape[-2]

    @property
    def batched(self) -> bool:
        return self.neighbors.ndim == 3

    def __getitem__(self, image: int) -> "Graph":
        if not self.batched:
            raise DimensionError("graph is not batched")
        return Graph(self.neighbors[image], self.k, self.dilation)

    def permuted(self, perm: np.ndarray) -> "Graph":
        """Relabel node i as perm[i]."""
        perm = np.asarray(perm)
        relabeled = np.empty_like(self.neighbors)
        relabeled[..., perm, :] = perm[self.neighbors]
        return Graph(relabeled, self.k, self.dilation)

    def check_invariants(self) -> None:
        nb = self.neighbors
        n = self.num_nodes
        if nb.shape[-1] != self.k:
            raise DimensionError(f"neighbor lists have length {nb.shape[-1]}, expected {self.k}")
        if nb.size and (nb.min() < 0 or nb.max() >= n):
            raise DimensionError("neighbor index out of range")
        own = np.arange(n)[:, None]
        if np.any(nb == own):
            raise DimensionError("self loop in neighbor list")
        ordered = np.sort(nb, axis=-1)
        if np.any(ordered[..., 1:] == ordered[..., :-1]):
            raise DimensionError("duplicate neighbor in a list")

    def edges(self) -> Iterable[Tuple[int, int, int]]:
        """(node, neighbor, rank) triples of a single-image graph."""
        if self.batched:
            raise DimensionError("select one image before listing edges")
        for i, row in enumerate(self.neighbors):
            for rank, j in enumerate(row):
                yield i, int(j), rank


@dataclass
class PositionalCodes:
    absolute: Optional[Tensor] = None
    relative_bias: Optional[np.ndarray] = None


def pairwise_sq_distances(x: ArrayLike) -> Tensor:
    """M[..., i, j] = ‖x_i − x_j‖² for x of shape (..., N, D)."""
    data = _array(x).astype(np.float64, copy=False)
    if data.ndim < 2 or data.shape[-2] < 2:
        raise InsufficientNodesError(f"need at least 2 nodes, got shape {data.shape}")
    sq = np.sum(data * data, axis=-1)
    inner = np.matmul(data, np.swapaxes(data, -1, -2))
    dist = sq[..., :, None] + sq[..., None, :] - 2.0 * inner
    dist = 0.5 * (dist + np.swapaxes(dist, -1, -2))
    np.maximum(dist, 0.0, out=dist)
    n = data.shape[-2]
    dist[..., np.arange(n), np.arange(n)] = 0.0
    return Tensor._wrap(dist)


def sincos_codes(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal code per grid position, unit length, shape (H·W, dim')."""
    dim = max(4, dim - dim % 4)
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    out_y = ys.reshape(-1, 1) * omega[None, :]
    out_x = xs.reshape(-1, 1) * omega[None, :]
    codes = np.concatenate([np.sin(out_y), np.cos(out_y), np.sin(out_x), np.cos(out_x)], axis=1)
    return codes / np.linalg.norm(codes, axis=1, keepdims=True)


def relative_position_bias(grid_h: int, grid_w: int, dim: int, sign: float = -1.0) -> np.ndarray:
    codes = sincos_codes(grid_h, grid_w, dim)
    bias = sign * (codes @ codes.T)
    return 0.5 * (bias + bias.T)


def adjust_with_relative_pe(m: ArrayLike, codes: PositionalCodes) -> Tensor:
    dist = _array(m)
    bias = codes.relative_bias
    if bias is None:
        return Tensor._wrap(dist.copy())
    if dist.shape[-2:] != bias.shape:
        raise DimensionError(f"distance matrix {dist.shape} does not match bias {bias.shape}")
    return Tensor._wrap(dist + bias)


def knn_graph(m: ArrayLike, k: int, dilation: int = 1) -> Graph:
    """K neighbors per node: stride-`dilation` picks from the K·dilation nearest.

    Ties go to the lower node index; the node itself is never a candidate.
    """
    if k < 1 or dilation < 1:
        raise ConfigError(f"k={k} and dilation={dilation} must be positive", field="k")
    dist = np.array(_array(m), dtype=np.float64)
    n = dist.shape[-1]
    if k * dilation > n - 1:
        raise InsufficientNodesError(f"K·dilation = {k * dilation} exceeds N−1 = {n - 1}")
    dist[..., np.arange(n), np.arange(n)] = np.inf
    order = np.argsort(dist, axis=-1, kind="stable")
    neighbors = np.ascontiguousarray(order[..., : k * dilation : dilation])
    return Graph(neighbors=neighbors, k=k, dilation=dilation)


def effective_k(k: int, num_nodes: int) -> int:
    return max(1, min(k, num_nodes - 1))


def dilation_for_layer(layer: int, k: Optional[int] = None, num_nodes: Optional[int] = None) -> int:
    """⌈l/4⌉ for 1-based layer l; with k and num_nodes, clamped so K·d ≤ N−1."""
    if layer < 1:
        raise ConfigError(f"layer index must be ≥ 1, got {layer}", field="layer")
    dilation = math.ceil(layer / 4)
    if k is not None and num_nodes is not None:
        dilation = min(dilation, max(1, (num_nodes - 1) // effective_k(k, num_nodes)))
    return dilation


def build_graph(x: ArrayLike, k: int, dilation: int = 1,
                codes: Optional[PositionalCodes] = None) -> Graph:
    """G(X) for features of shape (..., N, D)."""
    dist = pairwise_sq_distances(x)
    if codes is not None and codes.relative_bias is not None:
        dist = adjust_with_relative_pe(dist, codes)
    return knn_graph(dist, k, dilation)


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------

def write_edge_list(graph: Graph, path: Union[str, Path]) -> int:
    """Lines "i j rank" (j is the rank-th neighbor of i). Returns the edge count."""
    lines = [f"{i} {j} {rank}" for i, j, rank in graph.edges()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"🕸️ Wrote {len(lines)} edges to {path}")
    return len(lines)


def write_dot(graph: Graph, path: Union[str, Path], center: Optional[int] = None,
              grid_w: Optional[int] = None) -> None:
    """Graphviz rendering; the center node is drawn as a star, its neighbors filled."""
    highlighted = set(int(j) for j in graph.neighbors[center]) if center is not None else set()
    out: List[str] = ["digraph vig {", "  node [shape=circle, width=0.2, label=\"\"];"]
    for i in range(graph.num_nodes):
        attrs = []
        if grid_w:
            attrs.append(f'pos="{i % grid_w},{-(i // grid_w)}!"')
        if i == center:
            attrs += ["shape=star", "style=filled", 'fillcolor="red"']
        elif i in highlighted:
            attrs += ["style=filled", 'fillcolor="orange"']
        out.append(f"  {i} [{', '.join(attrs)}];" if attrs else f"  {i};")
    for i, j, _ in graph.edges():
        if center is None or i == center:
            out.append(f"  {j} -> {i};")
    out.append("}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
