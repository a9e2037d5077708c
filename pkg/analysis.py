#!/usr/bin/env python3
"""
📊 Analysis - parameter/MAC accounting, feature-diversity probe, FFN Lipschitz bound
"""

import json
import logging
from dataclasses import dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from graph_construction import build_graph, dilation_for_layer
from graph_conv import ConvVariant, GraphConvParams, graph_conv
from model_zoo import ConvBN, Model, PatchStem, forward
from tensor_core import HIGH, Mode, ParameterGroup, Tensor, gelu_derivative
from vig_blocks import FFNParams, GrapherParams, ViGBlockParams, vig_block_forward
from vig_errors import ConfigError, ContractError

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Parameter and MAC accounting
# --------------------------------------------------------------------------

@dataclass
class LayerStats:
    name: str
    params: int
    macs: int
    graph_macs: int = 0


@dataclass
class ModelStats:
    """Counts for one image at `resolution`.

    mac_count follows the convention of published backbone tables: FC, conv
    and graph-update products plus neighbor aggregation. The N²·D pairwise
    distance builds of the dynamic graphs are kept apart in graph_mac_count.
    """

    param_count: int
    mac_count: int
    graph_mac_count: int
    resolution: Tuple[int, int]
    breakdown: List[LayerStats] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return self.mac_count + self.graph_mac_count

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([(s.name, s.params, s.macs) for s in self.breakdown],
                            columns=["name", "params", "macs"])

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)


def count_params(model: ParameterGroup) -> int:
    return sum(p.size for p in model.named_parameters().values())


def _group_params(group: ParameterGroup) -> int:
    return sum(p.size for p in group.named_parameters().values())


def _conv_macs(layer: ConvBN, height: int, width: int) -> Tuple[int, int, int]:
    conv = layer.conv
    out_h, out_w = conv.output_size(height, width)
    return out_h * out_w * conv.kernel * conv.kernel * conv.c_in * conv.c_out, out_h, out_w


def _grapher_macs(p: GrapherParams, nodes: int) -> Tuple[int, int]:
    d = p.dim
    k, _ = p.neighbors_for(nodes)
    aggregate_macs, update_macs = p.conv.macs(nodes, k)
    macs = aggregate_macs + update_macs
    if p.use_fc:
        macs += nodes * d * d + nodes * p.conv.d_out * d
    return macs, nodes * nodes * d


def count_macs(model: Model, resolution: Optional[Tuple[int, int]] = None) -> ModelStats:
    cfg = model.cfg
    height, width = resolution or cfg.image_size
    divisor = cfg.input_divisor
    if height % divisor or width % divisor or height <= 0 or width <= 0:
        raise ConfigError(f"{height}×{width} is not a multiple of {divisor}", field="resolution")

    rows: List[LayerStats] = []
    if isinstance(model.stem, PatchStem):
        patch = model.stem.patch
        h, w = height // patch, width // patch
        rows.append(LayerStats("stem", _group_params(model.stem),
                               h * w * model.stem.proj.d_in * model.stem.proj.d_out))
    else:
        h, w, macs = height, width, 0
        for layer in model.stem.layers:
            layer_macs, h, w = _conv_macs(layer, h, w)
            macs += layer_macs
        rows.append(LayerStats("stem", _group_params(model.stem), macs))

    pos_embed = getattr(model, "pos_embed", None)
    if pos_embed is not None:
        rows.append(LayerStats("pos_embed", pos_embed.size, 0))

    for s, stage in enumerate(model.stages):
        downsample = getattr(stage, "downsample", None)
        if downsample is not None:
            macs, h, w = _conv_macs(downsample, h, w)
            rows.append(LayerStats(f"stages.{s}.downsample", _group_params(downsample), macs))
        nodes = h * w
        for b, block in enumerate(stage.blocks):
            macs, graph_macs = _grapher_macs(block.grapher, nodes)
            rows.append(LayerStats(f"stages.{s}.blocks.{b}.grapher", _group_params(block.grapher),
                                   macs, graph_macs))
            ffn = getattr(block, "ffn", None)
            if ffn is not None:
                hidden = ffn.ratio * ffn.dim
                rows.append(LayerStats(f"stages.{s}.blocks.{b}.ffn", _group_params(ffn),
                                       2 * nodes * ffn.dim * hidden))

    head = model.head
    rows.append(LayerStats("head", _group_params(head),
                           head.fc1.d_in * head.fc1.d_out + head.fc2.d_in * head.fc2.d_out))

    stats = ModelStats(
        param_count=count_params(model),
        mac_count=sum(r.macs for r in rows),
        graph_mac_count=sum(r.graph_macs for r in rows),
        resolution=(height, width),
        breakdown=rows,
    )
    logger.info(f"📊 {cfg.name or cfg.kind}: {stats.param_count / 1e6:.2f}M params, "
                f"{stats.mac_count / 1e9:.2f}G MACs (+{stats.graph_mac_count / 1e9:.2f}G graph builds)")
    return stats


# --------------------------------------------------------------------------
# Feature diversity
# --------------------------------------------------------------------------

@dataclass
class DiversityProfile:
    entries: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def values(self) -> List[float]:
        return [v for _, v in self.entries]

    def ratio(self) -> float:
        """γ(last layer) / γ(first layer)."""
        first, last = self.entries[0][1], self.entries[-1][1]
        return last / first if first > 0 else float("inf")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.entries, columns=["layer", "value"])

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)


def feature_diversity(x: Union[Tensor, np.ndarray]) -> float:
    """γ(X) = sqrt(‖R‖₁·‖R‖∞) with R = X minus its column-mean row."""
    data = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    residual = np.abs(data - data.mean(axis=0, keepdims=True))
    max_col_sum = residual.sum(axis=0).max()
    max_row_sum = residual.sum(axis=1).max()
    return float(np.sqrt(max_col_sum * max_row_sum))


def _batch_diversity(tokens: Union[Tensor, np.ndarray]) -> float:
    data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    if data.ndim == 2:
        return feature_diversity(data)
    return float(np.mean([feature_diversity(sample) for sample in data]))


PROBE_KINDS = ("vig", "bare")


@dataclass
class ProbeConfig:
    """One side of a diversity comparison; `conv` None picks the kind's usual variant."""

    kind: str = "vig"
    dim: int = 64
    k: int = 9
    heads: int = 4
    conv: Optional[str] = None

    @classmethod
    def from_dict(cls, values: dict) -> "ProbeConfig":
        known = {f.name for f in fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError("unknown probe key", field=key)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.kind not in PROBE_KINDS:
            raise ConfigError(f"must be 'vig' or 'bare', got {self.kind!r}", field="kind")
        if self.conv is not None:
            try:
                ConvVariant(self.conv)
            except ValueError:
                raise ConfigError(f"unknown variant {self.conv!r}", field="conv") from None
        for key in ("dim", "k", "heads"):
            if getattr(self, key) < 1:
                raise ConfigError("must be ≥ 1", field=key)


def load_probe_config(path: Union[str, Path], **defaults) -> ProbeConfig:
    """JSON object with ProbeConfig keys; missing keys come from `defaults`."""
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read probe config {path}: {exc}", field="config") from exc
    if not isinstance(values, dict):
        raise ConfigError("top level must be an object", field="config")
    return ProbeConfig.from_dict({**defaults, **values})


class ProbeStack(ParameterGroup):
    """Block stack on raw node features for the diversity comparison.

    kind "vig" stacks full ViG blocks; kind "bare" stacks plain graph
    convolutions (max-relative unless told otherwise) with no residual,
    normalization or FFN.
    """

    def __init__(self, kind: str, layers: List[ParameterGroup], k: int):
        if kind not in PROBE_KINDS:
            raise ConfigError(f"probe kind must be 'vig' or 'bare', got {kind!r}", field="kind")
        self.kind = kind
        self.layers = layers
        self.k = k

    def run(self, x: Tensor, on_layer) -> Tensor:
        nodes = x.shape[-2]
        for layer_index, layer in enumerate(self.layers, start=1):
            if self.kind == "vig":
                x = vig_block_forward(x, layer, Mode.EVAL)
            else:
                k = min(self.k, nodes - 1)
                graph = build_graph(x, k, dilation_for_layer(layer_index, k, nodes))
                x = graph_conv(x, graph, layer)
            on_layer(layer_index, x)
        return x


def build_probe_stack(kind: str, depth: int = 12, dim: int = 64, k: int = 9, heads: int = 4,
                      seed: int = 0, num_nodes: int = 196, conv: Optional[str] = None) -> ProbeStack:
    if kind not in PROBE_KINDS:
        raise ConfigError(f"probe kind must be 'vig' or 'bare', got {kind!r}", field="kind")
    layers: List[ParameterGroup] = []
    for layer_index in range(1, depth + 1):
        dilation = dilation_for_layer(layer_index, k, num_nodes)
        if kind == "vig":
            variant = conv or ConvVariant.MAX_RELATIVE_CONCAT.value
            layers.append(ViGBlockParams(GrapherParams(dim, k, dilation, conv=variant, heads=heads, dtype=HIGH),
                                         FFNParams(dim, dtype=HIGH)))
        else:
            layers.append(GraphConvParams(conv or ConvVariant.MAX_RELATIVE, dim, dim, heads, HIGH))
    stack = ProbeStack(kind, layers, k)
    stack.materialize(np.random.default_rng(seed))
    return stack


def build_probe_from_config(cfg: ProbeConfig, depth: int, seed: int = 0, num_nodes: int = 196) -> ProbeStack:
    cfg.validate()
    return build_probe_stack(cfg.kind, depth, cfg.dim, cfg.k, cfg.heads, seed, num_nodes, cfg.conv)


def diversity_profile(target: Union[Model, ProbeStack], x0: Union[Tensor, np.ndarray]) -> DiversityProfile:
    """γ after every block (Model, ViG probe) or every raw graph conv (bare probe), eval mode."""
    profile = DiversityProfile()

    def record(layer: int, tokens: Tensor) -> None:
        profile.entries.append((layer, _batch_diversity(tokens)))

    if isinstance(target, ProbeStack):
        x = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0), HIGH)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        target.run(x, record)
    else:
        forward(target, x0, Mode.EVAL, on_block=record)
    return profile


def probe_comparison(first: DiversityProfile, second: DiversityProfile,
                     labels: Tuple[str, str] = ("vig", "bare")) -> pd.DataFrame:
    """Per-layer γ of two profiles side by side, one column per label."""
    if labels[0] == labels[1]:
        raise ConfigError("comparison columns need distinct labels", field="labels")
    frame = first.to_frame().rename(columns={"value": labels[0]})
    return frame.merge(second.to_frame().rename(columns={"value": labels[1]}), on="layer", how="outer")


# --------------------------------------------------------------------------
# FFN Lipschitz bound
# --------------------------------------------------------------------------

@lru_cache(maxsize=1)
def gelu_lipschitz() -> float:
    """sup |GELU'(x)|, attained near x = √2."""
    result = minimize_scalar(lambda x: -gelu_derivative(np.float64(x)), bounds=(0.0, 5.0), method="bounded",
                             options={"xatol": 1e-12})
    return float(-result.fun)


def _operator_bound(w: np.ndarray) -> float:
    absolute = np.abs(w)
    return float(max(absolute.sum(axis=0).max(), absolute.sum(axis=1).max()))


def folded_ffn_weights(p: FFNParams) -> Tuple[np.ndarray, np.ndarray]:
    """W1, W2 with the frozen batch-norm scaling folded into their columns."""
    for bn in (p.bn1, p.bn2):
        if not bn.state.frozen:
            raise ContractError("FFN batch-norm statistics must be frozen before bounding")
    folded = []
    for fc, bn in ((p.fc1, p.bn1), (p.fc2, p.bn2)):
        gain = bn.scale.value.data / np.sqrt(bn.state.running_var + bn.state.eps)
        folded.append(fc.weight.value.data.astype(np.float64) * gain[None, :])
    return folded[0], folded[1]


def ffn_lipschitz_bound(p: FFNParams, num_nodes: Optional[int] = None) -> float:
    """λ̂ with γ(FFN(X)) ≤ λ̂·γ(X).

    The branch term is L_σ·‖W1'‖·‖W2'‖ using max(‖·‖₁, ‖·‖∞). Passing
    num_nodes multiplies it by ‖I − J/N‖ = 2(N−1)/N, which the column-mean
    centering of feature_diversity needs for the inequality to be provable.
    """
    w1, w2 = folded_ffn_weights(p)
    branch = gelu_lipschitz() * _operator_bound(w1) * _operator_bound(w2)
    if num_nodes is not None:
        branch *= 2.0 * (num_nodes - 1) / num_nodes
    return 1.0 + branch
