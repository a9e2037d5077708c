#!/usr/bin/env python3
"""
🏗️ Model Zoo - isotropic and pyramid ViG networks from declarative configs

Named presets reproduce the architecture tables (vig-ti/s/b, pvig-ti/s/m/b)
plus two desk-scale configs: `micro` for gradient checks and `pvig-toy` for
training runs on synthetic shapes. Models can be built structurally (shapes
only) so the large presets can be counted without allocating weights.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from graph_construction import Graph, dilation_for_layer, relative_position_bias
from graph_conv import ConvVariant
from tensor_core import (
    DTYPES,
    BatchNorm,
    Conv2d,
    Linear,
    Mode,
    Parameter,
    ParameterGroup,
    Tensor,
    add,
    as_mode,
    gelu,
    load_checkpoint,
    mean,
    normal_init,
    patchify,
    reshape,
    save_checkpoint,
)
from vig_blocks import FFNParams, GrapherParams, ViGBlockParams, vig_block_forward
from vig_errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

ISOTROPIC = "isotropic"
PYRAMID = "pyramid"


@dataclass
class ModelConfig:
    kind: str = ISOTROPIC
    name: Optional[str] = None
    depth: int = 12
    dim: int = 192
    depths: Tuple[int, ...] = (2, 2, 6, 2)
    dims: Tuple[int, ...] = (48, 96, 240, 384)
    ffn_ratio: int = 4
    k: Optional[int] = None
    k_min: int = 9
    k_max: int = 18
    heads: int = 4
    conv: str = ConvVariant.MAX_RELATIVE_CONCAT.value
    image_size: Tuple[int, int] = (224, 224)
    in_channels: int = 3
    num_classes: int = 1000
    drop_path_rate: float = 0.0
    stem: str = "conv"
    patch_size: int = 16
    head_hidden: int = 1024
    use_grapher_fc: bool = True
    use_ffn: bool = True
    absolute_pe: bool = True
    relative_pe: Optional[bool] = None
    relative_sign: float = -1.0
    dtype: str = "f32"

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}", field="preset")
        values = dict(PRESETS[name], name=name)
        values.update(overrides)
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        values = dict(values)
        if "preset" in values:
            base = values.pop("preset")
            return cls.from_preset(base, **values)
        for key in values:
            if key not in known:
                raise ConfigError("unknown configuration key", field=key)
        for key in ("depths", "dims", "image_size"):
            if key in values and values[key] is not None:
                values[key] = tuple(values[key])
        cfg = cls(**values)
        try:
            cfg.validate()
        except TypeError as exc:
            raise ConfigError(f"wrong value type: {exc}", field="config") from exc
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def is_pyramid(self) -> bool:
        return self.kind == PYRAMID

    @property
    def uses_relative_pe(self) -> bool:
        return self.is_pyramid if self.relative_pe is None else bool(self.relative_pe)

    @property
    def stage_dims(self) -> Tuple[int, ...]:
        return tuple(self.dims) if self.is_pyramid else (self.dim,)

    @property
    def stage_depths(self) -> Tuple[int, ...]:
        return tuple(self.depths) if self.is_pyramid else (self.depth,)

    @property
    def input_divisor(self) -> int:
        if self.is_pyramid:
            return 2 ** (len(self.dims) + 1)
        return self.patch_size if self.stem == "patch" else 16

    def validate(self) -> None:
        if self.kind not in (ISOTROPIC, PYRAMID):
            raise ConfigError(f"must be {ISOTROPIC!r} or {PYRAMID!r}", field="kind")
        try:
            ConvVariant(self.conv)
        except ValueError:
            raise ConfigError(f"unknown variant {self.conv!r}", field="conv") from None
        if self.dtype not in DTYPES:
            raise ConfigError(f"must be one of {sorted(DTYPES)}", field="dtype")
        if self.stem not in ("conv", "patch"):
            raise ConfigError("must be 'conv' or 'patch'", field="stem")
        if len(self.image_size) != 2:
            raise ConfigError("expects [height, width]", field="image_size")
        for axis, extent in zip(("height", "width"), self.image_size):
            if extent <= 0 or extent % self.input_divisor:
                raise ConfigError(f"{axis} {extent} must be a positive multiple of {self.input_divisor}",
                                  field="image_size")
        if self.is_pyramid:
            if len(self.dims) != len(self.depths) or not self.dims:
                raise ConfigError("dims and depths need one entry per stage", field="dims")
            if any(d < 1 for d in self.depths):
                raise ConfigError("every stage needs at least one block", field="depths")
            if self.dims[0] % 2:
                raise ConfigError("first stage width must be even for the stem", field="dims")
        else:
            if self.depth < 1:
                raise ConfigError("must be ≥ 1", field="depth")
            if self.stem == "conv" and self.dim % 8:
                raise ConfigError("conv stem needs a width divisible by 8", field="dim")
        if self.k is not None and self.k < 1:
            raise ConfigError("must be ≥ 1", field="k")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError("need 1 ≤ k_min ≤ k_max", field="k_min")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("must lie in [0, 1)", field="drop_path_rate")
        if self.heads < 1:
            raise ConfigError("must be ≥ 1", field="heads")
        for key in ("num_classes", "head_hidden", "ffn_ratio", "in_channels", "patch_size"):
            if getattr(self, key) < 1:
                raise ConfigError("must be ≥ 1", field=key)


PRESETS: Dict[str, dict] = {
    "vig-ti": {"kind": ISOTROPIC, "depth": 12, "dim": 192},
    "vig-s": {"kind": ISOTROPIC, "depth": 16, "dim": 320},
    "vig-b": {"kind": ISOTROPIC, "depth": 16, "dim": 640},
    "pvig-ti": {"kind": PYRAMID, "dims": (48, 96, 240, 384), "depths": (2, 2, 6, 2), "k": 9},
    "pvig-s": {"kind": PYRAMID, "dims": (80, 160, 400, 640), "depths": (2, 2, 6, 2), "k": 9},
    "pvig-m": {"kind": PYRAMID, "dims": (96, 192, 384, 768), "depths": (2, 2, 16, 2), "k": 9},
    "pvig-b": {"kind": PYRAMID, "dims": (128, 256, 512, 1024), "depths": (2, 2, 18, 2), "k": 9},
    "micro": {
        "kind": ISOTROPIC, "depth": 2, "dim": 8, "k": 3, "stem": "patch", "patch_size": 4,
        "image_size": (12, 12), "num_classes": 4, "head_hidden": 16, "dtype": "f64",
    },
    "pvig-toy": {
        "kind": PYRAMID, "dims": (32, 64, 128), "depths": (2, 2, 2), "k": 9,
        "image_size": (32, 32), "num_classes": 10, "head_hidden": 256,
    },
}

# Published figures per preset: params (M), FLOPs (B) at 224×224, ImageNet top-1/top-5 (%).
PUBLISHED_SIZES: Dict[str, Dict[str, float]] = {
    "vig-ti": {"params_m": 7.1, "flops_b": 1.3, "top1": 73.9, "top5": 92.0},
    "vig-s": {"params_m": 22.7, "flops_b": 4.5, "top1": 80.4, "top5": 95.2},
    "vig-b": {"params_m": 86.8, "flops_b": 17.7, "top1": 82.3, "top5": 95.9},
    "pvig-ti": {"params_m": 10.7, "flops_b": 1.7, "top1": 78.2, "top5": 94.2},
    "pvig-s": {"params_m": 27.3, "flops_b": 4.6, "top1": 82.1, "top5": 96.0},
    "pvig-m": {"params_m": 51.7, "flops_b": 8.9, "top1": 83.1, "top5": 96.4},
    "pvig-b": {"params_m": 92.6, "flops_b": 16.8, "top1": 83.7, "top5": 96.5},
}

# Ablations on the vig-ti base: conv variant -> params (M), FLOPs (B), top-1.
CONV_ABLATION_REFERENCE = {
    "edge": {"params_m": 7.2, "flops_b": 2.4, "top1": 74.3},
    "gin": {"params_m": 7.0, "flops_b": 1.3, "top1": 72.8},
    "sage": {"params_m": 7.3, "flops_b": 1.6, "top1": 74.0},
    "max_relative_concat": {"params_m": 7.1, "flops_b": 1.3, "top1": 73.9},
}
MODULE_ABLATION_REFERENCE = {
    (False, False): {"params_m": 5.8, "flops_b": 1.4, "top1": 67.0},
    (True, False): {"params_m": 4.4, "flops_b": 1.4, "top1": 73.4},
    (False, True): {"params_m": 7.7, "flops_b": 1.3, "top1": 73.6},
    (True, True): {"params_m": 7.1, "flops_b": 1.3, "top1": 73.9},
}
K_ABLATION_REFERENCE = {3: 72.2, 6: 73.4, 9: 73.6, 12: 73.6, 15: 73.5, 20: 73.3, "9-18": 73.9}
HEADS_ABLATION_REFERENCE = {1: (1.6, 74.2), 2: (1.4, 74.0), 4: (1.3, 73.9), 6: (1.2, 73.7), 8: (1.2, 73.7)}


def ablation_reference(cfg: "ModelConfig") -> Dict[str, object]:
    """Published ablation rows matching a vig-ti variant; empty for other models."""
    if cfg.name != "vig-ti":
        return {}
    rows: Dict[str, object] = {}
    if cfg.conv in CONV_ABLATION_REFERENCE:
        rows["conv"] = CONV_ABLATION_REFERENCE[cfg.conv]
    modules = (cfg.use_grapher_fc, cfg.use_ffn)
    if modules in MODULE_ABLATION_REFERENCE:
        rows["modules"] = MODULE_ABLATION_REFERENCE[modules]
    k_key = cfg.k if cfg.k is not None else f"{cfg.k_min}-{cfg.k_max}"
    if k_key in K_ABLATION_REFERENCE:
        rows["k"] = {"top1": K_ABLATION_REFERENCE[k_key]}
    if cfg.heads in HEADS_ABLATION_REFERENCE:
        flops, top1 = HEADS_ABLATION_REFERENCE[cfg.heads]
        rows["heads"] = {"flops_b": flops, "top1": top1}
    return rows


def load_config(path: Union[str, Path]) -> ModelConfig:
    """JSON document mirroring ModelConfig; {"preset": name, ...} starts from a preset."""
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", field="config") from exc
    if not isinstance(values, dict):
        raise ConfigError("top level must be an object", field="config")
    return ModelConfig.from_dict(values)


def k_schedule(layer: int, depth: int, k_min: int = 9, k_max: int = 18) -> int:
    """Neighbors for 1-based layer `layer`, growing linearly from k_min to k_max."""
    if depth < 2:
        return k_min
    return int(np.floor(k_min + (k_max - k_min) * (layer - 1) / (depth - 1) + 0.5))


# --------------------------------------------------------------------------
# Structure
# --------------------------------------------------------------------------

class ConvBN(ParameterGroup):
    def __init__(self, c_in: int, c_out: int, stride: int, act: bool, dtype: str):
        self.conv = Conv2d(c_in, c_out, 3, stride, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype)
        self.act = act

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        out = self.bn(self.conv(x), mode)
        return gelu(out) if self.act else out


class PatchStem(ParameterGroup):
    def __init__(self, patch: int, c_in: int, dim: int, dtype: str):
        self.patch = patch
        self.proj = Linear(patch * patch * c_in, dim, dtype=dtype)
        self.bn = BatchNorm(dim, dtype)

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        batch, height, width, _ = x.shape
        tokens = self.bn(self.proj(patchify(x, self.patch)), mode)
        return reshape(tokens, (batch, height // self.patch, width // self.patch, tokens.shape[-1]))


class ConvStem(ParameterGroup):
    def __init__(self, layers: List[ConvBN]):
        self.layers = layers

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        for layer in self.layers:
            x = layer(x, mode)
        return x


class Stage(ParameterGroup):
    def __init__(self, blocks: List[ViGBlockParams], grid: Tuple[int, int],
                 downsample: Optional[ConvBN] = None):
        if downsample is not None:
            self.downsample = downsample
        self.blocks = blocks
        self.grid = grid

    @property
    def dim(self) -> int:
        return self.blocks[0].dim


class ClassifierHead(ParameterGroup):
    """mean-pool → FC → BN → GELU → FC(+bias)."""

    def __init__(self, dim: int, hidden: int, num_classes: int, dtype: str):
        self.fc1 = Linear(dim, hidden, dtype=dtype)
        self.bn = BatchNorm(hidden, dtype)
        self.fc2 = Linear(hidden, num_classes, bias=True, dtype=dtype)

    def __call__(self, tokens: Tensor, mode: Mode) -> Tensor:
        pooled = mean(tokens, axis=1)
        return self.fc2(gelu(self.bn(self.fc1(pooled), mode)))


class Model(ParameterGroup):
    def __init__(self, cfg: ModelConfig, stem: ParameterGroup, pos_embed: Optional[Parameter],
                 stages: List[Stage], head: ClassifierHead, seed: int = 0):
        self.stem = stem
        if pos_embed is not None:
            self.pos_embed = pos_embed
        self.stages = stages
        self.head = head
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)

    @property
    def num_blocks(self) -> int:
        return sum(len(stage.blocks) for stage in self.stages)

    def blocks(self) -> List[Tuple[int, Stage, ViGBlockParams]]:
        """(1-based global layer index, stage, block) for every block."""
        out, layer = [], 0
        for stage in self.stages:
            for block in stage.blocks:
                layer += 1
                out.append((layer, stage, block))
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())


def _stem_grid(cfg: ModelConfig) -> Tuple[int, int]:
    height, width = cfg.image_size
    if cfg.is_pyramid:
        return height // 4, width // 4
    scale = cfg.patch_size if cfg.stem == "patch" else 16
    return height // scale, width // scale


def _build_stem(cfg: ModelConfig) -> ParameterGroup:
    c, dt = cfg.in_channels, cfg.dtype
    if cfg.is_pyramid:
        d = cfg.dims[0]
        return ConvStem([
            ConvBN(c, d // 2, 2, True, dt),
            ConvBN(d // 2, d, 2, True, dt),
            ConvBN(d, d, 1, True, dt),
        ])
    if cfg.stem == "patch":
        return PatchStem(cfg.patch_size, c, cfg.dim, dt)
    d = cfg.dim
    return ConvStem([
        ConvBN(c, d // 8, 2, True, dt),
        ConvBN(d // 8, d // 4, 2, True, dt),
        ConvBN(d // 4, d // 2, 2, True, dt),
        ConvBN(d // 2, d, 2, True, dt),
        ConvBN(d, d, 1, False, dt),
    ])


def _block(cfg: ModelConfig, dim: int, k: int, dilation: int, rate: float,
           relative_bias: Optional[np.ndarray]) -> ViGBlockParams:
    grapher = GrapherParams(dim, k=k, dilation=dilation, conv=cfg.conv, heads=cfg.heads,
                            drop_path_rate=rate, use_fc=cfg.use_grapher_fc,
                            relative_bias=relative_bias, dtype=cfg.dtype)
    ffn = FFNParams(dim, cfg.ffn_ratio, rate, cfg.dtype) if cfg.use_ffn else None
    return ViGBlockParams(grapher, ffn)


def _finish(cfg: ModelConfig, stages: List[Stage], materialize: bool, seed: int) -> Model:
    grid = _stem_grid(cfg)
    pos_embed = None
    if cfg.absolute_pe:
        pos_embed = Parameter("pos_embed", (grid[0] * grid[1], cfg.stage_dims[0]), cfg.dtype, normal_init(0.02))
    head = ClassifierHead(cfg.stage_dims[-1], cfg.head_hidden, cfg.num_classes, cfg.dtype)
    model = Model(cfg, _build_stem(cfg), pos_embed, stages, head, seed)
    if materialize:
        model.materialize(np.random.default_rng(seed))
    logger.info(f"🧱 Built {cfg.name or cfg.kind} ViG: {model.num_blocks} blocks, "
                f"{model.param_count() / 1e6:.2f}M params")
    return model


def drop_path_schedule(rate: float, total: int) -> List[float]:
    """Per-block rates growing linearly from 0 at the first block to `rate` at the last."""
    return [float(r) for r in np.linspace(0.0, rate, total)]


def _drop_path_rates(cfg: ModelConfig) -> List[float]:
    return drop_path_schedule(cfg.drop_path_rate, sum(cfg.stage_depths))


def set_drop_path_rate(model: Model, rate: float) -> Model:
    """Re-apply the linear stochastic-depth schedule to a built model."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError("must lie in [0, 1)", field="drop_path_rate")
    rates = drop_path_schedule(rate, model.num_blocks)
    for (_, _, block), block_rate in zip(model.blocks(), rates):
        block.grapher.drop_path_rate = block_rate
        ffn = getattr(block, "ffn", None)
        if ffn is not None:
            ffn.drop_path_rate = block_rate
    model.cfg = dataclasses.replace(model.cfg, drop_path_rate=rate)
    logger.info(f"🎲 Drop-path rate set to {rate} over {model.num_blocks} blocks")
    return model


def build_isotropic(cfg: ModelConfig, materialize: bool = True, seed: int = 0) -> Model:
    cfg.validate()
    if cfg.is_pyramid:
        raise ConfigError("expected an isotropic config", field="kind")
    grid = _stem_grid(cfg)
    nodes = grid[0] * grid[1]
    rates = _drop_path_rates(cfg)
    blocks = []
    for layer in range(1, cfg.depth + 1):
        k = cfg.k if cfg.k is not None else k_schedule(layer, cfg.depth, cfg.k_min, cfg.k_max)
        dilation = dilation_for_layer(layer, k, nodes)
        relative = (relative_position_bias(grid[0], grid[1], cfg.dim, cfg.relative_sign)
                    if cfg.uses_relative_pe else None)
        blocks.append(_block(cfg, cfg.dim, k, dilation, rates[layer - 1], relative))
    return _finish(cfg, [Stage(blocks, grid)], materialize, seed)


def build_pyramid(cfg: ModelConfig, materialize: bool = True, seed: int = 0) -> Model:
    cfg.validate()
    if not cfg.is_pyramid:
        raise ConfigError("expected a pyramid config", field="kind")
    grid = _stem_grid(cfg)
    rates = _drop_path_rates(cfg)
    stages, layer = [], 0
    for index, (dim, depth) in enumerate(zip(cfg.dims, cfg.depths)):
        downsample = None
        if index > 0:
            downsample = ConvBN(cfg.dims[index - 1], dim, 2, False, cfg.dtype)
            grid = (grid[0] // 2, grid[1] // 2)
        nodes = grid[0] * grid[1]
        relative = (relative_position_bias(grid[0], grid[1], dim, cfg.relative_sign)
                    if cfg.uses_relative_pe else None)
        blocks = []
        for _ in range(depth):
            layer += 1
            k = cfg.k if cfg.k is not None else k_schedule(layer, sum(cfg.depths), cfg.k_min, cfg.k_max)
            dilation = dilation_for_layer(layer, k, nodes)
            blocks.append(_block(cfg, dim, k, dilation, rates[layer - 1], relative))
        stages.append(Stage(blocks, grid, downsample))
    return _finish(cfg, stages, materialize, seed)


def build_model(cfg: ModelConfig, materialize: bool = True, seed: int = 0) -> Model:
    return build_pyramid(cfg, materialize, seed) if cfg.is_pyramid else build_isotropic(cfg, materialize, seed)


# --------------------------------------------------------------------------
# Forward
# --------------------------------------------------------------------------

LayerObserver = Callable[[int, Graph], None]
BlockObserver = Callable[[int, Tensor], None]


def forward(model: Model, images: Union[Tensor, np.ndarray], mode: Union[Mode, str] = Mode.EVAL,
            on_graph: Optional[LayerObserver] = None, on_block: Optional[BlockObserver] = None) -> Tensor:
    """Logits (B, num_classes) for channels-last images (B, H, W, C)."""
    cfg = model.cfg
    mode = as_mode(mode)
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images), cfg.dtype)
    expected = tuple(cfg.image_size) + (cfg.in_channels,)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError(f"expected images of shape (B, {', '.join(map(str, expected))}), got {images.shape}")

    grid = model.stem(images, mode)
    batch = grid.shape[0]
    tokens = reshape(grid, (batch, grid.shape[1] * grid.shape[2], grid.shape[3]))
    pos_embed = getattr(model, "pos_embed", None)
    if pos_embed is not None:
        tokens = add(tokens, pos_embed.value)

    layer = 0
    for stage in model.stages:
        downsample = getattr(stage, "downsample", None)
        if downsample is not None:
            grid = downsample(grid, mode)
            tokens = reshape(grid, (batch, grid.shape[1] * grid.shape[2], grid.shape[3]))
        for block in stage.blocks:
            layer += 1
            observer = (lambda g, at=layer: on_graph(at, g)) if on_graph is not None else None
            tokens = vig_block_forward(tokens, block, mode, model.rng, observer)
            if on_block is not None:
                on_block(layer, tokens)
        grid = reshape(tokens, (batch,) + stage.grid + (tokens.shape[-1],))

    return model.head(tokens, mode)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_model(model: Model, path: Union[str, Path]) -> dict:
    params = {name: p.value.data for name, p in model.named_parameters().items()}
    return save_checkpoint(path, params, model.named_buffers())


def load_model(model: Model, path: Union[str, Path]) -> Model:
    """Fill a built model from an archive; names and shapes must match exactly."""
    params, buffers = load_checkpoint(path)
    expected = model.named_parameters()
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ConfigError(f"checkpoint does not match the model (missing {missing[:3]}, unexpected {extra[:3]})",
                          field="checkpoint")
    for name, param in expected.items():
        param.value = Tensor(params[name], param.dtype)
    model.load_buffers(buffers)
    logger.info(f"📂 Loaded {len(params)} tensors from {path}")
    return model
