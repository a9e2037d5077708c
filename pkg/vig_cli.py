#!/usr/bin/env python3
"""
🖥️ ViG command line

    python vig_cli.py count --preset vig-ti --res 224
    python vig_cli.py make-dataset --n 6000 --classes 10 --seed 7 --out data/shapes
    python vig_cli.py train --preset pvig-toy --data data/shapes --epochs 20 --out runs/toy
    python vig_cli.py grad-check --preset micro

Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from vig_settings import apply_thread_cap, configure_logging, load_settings

SETTINGS = load_settings()
apply_thread_cap(SETTINGS.threads)

import numpy as np  # noqa: E402

from analysis import (  # noqa: E402
    PROBE_KINDS,
    ProbeConfig,
    build_probe_from_config,
    count_macs,
    diversity_profile,
    load_probe_config,
    probe_comparison,
)
from model_zoo import (  # noqa: E402
    PUBLISHED_SIZES,
    ModelConfig,
    ablation_reference,
    build_model,
    forward,
    load_config,
    load_model,
)
from graph_construction import write_dot, write_edge_list  # noqa: E402
from tensor_core import HIGH, Mode, grad_check, grad_check_params  # noqa: E402
from train_harness import (  # noqa: E402
    TrainConfig,
    TrainResult,
    evaluate,
    label_smoothing_ce,
    linear_baseline_accuracy,
    read_dataset,
    synth_shapes,
    train,
    write_dataset,
)
from vig_errors import ConfigError, LayerIndexError, UsageError, ViGError  # noqa: E402

logger = logging.getLogger(__name__)

GRAD_CHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _model_config(args, **overrides) -> ModelConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        return ModelConfig.from_dict({**cfg.to_dict(), **overrides}) if overrides else cfg
    return ModelConfig.from_preset(args.preset, **overrides)


def _resolution(args) -> dict:
    return {"image_size": (args.res, args.res)} if getattr(args, "res", None) else {}


def _data_paths(prefix: str):
    path = Path(prefix)
    if path.suffix == ".vigd":
        return path, path
    return Path(f"{prefix}.train.vigd"), Path(f"{prefix}.val.vigd")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    cfg = _model_config(args, **_resolution(args))
    model = build_model(cfg, materialize=False)
    print(json.dumps(cfg.to_dict(), indent=2))
    for layer, stage, block in model.blocks():
        g = block.grapher
        k, dilation = g.neighbors_for(stage.grid[0] * stage.grid[1])
        print(f"block {layer:>2}: grid {stage.grid[0]}×{stage.grid[1]} D={g.dim} K={k} d={dilation} "
              f"conv={g.conv.variant.value} drop_path={g.drop_path_rate:.3f}")
    if cfg.name in PUBLISHED_SIZES:
        print(f"reference: {PUBLISHED_SIZES[cfg.name]}")
        size = cfg.name.split("-")[-1]
        print(f"ImageNet recipe: {TrainConfig.imagenet_recipe(size)}")
    for axis, row in ablation_reference(cfg).items():
        print(f"ablation {axis}: {row}")
    return 0


def cmd_count(args) -> int:
    cfg = _model_config(args, **_resolution(args))
    model = build_model(cfg, materialize=False)
    stats = count_macs(model)
    print(f"params:      {stats.param_count:,} ({stats.param_count / 1e6:.2f}M)")
    print(f"MACs:        {stats.mac_count:,} ({stats.mac_count / 1e9:.2f}G)")
    print(f"graph MACs:  {stats.graph_mac_count:,} ({stats.graph_mac_count / 1e9:.2f}G)")
    print(f"total MACs:  {stats.total_macs:,} ({stats.total_macs / 1e9:.2f}G)")
    reference = PUBLISHED_SIZES.get(cfg.name)
    if reference and tuple(cfg.image_size) == (224, 224):
        param_dev = 100.0 * (stats.param_count / 1e6 - reference["params_m"]) / reference["params_m"]
        mac_dev = 100.0 * (stats.mac_count / 1e9 - reference["flops_b"]) / reference["flops_b"]
        print(f"vs published {cfg.name}: params {param_dev:+.1f}%, FLOPs {mac_dev:+.1f}%")
    if args.out:
        stats.to_csv(args.out)
        print(f"breakdown written to {args.out}")
    return 0


def _probe_config(choice: str, args) -> ProbeConfig:
    defaults = {"dim": args.dim, "k": args.k, "heads": args.heads}
    if choice in PROBE_KINDS:
        return ProbeConfig.from_dict({"kind": choice, **defaults})
    return load_probe_config(choice, **defaults)


def cmd_probe_diversity(args) -> int:
    first, second = _probe_config(args.a, args), _probe_config(args.b, args)
    if first.dim != second.dim:
        raise ConfigError(f"both stacks read the same input; widths {first.dim} and {second.dim} differ",
                          field="dim")
    x0 = np.random.default_rng(args.seed).normal(size=(1, args.nodes, first.dim))
    labels = (first.kind, second.kind) if first.kind != second.kind else (f"{first.kind}_a", f"{second.kind}_b")
    profiles = [diversity_profile(build_probe_from_config(cfg, args.depth, args.seed, args.nodes), x0)
                for cfg in (first, second)]
    frame = probe_comparison(*profiles, labels=labels)
    out = args.out or "diversity.csv"
    frame.to_csv(out, index=False)
    print(frame.to_string(index=False))
    print(f"γ(last)/γ(first): {labels[0]} {profiles[0].ratio():.4f}, {labels[1]} {profiles[1].ratio():.4f}")
    return 0


def _two_tone_image(cfg: ModelConfig) -> np.ndarray:
    height, width = cfg.image_size
    image = np.full((height, width, cfg.in_channels), -0.8)
    image[:, width // 2:] = 0.8
    return image


def cmd_export_graph(args) -> int:
    cfg = _model_config(args, **_resolution(args))
    model = build_model(cfg, seed=args.seed)
    if args.checkpoint:
        load_model(model, args.checkpoint)
    if not 1 <= args.layer <= model.num_blocks:
        raise LayerIndexError(f"layer {args.layer} out of range; valid layers are 1..{model.num_blocks}")

    if args.image:
        dataset = read_dataset(args.image)
        if not 0 <= args.index < len(dataset):
            raise LayerIndexError(f"image index {args.index} out of range 0..{len(dataset) - 1}")
        image = dataset.normalized([args.index])
    else:
        image = _two_tone_image(cfg)[None]

    captured = {}
    forward(model, image, Mode.EVAL, on_graph=lambda layer, g: captured.setdefault(layer, g))
    graph = captured[args.layer][0]
    stage = model.blocks()[args.layer - 1][1]
    grid_h, grid_w = stage.grid
    center = args.center if args.center is not None else (grid_h // 2) * grid_w + grid_w // 2
    if not 0 <= center < graph.num_nodes:
        raise LayerIndexError(f"center node {center} out of range 0..{graph.num_nodes - 1}")

    prefix = args.out or f"graph_layer{args.layer}"
    write_edge_list(graph, f"{prefix}.edges.txt")
    write_dot(graph, f"{prefix}.dot", center=center, grid_w=grid_w)
    neighbors = [int(j) for j in graph.neighbors[center]]
    print(f"layer {args.layer}: {graph.num_nodes} nodes, K={graph.k}, dilation={graph.dilation}")
    print(f"center node {center} (row {center // grid_w}, col {center % grid_w}) neighbors: "
          + ", ".join(f"{j}@({j // grid_w},{j % grid_w})" for j in neighbors))
    return 0


def cmd_make_dataset(args) -> int:
    val_n = args.val_n if args.val_n is not None else max(args.classes, args.n // 6)
    train_set = synth_shapes(args.n, args.res, args.classes, args.seed, "train")
    val_set = synth_shapes(val_n, args.res, args.classes, args.seed + 1, "val")
    prefix = args.out or "shapes"
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    train_path, val_path = _data_paths(prefix)
    write_dataset(train_set, train_path)
    write_dataset(val_set, val_path)
    print(f"wrote {len(train_set)} training samples to {train_path} and {len(val_set)} to {val_path}")
    if args.baseline:
        print(f"linear pixel baseline val top-1: {linear_baseline_accuracy(train_set, val_set):.3f}")
    return 0


def _load_sets(args):
    train_path, val_path = _data_paths(args.data)
    train_set = read_dataset(train_path, "train")
    val_set = read_dataset(val_path, "val") if val_path.exists() else None
    return train_set, val_set


def cmd_train(args) -> int:
    train_set, val_set = _load_sets(args)
    height, width, _ = train_set.resolution
    cfg = _model_config(args, image_size=(height, width), num_classes=train_set.num_classes)
    model = build_model(cfg, seed=args.seed)
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, warmup_epochs=min(args.warmup, args.epochs),
        weight_decay=args.weight_decay, label_smoothing=args.smoothing, drop_path_rate=args.drop_path,
        seed=args.seed, serial=args.serial or SETTINGS.serial,
        checkpoint_path=str(out / "model.vigw"), history_path=str(out / "history.csv"),
    )
    result: TrainResult = train(model, train_set, val_set, train_cfg)
    print(result.history.to_string(index=False))
    print(f"best val top-1 {result.best_top1:.4f} at epoch {result.best_epoch}; "
          f"checkpoint {result.checkpoint}, history {train_cfg.history_path}")
    return 0


def cmd_eval(args) -> int:
    path = Path(args.data)
    if path.suffix != ".vigd":
        path = _data_paths(args.data)[1]
    dataset = read_dataset(path, "val")
    height, width, _ = dataset.resolution
    cfg = _model_config(args, image_size=(height, width), num_classes=dataset.num_classes)
    model = build_model(cfg, seed=args.seed)
    if args.checkpoint:
        load_model(model, args.checkpoint)
    top1, top5 = evaluate(model, dataset)
    print(f"top-1 {top1:.4f}  top-5 {top5:.4f}  ({len(dataset)} samples)")
    return 0


def cmd_grad_check(args) -> int:
    cfg = _model_config(args, dtype=HIGH, drop_path_rate=0.0)
    model = build_model(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    height, width = cfg.image_size
    images = rng.normal(size=(2, height, width, cfg.in_channels))
    targets = rng.integers(0, cfg.num_classes, size=2)

    def loss_of_params():
        return label_smoothing_ce(forward(model, images, Mode.TRAIN), targets, 0.1)

    errors = grad_check_params(loss_of_params, model.named_parameters(), args.step)
    input_error = grad_check(lambda x: label_smoothing_ce(forward(model, x, Mode.TRAIN), targets, 0.1),
                             images, args.step)
    worst_name = max(errors, key=errors.get)
    worst = max(max(errors.values()), input_error)
    print(f"checked {len(errors)} parameter tensors; worst parameter {worst_name}: {errors[worst_name]:.3e}")
    print(f"input gradient error: {input_error:.3e}")
    print(f"max relative error: {worst:.3e}")
    if worst > GRAD_CHECK_TOLERANCE:
        raise ViGError(f"gradient check failed: {worst:.3e} > {GRAD_CHECK_TOLERANCE:.0e}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _add_model_args(parser, default_preset: str) -> None:
    parser.add_argument("--preset", default=default_preset, help="named model preset")
    parser.add_argument("--config", help="JSON model config (overrides --preset)")
    parser.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vig", description="Vision GNN toolkit")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", help="print a config and its block layout")
    _add_model_args(p, "vig-ti")
    p.add_argument("--res", type=int)
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser("count", help="parameter and MAC accounting")
    _add_model_args(p, "vig-ti")
    p.add_argument("--res", type=int)
    p.add_argument("--out", help="CSV breakdown path")
    p.set_defaults(handler=cmd_count)

    p = sub.add_parser("probe-diversity", help="feature diversity of two stacks (default: ViG vs bare graph convs)")
    p.add_argument("--a", default="vig", help="first stack: 'vig', 'bare' or a JSON probe config")
    p.add_argument("--b", default="bare", help="second stack: 'vig', 'bare' or a JSON probe config")
    p.add_argument("--depth", type=int, default=12)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--nodes", type=int, default=196)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(handler=cmd_probe_diversity)

    p = sub.add_parser("export-graph", help="write the graph built at one block")
    _add_model_args(p, "micro")
    p.add_argument("--res", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--image", help="VIGD file holding the image")
    p.add_argument("--index", type=int, default=0, help="record index in --image")
    p.add_argument("--layer", type=int, default=1, help="1-based block index")
    p.add_argument("--center", type=int, help="node whose neighbors are listed")
    p.add_argument("--out", help="output prefix")
    p.set_defaults(handler=cmd_export_graph)

    p = sub.add_parser("make-dataset", help="generate synthetic shape datasets")
    p.add_argument("--n", type=int, default=6000)
    p.add_argument("--val-n", type=int)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--baseline", action="store_true", help="also report the linear pixel baseline")
    p.add_argument("--out", help="output prefix")
    p.set_defaults(handler=cmd_make_dataset)

    p = sub.add_parser("train", help="train on a VIGD dataset")
    _add_model_args(p, "pvig-toy")
    p.add_argument("--data", required=True, help="dataset prefix or .vigd path")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--smoothing", type=float, default=0.1)
    p.add_argument("--drop-path", type=float, help="stochastic depth at the last block (default: from the config)")
    p.add_argument("--serial", action="store_true", help="no prefetch thread")
    p.add_argument("--out", help="run directory")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="top-1/top-5 on a VIGD dataset")
    _add_model_args(p, "pvig-toy")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of every gradient")
    _add_model_args(p, "micro")
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(handler=cmd_grad_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return UsageError.exit_code
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging("DEBUG" if args.verbose else SETTINGS.log_level)
    try:
        return args.handler(args)
    except ViGError as exc:
        logger.error(f"❌ {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.exception(f"❌ Unexpected failure in {args.command}")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
