#!/usr/bin/env python3
"""
Model zoo tests - presets, configs, k schedule, forward, checkpoints
"""

import json

import numpy as np
import pytest

from graph_conv import ConvVariant
from model_zoo import (
    PUBLISHED_SIZES,
    ModelConfig,
    ablation_reference,
    build_model,
    drop_path_schedule,
    forward,
    k_schedule,
    load_config,
    load_model,
    save_model,
    set_drop_path_rate,
)
from tensor_core import GradTape, Mode, backward, grad_check, grad_check_params
from train_harness import label_smoothing_ce
from vig_errors import ConfigError, DimensionError


@pytest.fixture
def micro():
    return build_model(ModelConfig.from_preset("micro"), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(5)


@pytest.mark.parametrize("preset", sorted(PUBLISHED_SIZES))
def test_preset_parameter_counts_match_published_sizes(preset):
    model = build_model(ModelConfig.from_preset(preset), materialize=False)
    expected = PUBLISHED_SIZES[preset]["params_m"] * 1e6
    assert abs(model.param_count() - expected) / expected <= 0.10


def test_vig_ti_layout():
    model = build_model(ModelConfig.from_preset("vig-ti"), materialize=False)
    assert model.num_blocks == 12
    assert model.stages[0].grid == (14, 14)
    assert model.pos_embed.shape == (196, 192)
    ks = [block.grapher.k for _, _, block in model.blocks()]
    assert ks[0] == 9 and ks[-1] == 18
    assert [block.grapher.dilation for _, _, block in model.blocks()][:5] == [1, 1, 1, 1, 2]


def test_pyramid_stage_grids():
    model = build_model(ModelConfig.from_preset("pvig-ti"), materialize=False)
    assert [stage.grid for stage in model.stages] == [(56, 56), (28, 28), (14, 14), (7, 7)]
    assert [stage.dim for stage in model.stages] == [48, 96, 240, 384]
    assert model.stages[0].blocks[0].grapher.codes.relative_bias.shape == (3136, 3136)


@pytest.mark.parametrize("layer, depth, expected", [(1, 12, 9), (12, 12, 18), (6, 12, 13), (16, 16, 18), (1, 1, 9)])
def test_k_schedule(layer, depth, expected):
    assert k_schedule(layer, depth) == expected


def test_indivisible_resolution_is_a_config_error():
    with pytest.raises(ConfigError) as info:
        ModelConfig.from_preset("vig-ti", image_size=(225, 225))
    assert info.value.field == "image_size"


def test_unknown_key_names_the_field():
    with pytest.raises(ConfigError) as info:
        ModelConfig.from_dict({"kind": "isotropic", "widht": 3})
    assert info.value.field == "widht"


def test_unknown_preset():
    with pytest.raises(ConfigError):
        ModelConfig.from_preset("vig-xl")


def test_load_config_starts_from_preset(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps({"preset": "pvig-toy", "num_classes": 7, "dims": [16, 32, 64]}))
    cfg = load_config(path)
    assert cfg.is_pyramid
    assert cfg.num_classes == 7
    assert cfg.dims == (16, 32, 64)
    assert cfg.uses_relative_pe


def test_config_round_trips_through_dict():
    cfg = ModelConfig.from_preset("pvig-s")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_ablation_rows_follow_the_variant():
    rows = ablation_reference(ModelConfig.from_preset("vig-ti", conv="edge", heads=1, k=9, use_ffn=False))
    assert rows["conv"]["flops_b"] == 2.4
    assert rows["modules"]["top1"] == 73.4
    assert rows["k"] == {"top1": 73.6}
    assert rows["heads"]["top1"] == 74.2
    assert ablation_reference(ModelConfig.from_preset("pvig-ti")) == {}


def test_micro_forward_shape_and_finiteness(micro, rng):
    logits = forward(micro, rng.normal(size=(2, 12, 12, 3)), Mode.EVAL)
    assert logits.shape == (2, 4)
    assert np.isfinite(logits.data).all()


def test_identical_images_give_identical_logits(micro, rng):
    image = rng.normal(size=(1, 12, 12, 3))
    logits = forward(micro, np.concatenate([image, image]), Mode.EVAL).data
    np.testing.assert_array_equal(logits[0], logits[1])


def test_zero_classifier_gives_equal_logits(micro):
    micro.head.fc2.weight.value = np.zeros(micro.head.fc2.weight.shape)
    logits = forward(micro, np.zeros((2, 12, 12, 3)), Mode.EVAL).data
    assert (logits == logits[0, 0]).all()


def test_forward_rejects_wrong_image_shape(micro):
    with pytest.raises(DimensionError):
        forward(micro, np.zeros((2, 16, 16, 3)))


def test_observers_see_every_layer(micro, rng):
    graphs, blocks = [], []
    forward(micro, rng.normal(size=(2, 12, 12, 3)), Mode.EVAL,
            on_graph=lambda layer, g: graphs.append((layer, g.neighbors.shape)),
            on_block=lambda layer, tokens: blocks.append(layer))
    assert graphs == [(1, (2, 9, 3)), (2, (2, 9, 3))]
    assert blocks == [1, 2]


def test_pyramid_toy_forward_in_train_mode(rng):
    model = build_model(ModelConfig.from_preset("pvig-toy", dims=(8, 16, 32), depths=(1, 1, 1),
                                                head_hidden=16, k=3), seed=1)
    logits = forward(model, rng.normal(size=(2, 32, 32, 3)), Mode.TRAIN)
    assert logits.shape == (2, 10)


def test_checkpoint_restores_identical_logits(micro, tmp_path, rng):
    images = rng.normal(size=(2, 12, 12, 3))
    forward(micro, images, Mode.TRAIN)
    save_model(micro, tmp_path / "micro.vigw")
    restored = load_model(build_model(ModelConfig.from_preset("micro"), seed=99), tmp_path / "micro.vigw")
    np.testing.assert_array_equal(forward(restored, images).data, forward(micro, images).data)


def test_checkpoint_for_another_model_is_rejected(micro, tmp_path):
    save_model(micro, tmp_path / "micro.vigw")
    other = build_model(ModelConfig.from_preset("micro", depth=3))
    with pytest.raises(ConfigError):
        load_model(other, tmp_path / "micro.vigw")


@pytest.mark.parametrize("variant", [v.value for v in ConvVariant])
def test_every_parameter_receives_gradient(variant, rng):
    model = build_model(ModelConfig.from_preset("micro", conv=variant), seed=6)
    images = rng.normal(size=(4, 12, 12, 3))
    params = model.named_parameters()
    with GradTape() as tape:
        tape.watch_parameters(params)
        loss = label_smoothing_ce(forward(model, images, Mode.TRAIN), [0, 1, 2, 3], 0.1)
    grads = backward(loss, tape)
    assert set(grads) == set(params)
    silent = [name for name, grad in grads.items() if not np.any(grad != 0)]
    assert silent == []


def test_drop_path_schedule_is_linear_over_blocks(micro):
    assert drop_path_schedule(0.3, 4) == pytest.approx([0.0, 0.1, 0.2, 0.3])
    set_drop_path_rate(micro, 0.2)
    assert micro.cfg.drop_path_rate == 0.2
    assert [block.grapher.drop_path_rate for _, _, block in micro.blocks()] == pytest.approx([0.0, 0.2])
    assert [block.ffn.drop_path_rate for _, _, block in micro.blocks()] == pytest.approx([0.0, 0.2])
    with pytest.raises(ConfigError):
        set_drop_path_rate(micro, 1.0)


def test_checkpoint_loads_without_manifest(micro, tmp_path, rng):
    images = rng.normal(size=(2, 12, 12, 3))
    forward(micro, images, Mode.TRAIN)
    save_model(micro, tmp_path / "micro.vigw")
    (tmp_path / "micro.vigw.json").unlink()
    restored = load_model(build_model(ModelConfig.from_preset("micro"), seed=99), tmp_path / "micro.vigw")
    for name, arr in micro.named_buffers().items():
        np.testing.assert_array_equal(restored.named_buffers()[name], arr)
    np.testing.assert_array_equal(forward(restored, images).data, forward(micro, images).data)


@pytest.mark.slow
def test_micro_model_gradient_check(micro, rng):
    images = rng.normal(size=(2, 12, 12, 3))
    targets = [1, 3]
    errors = grad_check_params(lambda: label_smoothing_ce(forward(micro, images, Mode.TRAIN), targets, 0.1),
                               micro.named_parameters())
    assert max(errors.values()) <= 1e-4
    input_error = grad_check(lambda x: label_smoothing_ce(forward(micro, x, Mode.TRAIN), targets, 0.1), images)
    assert input_error <= 1e-4
