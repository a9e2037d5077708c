#!/usr/bin/env python3
"""
Tensor core tests - ops, gradient tape, checkpoint archive
"""

import math

import numpy as np
import pytest

from tensor_core import (
    HIGH,
    BatchNormState,
    GradTape,
    Parameter,
    Tensor,
    add,
    backward,
    batch_norm,
    concat,
    conv2d,
    gather_neighbors,
    gelu,
    grad_check,
    grad_check_params,
    grouped_matmul,
    load_checkpoint,
    log_softmax,
    matmul,
    mean,
    mul,
    patchify,
    reduce_max_over_set,
    save_checkpoint,
    sum_,
    take_rows,
)
from vig_errors import (
    ContractError,
    DatasetFormatError,
    DegenerateBatchError,
    DimensionError,
    EmptyNeighborhoodError,
    LifecycleError,
    NonFiniteError,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(values):
    return Tensor(np.asarray(values, dtype=np.float64), HIGH)


def weighted_sum(out, weights):
    return sum_(mul(out, Tensor(weights, HIGH)))


# --------------------------------------------------------------------------
# Forward values
# --------------------------------------------------------------------------

def test_matmul_identity_is_exact():
    a = t64([[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul(t64(np.eye(2)), a).data, a.data)


def test_matmul_hand_value():
    assert matmul(t64([[1, 2]]), t64([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_rejects_mismatched_inner_extent():
    with pytest.raises(DimensionError):
        matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_gelu_values():
    out = gelu(t64([0.0, 10.0, 1.0])).data
    assert out[0] == 0.0
    assert abs(out[1] - 10.0) < 1e-6
    assert out[2] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-12)


def test_batch_norm_constant_column_is_zero():
    state = BatchNormState.fresh(1)
    out = batch_norm(t64([[3.0], [3.0], [3.0]]), t64([1.0]), t64([0.0]), state, "train")
    np.testing.assert_array_equal(out.data, np.zeros((3, 1)))


def test_batch_norm_unit_variance_column():
    state = BatchNormState.fresh(1)
    out = batch_norm(t64([[-1.0], [1.0]]), t64([1.0]), t64([0.0]), state, "train")
    np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-5)


def test_batch_norm_eval_with_unit_stats_is_identity_up_to_eps(rng):
    x = rng.normal(size=(5, 3))
    state = BatchNormState(np.zeros(3), np.ones(3) - 1e-5)
    out = batch_norm(t64(x), t64(np.ones(3)), t64(np.zeros(3)), state, "eval")
    np.testing.assert_allclose(out.data, x, rtol=1e-12)


def test_batch_norm_train_means_equal_shift(rng):
    shift = rng.normal(size=4)
    for _ in range(10):
        x = rng.normal(size=(int(rng.integers(4, 20)), 4)) * 3 + 1
        out = batch_norm(t64(x), t64(rng.uniform(0.5, 2, 4)), t64(shift), BatchNormState.fresh(4), "train")
        np.testing.assert_allclose(out.data.mean(axis=0), shift, atol=1e-5)


def test_batch_norm_updates_running_stats_only_in_train():
    state = BatchNormState.fresh(1)
    batch_norm(t64([[0.0], [2.0]]), t64([1.0]), t64([0.0]), state, "train")
    assert state.running_mean[0] == pytest.approx(0.1)
    assert state.running_var[0] == pytest.approx(0.9 + 0.1 * 2.0)
    before = state.running_mean.copy()
    batch_norm(t64([[5.0], [7.0]]), t64([1.0]), t64([0.0]), state, "eval")
    np.testing.assert_array_equal(state.running_mean, before)


def test_batch_norm_frozen_train_matches_eval(rng):
    x = t64(rng.normal(size=(6, 3)))
    state = BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2, 3), frozen=True)
    scale, shift = t64(np.ones(3)), t64(np.zeros(3))
    np.testing.assert_array_equal(batch_norm(x, scale, shift, state, "train").data,
                                  batch_norm(x, scale, shift, state, "eval").data)


def test_batch_norm_single_row_in_train_mode_fails():
    with pytest.raises(DegenerateBatchError):
        batch_norm(t64([[1.0, 2.0]]), t64([1.0, 1.0]), t64([0.0, 0.0]), BatchNormState.fresh(2), "train")


def test_reduce_max_values_and_single_row():
    assert reduce_max_over_set(t64([[1, 5], [3, 2]]), axis=0).data.tolist() == [3.0, 5.0]
    assert reduce_max_over_set(t64([[4, -1]]), axis=0).data.tolist() == [4.0, -1.0]


def test_reduce_max_empty_set_fails():
    with pytest.raises(EmptyNeighborhoodError):
        reduce_max_over_set(t64(np.zeros((0, 3))), axis=0)


def test_reduce_max_gradient_routes_to_argmax():
    rows = t64([[1, 5], [3, 2]])
    with GradTape() as tape:
        tape.watch("rows", rows)
        loss = sum_(reduce_max_over_set(rows, axis=0))
    assert backward(loss, tape)["rows"].tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_reduce_max_tie_routes_to_first_row():
    rows = t64([[2, 2], [2, 1]])
    with GradTape() as tape:
        tape.watch("rows", rows)
        loss = sum_(reduce_max_over_set(rows, axis=0))
    assert backward(loss, tape)["rows"].tolist() == [[1.0, 1.0], [0.0, 0.0]]


def test_grouped_matmul_matches_block_diagonal(rng):
    x = t64(rng.normal(size=(5, 6)))
    w = rng.normal(size=(2, 3, 4))
    block = np.zeros((6, 8))
    block[:3, :4], block[3:, 4:] = w[0], w[1]
    np.testing.assert_allclose(grouped_matmul(x, t64(w)).data, x.data @ block, rtol=1e-12)


def test_gather_neighbors_rows():
    x = t64(np.arange(8).reshape(4, 2))
    index = np.array([[1, 2], [0, 3], [3, 1], [2, 0]])
    out = gather_neighbors(x, index)
    assert out.shape == (4, 2, 2)
    np.testing.assert_array_equal(out.data[2], x.data[[3, 1]])


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    out = conv2d(t64(x), t64(w), stride=2, padding=1).data
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    assert out.shape == (2, 3, 3, 4)
    for b in range(2):
        for i in range(3):
            for j in range(3):
                window = padded[b, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                np.testing.assert_allclose(out[b, i, j], np.einsum("hwc,hwco->o", window, w), rtol=1e-10)


def test_patchify_orders_patches_row_major():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
    out = patchify(t64(x), 2).data
    assert out.shape == (1, 4, 4)
    assert out[0, 1].tolist() == [2.0, 3.0, 6.0, 7.0]


def test_nonfinite_output_is_an_error():
    with pytest.raises(NonFiniteError):
        add(t64([1.0]), t64([np.inf]))


def test_tensor_is_immutable():
    x = t64([1.0, 2.0])
    with pytest.raises(ValueError):
        x.data[0] = 5.0


# --------------------------------------------------------------------------
# Gradient tape
# --------------------------------------------------------------------------

def test_backward_sum_of_squares():
    x = t64([1.0, 2.0])
    with GradTape() as tape:
        tape.watch("x", x)
        loss = sum_(mul(x, x))
    assert backward(loss, tape)["x"].tolist() == [2.0, 4.0]


def test_unused_parameter_gets_zero_gradient():
    x, unused = t64([1.0, 2.0]), t64([[3.0, 4.0]])
    with GradTape() as tape:
        tape.watch("x", x)
        tape.watch("unused", unused)
        loss = sum_(x)
    grads = backward(loss, tape)
    np.testing.assert_array_equal(grads["unused"], np.zeros((1, 2)))


def test_backward_requires_scalar_loss():
    x = t64([1.0, 2.0])
    with GradTape() as tape:
        tape.watch("x", x)
        out = mul(x, x)
    with pytest.raises(ContractError):
        backward(out, tape)


def test_backward_twice_is_a_lifecycle_error():
    x = t64([1.0, 2.0])
    with GradTape() as tape:
        tape.watch("x", x)
        loss = sum_(x)
    backward(loss, tape)
    with pytest.raises(LifecycleError):
        backward(loss, tape)


def test_scaling_the_loss_scales_gradients_exactly(rng):
    x, w = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(4, 2)))

    def grads(factor):
        with GradTape() as tape:
            tape.watch("w", w)
            loss = mul(sum_(gelu(matmul(x, w))), factor)
        return backward(loss, tape)["w"]

    np.testing.assert_array_equal(grads(2.0), 2.0 * grads(1.0))


def test_unmaterialized_parameter_raises():
    p = Parameter("w", (2, 2))
    with pytest.raises(LifecycleError):
        _ = p.value
    p.materialize(np.random.default_rng(0))
    assert p.value.shape == (2, 2)


def test_grad_check_of_sum_is_tight(rng):
    assert grad_check(lambda x: sum_(x), rng.normal(size=(3, 4))) <= 1e-10


def test_grad_check_rejects_low_precision_tensor():
    with pytest.raises(ContractError):
        grad_check(lambda x: sum_(x), Tensor(np.ones(3), "f32"))


@pytest.mark.parametrize("name", [
    "gelu_matmul", "grouped_matmul", "batch_norm", "max_over_neighbors", "conv2d",
    "patchify", "log_softmax", "concat_mean", "take_rows",
])
def test_grad_check_per_op(name, rng):
    c = rng.normal(size=64)
    w = t64(rng.normal(size=(4, 3)))
    gw = t64(rng.normal(size=(2, 2, 3)))
    kernel = t64(rng.normal(size=(3, 3, 2, 3)))
    index = np.array([[1, 2], [0, 2], [3, 0], [1, 0]])

    cases = {
        "gelu_matmul": (rng.normal(size=(5, 4)), lambda x: weighted_sum(gelu(matmul(x, w)), c[:15].reshape(5, 3))),
        "grouped_matmul": (rng.normal(size=(3, 4)), lambda x: weighted_sum(grouped_matmul(x, gw), c[:18].reshape(3, 6))),
        "batch_norm": (rng.normal(size=(6, 3)), lambda x: weighted_sum(
            batch_norm(x, t64([1.0, 2.0, 0.5]), t64([0.0, 1.0, -1.0]), BatchNormState.fresh(3), "train"),
            c[:18].reshape(6, 3))),
        "max_over_neighbors": (rng.normal(size=(4, 3)), lambda x: weighted_sum(
            reduce_max_over_set(gather_neighbors(x, index), axis=-2), c[:12].reshape(4, 3))),
        "conv2d": (rng.normal(size=(1, 4, 4, 2)), lambda x: weighted_sum(
            conv2d(x, kernel, stride=2, padding=1), c[:12].reshape(1, 2, 2, 3))),
        "patchify": (rng.normal(size=(1, 4, 4, 1)), lambda x: weighted_sum(patchify(x, 2), c[:16].reshape(1, 4, 4))),
        "log_softmax": (rng.normal(size=(2, 5)), lambda x: weighted_sum(log_softmax(x), c[:10].reshape(2, 5))),
        "concat_mean": (rng.normal(size=(3, 2)), lambda x: weighted_sum(
            mean(concat([x, gelu(x)], axis=-1), axis=0), c[:4])),
        "take_rows": (rng.normal(size=(4, 3)), lambda x: weighted_sum(take_rows(x, 1, 3), c[:6].reshape(2, 3))),
    }
    x, f = cases[name]
    assert grad_check(f, x) <= 1e-6


def test_grad_check_params_covers_every_coordinate(rng):
    w = Parameter("w", (3, 2), HIGH)
    b = Parameter("b", (2,), HIGH)
    w.materialize(rng)
    b.value = rng.normal(size=2)
    x = t64(rng.normal(size=(4, 3)))
    errors = grad_check_params(lambda: sum_(gelu(add(matmul(x, w.value), b.value))), {"w": w, "b": b})
    assert set(errors) == {"w", "b"}
    assert max(errors.values()) <= 1e-6


# --------------------------------------------------------------------------
# Checkpoint archive
# --------------------------------------------------------------------------

def test_checkpoint_keeps_names_kinds_and_bits(tmp_path, rng):
    params = {"stage.block0.fc.weight": rng.normal(size=(3, 2)).astype(np.float32),
              "head.bias": rng.normal(size=4)}
    buffers = {"stage.block0.bn.running_mean": np.arange(3.0)}
    manifest = save_checkpoint(tmp_path / "m.vigw", params, buffers)
    assert [e["kind"] for e in manifest["entries"]] == ["param", "param", "buffer"]
    assert manifest["entries"][0]["offset"] == 9

    loaded_params, loaded_buffers = load_checkpoint(tmp_path / "m.vigw")
    assert list(loaded_params) == list(params)
    assert loaded_params["stage.block0.fc.weight"].dtype == np.float32
    np.testing.assert_array_equal(loaded_params["head.bias"], params["head.bias"])
    np.testing.assert_array_equal(loaded_buffers["stage.block0.bn.running_mean"], np.arange(3.0))


def test_checkpoint_kinds_survive_without_manifest(tmp_path):
    path = tmp_path / "m.vigw"
    save_checkpoint(path, {"fc.weight": np.ones((2, 2))}, {"bn.running_var": np.full(2, 3.0)})
    (tmp_path / "m.vigw.json").unlink()
    params, buffers = load_checkpoint(path)
    assert list(params) == ["fc.weight"]
    assert list(buffers) == ["bn.running_var"]
    np.testing.assert_array_equal(buffers["bn.running_var"], [3.0, 3.0])


def test_truncated_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "m.vigw"
    save_checkpoint(path, {"w": np.ones((4, 4))})
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DatasetFormatError):
        load_checkpoint(path)
