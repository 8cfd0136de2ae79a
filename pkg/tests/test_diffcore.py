import numpy as np
import pytest

from fastar_lab.diffcore import (
    EmaState,
    Graph,
    OptimState,
    RngStreams,
    adamw_step,
    clip_global_norm,
    default_decay_exempt,
    ema_update,
    forward_backward,
    grad_check,
    lr_at,
    relative_error,
)
from fastar_lab.diffcore import ops
from fastar_lab.diffcore.checkpoint import group, load_records, prefixed, save_records
from fastar_lab.diffcore.tensor import Tensor
from fastar_lab.exceptions import (
    CheckpointError,
    DomainError,
    NonFiniteError,
    NonScalarObjectiveError,
    ShapeMismatchError,
)


def test_ops_outside_graph_only_compute_values():
    out = ops.add(np.ones((2, 3)), np.arange(3.0))
    assert isinstance(out, Tensor)
    assert not out.requires_grad
    np.testing.assert_array_equal(out.data, 1.0 + np.arange(3.0)[None, :].repeat(2, axis=0))


def test_broadcast_gradient_is_summed_back():
    _, grads = forward_backward(lambda p: ops.sum_(ops.add(p["x"], p["y"])), {"x": np.zeros((3, 4)), "y": np.zeros(4)})
    np.testing.assert_array_equal(grads["x"], np.ones((3, 4)))
    np.testing.assert_array_equal(grads["y"], np.full(4, 3.0))


def test_matmul_gradient(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    _, grads = forward_backward(lambda p: ops.sum_(ops.matmul(p["a"], p["b"])), {"a": a, "b": b})
    np.testing.assert_allclose(grads["a"], np.ones((3, 2)) @ b.T)
    np.testing.assert_allclose(grads["b"], a.T @ np.ones((3, 2)))


def test_shared_leaf_accumulates_gradient(rng):
    x = rng.standard_normal(5)
    _, grads = forward_backward(lambda p: ops.sum_(ops.mul(p["x"], p["x"])), {"x": x})
    np.testing.assert_allclose(grads["x"], 2.0 * x)


def test_stopgrad_blocks_gradient(rng):
    x = rng.standard_normal((2, 3))
    _, grads = forward_backward(lambda p: ops.sum_(ops.mul(ops.stopgrad(p["x"]), p["x"])), {"x": x})
    np.testing.assert_allclose(grads["x"], x)


def test_named_outputs_pick_objective():
    outputs, grads = forward_backward(
        lambda p: {"loss": ops.sum_(ops.square(p["x"])), "aux": ops.sum_(p["x"])}, {"x": np.array([1.0, 2.0])}
    )
    assert float(outputs["loss"]) == 5.0
    assert float(outputs["aux"]) == 3.0
    np.testing.assert_allclose(grads["x"], [2.0, 4.0])


def test_non_scalar_objective_rejected():
    with pytest.raises(NonScalarObjectiveError):
        forward_backward(lambda p: ops.square(p["x"]), {"x": np.ones(3)})


def test_non_finite_forward_value_raises():
    with pytest.raises(NonFiniteError):
        ops.exp(np.array([1000.0]))


def test_shape_mismatch_reports_op():
    with pytest.raises(ShapeMismatchError, match="mse"):
        ops.mse(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ShapeMismatchError, match="matmul"):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_graph_scope_is_restored():
    with Graph() as graph:
        leaf = graph.leaf("x", np.ones(2))
        ops.sum_(leaf)
        assert len(graph.nodes) == 1
    assert not ops.sum_(np.ones(2)).requires_grad


@pytest.mark.parametrize("op", [ops.tanh, ops.silu, ops.gelu, ops.layernorm, ops.softmax])
def test_grad_check_passes_on_smooth_primitives(rng, op):
    weights = rng.standard_normal((3, 5))
    error, per_param = grad_check(lambda p: ops.sum_(ops.mul(op(p["x"]), weights)), {"x": rng.standard_normal((3, 5))})
    assert error < 1e-4
    assert set(per_param) == {"x"}


def test_grad_check_detects_wrong_gradient(rng):
    def wrong_square(x):
        x = ops.as_tensor(x)
        return ops.emit("square", (x,), x.data * x.data, lambda g: (3.0 * g * x.data,))

    error, _ = grad_check(lambda p: ops.sum_(wrong_square(p["x"])), {"x": rng.standard_normal(4)})
    assert error > 0.1


def test_grad_check_rejects_step_outside_range():
    with pytest.raises(DomainError):
        grad_check(lambda p: ops.sum_(p["x"]), {"x": np.ones(2)}, h=0.1)


def test_relative_error_of_identical_arrays_is_zero():
    assert relative_error(np.ones(3), np.ones(3)) == 0.0
    assert relative_error(np.empty(0), np.empty(0)) == 0.0


def test_relative_error_is_elementwise():
    # a small coordinate off by a factor of two dominates, whatever the large ones do
    analytic, numeric = np.array([10.0, 1e-6]), np.array([10.0, 2e-6])
    assert relative_error(analytic, numeric) == pytest.approx(1e-6 / (3e-6 + 1e-12))
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0


def test_grad_check_covers_every_coordinate_by_default(rng):
    def off_at_last(x):
        x = ops.as_tensor(x)
        scale = np.ones(x.shape)
        scale[-1] = 1.01
        return ops.emit("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data * scale,))

    point = {"x": rng.standard_normal(200) + 3.0}
    error, _ = grad_check(lambda p: ops.sum_(off_at_last(p["x"])), point)
    assert error == pytest.approx(0.01 / 2.01, rel=1e-3)
    sampled, _ = grad_check(lambda p: ops.sum_(off_at_last(p["x"])), point, max_elements=10)
    assert sampled <= error


def test_adamw_first_step_moves_by_learning_rate():
    params = {"backbone.w.weight": np.array([1.0, -1.0])}
    state = OptimState.create(params, lr=0.1, weight_decay=0.0)
    new, state = adamw_step(params, {"backbone.w.weight": np.array([0.5, -2.0])}, state)
    np.testing.assert_allclose(new["backbone.w.weight"], [0.9, -0.9], atol=1e-6)
    assert state.step == 1


def test_weight_decay_exemptions():
    assert default_decay_exempt("backbone.blocks.0.attn.qkv.bias")
    assert default_decay_exempt("head.blocks.0.mlp.0.weight")
    assert not default_decay_exempt("backbone.blocks.0.attn.qkv.weight")

    params = {"backbone.w.weight": np.ones(2), "head.w.weight": np.ones(2)}
    zeros = {name: np.zeros(2) for name in params}
    state = OptimState.create(params, lr=0.1, weight_decay=0.5)
    new, _ = adamw_step(params, zeros, state)
    np.testing.assert_allclose(new["backbone.w.weight"], 0.95)
    np.testing.assert_allclose(new["head.w.weight"], 1.0)


def test_adamw_rejects_missing_gradient():
    params = {"a": np.ones(2), "b": np.ones(2)}
    with pytest.raises(ShapeMismatchError):
        adamw_step(params, {"a": np.ones(2)}, OptimState.create(params))


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    unchanged, _ = clip_global_norm(grads, 10.0)
    np.testing.assert_array_equal(unchanged["a"], grads["a"])


def test_ema_update_blends_parameters():
    ema = EmaState.create({"w": np.zeros(2)}, decay=0.75)
    ema = ema_update(ema, {"w": np.full(2, 4.0)})
    np.testing.assert_allclose(ema.shadow["w"], 1.0)
    assert ema.updates == 1
    with pytest.raises(DomainError):
        EmaState.create({"w": np.zeros(2)}, decay=1.0)


def test_linear_warmup():
    assert lr_at(0, 1e-3, 4) == pytest.approx(2.5e-4)
    assert lr_at(3, 1e-3, 4) == pytest.approx(1e-3)
    assert lr_at(100, 1e-3, 4) == pytest.approx(1e-3)
    assert lr_at(0, 1e-3, 0) == 1e-3


def test_rng_streams_depend_only_on_seed_and_path():
    first = RngStreams(7)
    second = RngStreams(7)
    second.stream("other").random(10)
    np.testing.assert_array_equal(first.stream("data", 3).random(4), second.stream("data", 3).random(4))
    assert not np.array_equal(first.stream("data", 3).random(4), first.stream("data", 4).random(4))
    assert not np.array_equal(RngStreams(8).stream("data", 3).random(4), first.stream("data", 3).random(4))


def test_checkpoint_records_round_trip(tmp_path, rng):
    records = {
        **prefixed("param", {"head.w": rng.standard_normal((2, 3))}),
        **prefixed("ema", {"head.w": np.zeros((2, 3))}),
    }
    path = save_records(tmp_path / "ckpt.fits", records, {"step": 12, "ckptid": "run-0000012"})
    loaded, meta = load_records(path)
    assert list(loaded) == list(records)
    np.testing.assert_array_equal(loaded["param/head.w"], records["param/head.w"])
    assert meta["step"] == 12
    assert meta["ckptid"] == "run-0000012"
    assert set(group(loaded, "ema")) == {"head.w"}


def test_missing_checkpoint_raises(tmp_path):
    with pytest.raises(CheckpointError):
        load_records(tmp_path / "absent.fits")
